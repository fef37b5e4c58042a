"""Convolutional regression/classification network built from ``layers``."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L

DEFAULT_CHANNELS = (16, 32, 32, 64, 64, 64)
DEFAULT_SHARED_WIDTH = 32


@dataclass(frozen=True)
class LayerConfig:
    """Architecture of a ConvNet.

    Each conv stage is conv3x3 -> ELU -> batch norm -> 2x2 max pool. With
    ``shared_kernels`` every stage after the first reuses one weight bank
    but keeps its own biases and batch-norm parameters.
    """

    conv_channels: tuple[int, ...] = DEFAULT_CHANNELS
    shared_kernels: bool = False
    in_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    dense_widths: tuple[int, ...] = (64, 32)
    n_extra: int = 3
    n_outputs: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    elu_alpha: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "dense_widths", tuple(int(c) for c in self.dense_widths))
        object.__setattr__(self, "input_size", tuple(int(c) for c in self.input_size))
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ValueError("need at least one conv stage with positive width")
        if self.shared_kernels and len(set(self.conv_channels)) != 1:
            raise ValueError("shared kernels need a common width across all conv stages")
        h, w = self.input_size
        for _ in self.conv_channels:
            if h < 2 or w < 2:
                raise ValueError(f"input {self.input_size} is too small for {self.n_stages} pool stages")
            h, w = h // 2, w // 2

    @property
    def n_stages(self) -> int:
        return len(self.conv_channels)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
        return self.conv_channels[-1], h, w

    @classmethod
    def regressor(cls, shared_kernels=False, conv_channels=None, input_size=64, **kw) -> "LayerConfig":
        """Six conv stages, two hidden dense layers, one output node."""
        if conv_channels is None:
            conv_channels = (DEFAULT_SHARED_WIDTH,) * 6 if shared_kernels else DEFAULT_CHANNELS
        if len(conv_channels) != 6:
            raise ValueError("the regression network has exactly six conv stages")
        if isinstance(input_size, int):
            input_size = (input_size, input_size)
        return cls(conv_channels=tuple(conv_channels), shared_kernels=shared_kernels,
                   input_size=input_size, **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "LayerConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()})


@dataclass
class _Cache:
    stages: list = field(default_factory=list)
    dense: list = field(default_factory=list)
    flat_shape: tuple = ()


class ConvNet:
    """Parameters, running statistics and the forward/backward passes."""

    def __init__(self, config: LayerConfig, seed: int | np.random.Generator = 0):
        self.config = config
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cin = config.in_channels
        for i, cout in enumerate(config.conv_channels, start=1):
            wname = self._conv_weight_name(i)
            if wname not in self.params:
                std = np.sqrt(2.0 / (cin * 9))
                self.params[wname] = rng.normal(0.0, std, (cout, cin, 3, 3))
            self.params[f"conv{i}.b"] = np.zeros(cout)
            self._add_bn(f"bn{i}", cout)
            cin = cout
        c, h, w = config.feature_shape
        fin = c * h * w + config.n_extra
        for j, width in enumerate(config.dense_widths, start=1):
            self.params[f"dense{j}.w"] = rng.normal(0.0, np.sqrt(2.0 / fin), (fin, width))
            self.params[f"dense{j}.b"] = np.zeros(width)
            self._add_bn(f"bnd{j}", width)
            fin = width
        self.params["out.w"] = rng.normal(0.0, np.sqrt(1.0 / fin), (fin, config.n_outputs))
        self.params["out.b"] = np.zeros(config.n_outputs)
        # draws happen in float64 so both precisions start from the same weights
        self.dtype = np.dtype(config.dtype)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(self.dtype) for k, v in self.buffers.items()}
        self._cache: _Cache | None = None

    def _add_bn(self, name, width):
        self.params[f"{name}.gamma"] = np.ones(width)
        self.params[f"{name}.beta"] = np.zeros(width)
        self.buffers[f"{name}.mean"] = np.zeros(width)
        self.buffers[f"{name}.var"] = np.ones(width)

    def _conv_weight_name(self, stage: int) -> str:
        if self.config.shared_kernels and stage >= 2:
            return "conv_shared.w"
        return f"conv{stage}.w"

    def conv_weight(self, stage: int) -> np.ndarray:
        return self.params[self._conv_weight_name(stage)]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward / backward ---------------------------------------------------

    def _bn(self, name, x, train, update_stats):
        cfg = self.config
        return L.batch_norm_forward(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
            self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"],
            train=train, eps=cfg.bn_eps, momentum=cfg.bn_momentum, update_stats=update_stats,
        )

    def forward(self, x, extra=None, train=False, update_stats=True, keep_cache=True, upto_stage=None,
                pool_switches=None):
        """Run the network on channels-last ``x`` of shape ``(N, H, W, C)``.

        A 3D ``x`` is read as ``(N, H, W)`` single-channel images.

        ``extra`` holds ``(N, n_extra)`` features appended to the flattened
        conv output. With ``upto_stage`` the pooled activation of that stage
        is returned instead of the network output. ``pool_switches`` replays
        the max-pool routing recorded by ``last_pool_switches()``.
        """
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != (*cfg.input_size, cfg.in_channels):
            raise ValueError(f"expected input (N, {cfg.input_size}, {cfg.in_channels}), got {x.shape}")
        cache = _Cache()
        h = x
        for i in range(1, cfg.n_stages + 1):
            h, c_conv = L.conv3x3_forward(h, self.conv_weight(i), self.params[f"conv{i}.b"])
            h, c_elu = L.elu_forward(h, cfg.elu_alpha)
            h, c_bn = self._bn(f"bn{i}", h, train, update_stats)
            sw = None if pool_switches is None else pool_switches[i - 1]
            h, c_pool = L.maxpool2x2_forward(h, sw)
            cache.stages.append((c_conv, c_elu, c_bn, c_pool))
            if upto_stage == i:
                self._cache = cache if keep_cache else None
                return h
        cache.flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        if cfg.n_extra:
            if extra is None:
                raise ValueError(f"network expects {cfg.n_extra} extra features")
            extra = np.asarray(extra, dtype=self.dtype).reshape(h.shape[0], cfg.n_extra)
            h = np.concatenate([h, extra], axis=1)
        for j in range(1, len(cfg.dense_widths) + 1):
            h, c_d = L.dense_forward(h, self.params[f"dense{j}.w"], self.params[f"dense{j}.b"])
            h, c_elu = L.elu_forward(h, cfg.elu_alpha)
            h, c_bn = self._bn(f"bnd{j}", h, train, update_stats)
            cache.dense.append((c_d, c_elu, c_bn))
        out, c_out = L.dense_forward(h, self.params["out.w"], self.params["out.b"])
        cache.dense.append((c_out,))
        self._cache = cache if keep_cache else None
        return L.check_finite(out, "network output")

    def backward(self, dout, need_input_grad=False, stop_stage=0):
        """Gradients of all parameters given ``dL/d output``.

        Returns ``(grads, dx)`` where ``dx`` is the input gradient when
        requested, else ``None``. With ``stop_stage`` > 0 backpropagation
        halts there and ``dx`` is the gradient at that stage's pooled output
        (parameters of lower stages keep zero gradients).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        cfg = self.config
        cache = self._cache
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        (x_out,) = cache.dense[-1]
        g, grads["out.w"], grads["out.b"] = L.dense_backward(dout, x_out, self.params["out.w"])
        for j in range(len(cfg.dense_widths), 0, -1):
            c_d, c_elu, c_bn = cache.dense[j - 1]
            g, grads[f"bnd{j}.gamma"], grads[f"bnd{j}.beta"] = L.batch_norm_backward(g, c_bn)
            g = L.elu_backward(g, c_elu)
            g, grads[f"dense{j}.w"], grads[f"dense{j}.b"] = L.dense_backward(g, c_d, self.params[f"dense{j}.w"])
        if cfg.n_extra:
            g = g[:, : g.shape[1] - cfg.n_extra]
        g = g.reshape(cache.flat_shape)
        g = self._backward_stages(g, cfg.n_stages, grads, need_input_grad, stop_stage)
        return grads, g

    def _backward_stages(self, g, from_stage, grads, need_input_grad, stop_stage=0):
        cache = self._cache
        for i in range(from_stage, stop_stage, -1):
            c_conv, c_elu, c_bn, c_pool = cache.stages[i - 1]
            g = L.maxpool2x2_backward(g, c_pool)
            g, dgamma, dbeta = L.batch_norm_backward(g, c_bn)
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
            g = L.elu_backward(g, c_elu)
            need_dx = i > 1 or need_input_grad
            g, dw, db = L.conv3x3_backward(g, c_conv, self.conv_weight(i), need_dx=need_dx)
            grads[self._conv_weight_name(i)] += dw
            grads[f"conv{i}.b"] = db
        return g

    def last_pool_switches(self):
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        return [stage[3][0] for stage in self._cache.stages]

    def predict(self, x, extra=None, batch_size=256):
        """Inference-mode outputs, evaluated in chunks."""
        outs = []
        for s in range(0, len(x), batch_size):
            e = None if extra is None else extra[s : s + batch_size]
            outs.append(self.forward(x[s : s + batch_size], e, train=False, keep_cache=False))
        if not outs:
            return np.zeros((0, self.config.n_outputs), dtype=self.dtype)
        return np.concatenate(outs)

    # -- state ----------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in declaration order."""
        out = {k: v for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k][...] = state[k]
        for k in self.buffers:
            self.buffers[k][...] = state[f"buffer:{k}"]

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}
