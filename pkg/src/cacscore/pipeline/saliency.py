"""Saliency heatmaps for the slice regressor.

The gradient of the scalar output is taken exactly down to the pooled
output of the third conv stage. From there it is projected back to the
image the deconvnet way: unpool through the recorded max-pool switches,
scale by the batch-norm gain, keep the positive part and apply the
transposed learned kernels. The absolute result is scaled to [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..tensornet import layers as L
from ..tensornet.network import ConvNet

SALIENCY_METHOD = "gradient back-projection from conv stage 3 (transposed kernels, ReLU-gated)"
PROJECTION_STAGE = 3


def _normalise(m: np.ndarray) -> np.ndarray:
    peak = float(m.max()) if m.size else 0.0
    return m / peak if peak > 0 else np.zeros_like(m)


def saliency_maps(net: ConvNet, images, extra=None, stage: int = PROJECTION_STAGE) -> np.ndarray:
    """Non-negative maps shaped like ``images`` ``(N, H, W)``, each scaled to [0, 1]."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    stage = min(stage, net.config.n_stages)
    out = net.forward(x, extra, train=False, keep_cache=True)
    # every sample's output is independent in inference mode, so a ones
    # seed yields each sample's own gradient in one pass
    _, g = net.backward(np.ones_like(out), stop_stage=stage)
    cache = net._cache
    for i in range(stage, 0, -1):
        c_conv, _, c_bn, c_pool = cache.stages[i - 1]
        g = L.maxpool2x2_backward(g, c_pool)
        g, _, _ = L.batch_norm_backward(g, c_bn)
        g = np.maximum(g, 0.0)
        g = L.conv3x3_input_grad(g, net.conv_weight(i), c_conv[1])
    maps = np.abs(g).sum(axis=-1)
    maps = np.stack([_normalise(m) for m in maps])
    return maps[0] if single else maps


def overlay_png(image: np.ndarray, saliency: np.ndarray, path, max_alpha: float = 0.6) -> None:
    """Greyscale slice with the map blended on top in red (alpha grows with saliency)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    grey = np.repeat((img * 255.0)[..., None], 3, axis=-1)
    heat = np.zeros_like(grey)
    heat[..., 0] = 255.0
    heat[..., 1] = 255.0 * np.clip(saliency, 0, 1) ** 2
    alpha = (max_alpha * np.clip(saliency, 0, 1))[..., None]
    rgb = np.round(grey * (1 - alpha) + heat * alpha).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")
    tmp.replace(path)
