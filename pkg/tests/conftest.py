from dataclasses import dataclass

ACCEPTANCE: list["Criterion"] = []


@dataclass
class Criterion:
    name: str
    ok: bool = False
    detail: str = "not evaluated"

    def check(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail
        assert ok, f"{self.name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if c.ok else 'FAIL'}  {c.name}: {c.detail}")
