import pytest


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line (visible even under output capture), then assert."""

    def report(label: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}", flush=True)
        assert ok, f"{label}: {detail}"

    return report


@pytest.fixture
def emit(capsys):
    """Print free-form lines (tables) outside of output capture."""

    def write(text: str) -> None:
        with capsys.disabled():
            print("\n" + text, flush=True)

    return write
