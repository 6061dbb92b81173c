import pytest

from volnet.cohort import SynthSpec, preprocess_cohort, synth_generate


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Preprocessed 4+4 synthetic cohort (isotropic u8 volumes), shared read-only."""
    root = tmp_path_factory.mktemp("cohort")
    raw = synth_generate(SynthSpec(4, 4, dims=(32, 32, 12), spacing=(1.0, 1.0, 2.0)), 0, root / "raw")
    return preprocess_cohort(raw, root / "pre")


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
