import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from satrdl.data import SynthSpec, synth_generate

# property tests in the invariant suite ask for at least this many cases
INVARIANT_EXAMPLES = 500

settings.register_profile(
    "invariant",
    max_examples=INVARIANT_EXAMPLES,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)


@pytest.fixture(scope="session")
def short_corpus():
    """120 short synthetic trials (two to five windows each)."""
    return synth_generate(SynthSpec(min_length=150, max_length=270, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict[str, tuple[str, str]] = {}


class criterion:
    """Context manager recording one acceptance criterion's verdict.

    The body's assertions decide the outcome; the failure is re-raised so
    pytest reports it as usual.
    """

    def __init__(self, name: str):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            ACCEPTANCE[self.name] = ("PASS", self.detail)
        else:
            msg = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            ACCEPTANCE[self.name] = ("FAIL", f"{self.detail} {msg}".strip())
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{verdict}  {name}" + (f"  ({detail})" if detail else ""))
