import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    """A short, low-resolution synthetic clip with a hand occluder in contact."""
    from sogtrack.synth import SynthSpec, synth_scene

    return synth_scene(SynthSpec(n_dense=1500, n_frames=5, width=96, height=96, focal=120.0, n_patches=6,
                                 occluder_coverage=0.25, contact=True, seed=11))


@pytest.fixture(scope="session")
def plain_scene():
    from sogtrack.synth import SynthSpec, synth_scene

    return synth_scene(SynthSpec(n_dense=1500, n_frames=4, width=96, height=96, focal=120.0, n_patches=6, seed=5))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
