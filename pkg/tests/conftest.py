import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY_CONFIG = """\
img_h=32
img_w=64
lr=0.3
lr_halve_every=10
epochs=2
refine_lr=3.0
refine_epochs=2
refine_lr_halve_every=50
n_train=8
n_test=8
figures=false
"""

# one line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible without ``-s``
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
