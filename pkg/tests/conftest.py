import numpy as np
import pytest

from popgrad.models import ModelSpec, build


def make_mlp(sizes, seed=0):
    spec = ModelSpec("mlp", (1, 1, sizes[0]), sizes[-1], layer_sizes=tuple(sizes))
    return build(spec, np.random.default_rng(seed))


def make_conv(shape=(1, 8, 8), channels=(2, 3), head=4, classes=3, seed=0):
    spec = ModelSpec("miniconv", shape, classes, channels=channels, head=head)
    return build(spec, np.random.default_rng(seed))


def random_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n,) + model.spec.input_shape)
    y = rng.integers(0, model.spec.classes, size=n)
    return x, y


def rel_err(a, b):
    """Max abs difference scaled by the larger gradient magnitude."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


@pytest.fixture
def mlp():
    return make_mlp((8, 6, 3))


@pytest.fixture
def conv():
    return make_conv()


# -- acceptance report -------------------------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[name]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        label = name.removeprefix("test_").replace("_", " ")
        terminalreporter.write_line(f"{verdict}  {label}  {detail}")
