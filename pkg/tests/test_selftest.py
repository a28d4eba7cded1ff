import numpy as np
import pytest

from rtpref.core.losses import LOSS_KINDS
from rtpref.tracker.selftest import GRAD_TOL, gradient_error, gradient_report, run_selftest


def test_selftest_passes():
    result = run_selftest(seed=0)
    failed = [name for name, ok in result["checks"].items() if not ok]
    assert result["passed"], failed
    assert result["seconds"] >= 0


def test_gradient_report_covers_every_pair():
    report = gradient_report(instances=2, seed=1)
    assert set(report) == {f"{loss}/{model}" for loss in LOSS_KINDS for model in ("linear", "mlp")}
    assert all(err <= GRAD_TOL for err in report.values())


@pytest.mark.parametrize("loss_kind", LOSS_KINDS)
def test_gradient_error_small_for_linear(loss_kind):
    assert gradient_error(loss_kind, "linear", np.random.default_rng(2)) <= GRAD_TOL
