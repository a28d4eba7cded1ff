import logging

import numpy as np
import pytest

from rtpref.core.ez_model import EZParams
from rtpref.core.losses import NuisanceSet
from rtpref.core.reward_models import LinearReward
from rtpref.data.dataset import Dataset
from rtpref.errors import ConfigError
from rtpref.learn.asymptotics import exact_nuisances
from rtpref.learn.estimation import FitConfig, FitReport, two_stage_fit
from rtpref.learn.nuisance import fit_logistic, plugin_time_nuisance
from rtpref.learn.optimizer import OptimizerConfig


def _fit(data, **kwargs):
    return two_stage_fit(data, FitConfig(**kwargs))


def test_exact_nuisance_injection(make_linear_data):
    truth, data = make_linear_data([2.0], 20_000, 0)
    fit = two_stage_fit(data, FitConfig(strategy="reuse", cap="none"), nuisances=exact_nuisances(truth, EZParams()))
    assert fit.model.params[0] == pytest.approx(2.0, abs=0.05)
    assert fit.report.nuisance_source == "injected"


@pytest.mark.parametrize("strategy", ["reuse", "split", "crossfit"])
def test_plugin_strategies_recover_theta(make_linear_data, strategy):
    _, data = make_linear_data([2.0], 20_000, 1)
    fit = _fit(data, strategy=strategy)
    assert fit.model.params[0] == pytest.approx(2.0, abs=0.15)
    assert fit.report.nuisance_source == "fitted"


def test_logloss_skips_first_stage(make_linear_data):
    _, data = make_linear_data([0.5, -0.5], 500, 2, feature="sphere", pairing="independent")
    fit = _fit(data, loss="logloss")
    report = fit.report.to_dict()
    assert report["nuisance_source"] == "none"
    assert report["n_second_stage"] == 500
    assert list(report)[:2] == ["strategy", "loss"]


def test_leave_one_out_crossfit(make_linear_data, caplog):
    _, data = make_linear_data([0.8, 0.3], 30, 3, feature="sphere", pairing="independent")
    with caplog.at_level(logging.WARNING):
        fit = _fit(data, strategy="crossfit", folds=30)
    assert np.all(np.isfinite(fit.model.params))
    assert fit.report.folds["sizes"] == [1] * 30
    assert "10·K" in caplog.text


def test_fold_bookkeeping(make_linear_data):
    _, data = make_linear_data([1.0, -1.0], 400, 4, feature="sphere", pairing="independent")
    fit = _fit(data, strategy="crossfit", folds=5)
    folds = fit.report.folds
    assert folds["k"] == 5 and sum(folds["sizes"]) == 400
    assert all(f["disjoint"] for f in folds["per_fold"])
    assert all(f["train_size"] + f["eval_size"] == 400 for f in folds["per_fold"])
    assert {"time_mse", "logloss"} <= set(fit.report.nuisance_val_losses)


def test_crossfit_nuisance_excludes_own_fold(make_linear_data):
    _, data = make_linear_data([1.0, -1.0], 300, 5, feature="sphere", pairing="independent")
    cfg = FitConfig(strategy="crossfit", folds=3)
    fit = two_stage_fit(data, cfg)
    for k in range(3):
        train, held = fit.fold_assignment.train_indices(k), fit.fold_assignment.indices(k)
        model, _ = fit_logistic(data, LinearReward((2,), [0.0, 0.0]), 1.0, OptimizerConfig(),
                                np.random.default_rng(99), idx=train)
        expected = plugin_time_nuisance(model, 1.0)(data.x1[held], data.x2[held])
        np.testing.assert_allclose(fit.nuisance_values.t_hat[held], expected, rtol=1e-12)


def test_split_bookkeeping(make_linear_data):
    _, data = make_linear_data([1.0], 101, 6)
    fit = _fit(data, strategy="split")
    assert fit.report.folds["split_sizes"] == [51, 50]
    assert fit.report.folds["disjoint"]
    assert fit.report.n_second_stage == 50
    with pytest.raises(ConfigError):
        _fit(data.subset(np.arange(19)), strategy="split")


def test_too_many_folds(make_linear_data):
    _, data = make_linear_data([1.0], 10, 7)
    with pytest.raises(ConfigError):
        _fit(data, strategy="crossfit", folds=11)


def test_fit_is_deterministic(make_linear_data):
    _, data = make_linear_data([0.4, 0.9], 300, 8, feature="sphere", pairing="independent")
    a = _fit(data, strategy="crossfit", seed=3)
    b = _fit(data, strategy="crossfit", seed=3)
    np.testing.assert_array_equal(a.model.params, b.model.params)
    assert a.report.to_dict() == b.report.to_dict()


@pytest.mark.parametrize("algorithm", ["gd", "adam"])
def test_second_stage_history_monotone(make_linear_data, algorithm):
    _, data = make_linear_data([1.0, 0.5], 500, 9, feature="sphere", pairing="independent")
    opt = OptimizerConfig(algorithm=algorithm, step_size=0.5, max_epochs=200)
    fit = _fit(data, strategy="reuse", optimizer=opt)
    assert len(fit.history) > 1
    assert np.all(np.diff(fit.history) <= 1e-9)


def test_rank_deficient_features_flagged(caplog):
    rng = np.random.default_rng(10)
    n = 200
    x1 = np.column_stack([rng.standard_normal(n), np.ones(n)])
    x2 = np.column_stack([rng.standard_normal(n), np.ones(n)])
    data = Dataset(x1, x2, y=rng.choice([-1, 1], size=n), t_total=rng.uniform(0.2, 2.0, size=n))
    with caplog.at_level(logging.WARNING):
        fit = _fit(data, loss="logloss")
    assert fit.report.rank_deficient
    assert fit.model.params[1] == 0.0
    assert "条件数" in caplog.text


def test_unknown_barrier_rules(make_linear_data):
    with pytest.raises(ConfigError, match="ortho2"):
        FitConfig(loss="ortho", barrier="unknown")
    _, data = make_linear_data([0.6], 20_000, 11, a=1.5)
    fit = _fit(data, loss="ortho2", barrier="unknown", strategy="split")
    assert fit.report.a_internal == 1.0
    assert fit.report.barrier_sq_estimate == pytest.approx(1.5 ** 2, rel=0.1)
    assert fit.report.cap == pytest.approx(50 * data.t_total.mean())


def test_ortho2_known_barrier_recovers_theta(make_linear_data):
    _, data = make_linear_data([1.5], 20_000, 12)
    fit = _fit(data, loss="ortho2", strategy="crossfit")
    assert fit.model.params[0] == pytest.approx(1.5, abs=0.15)


def test_non_decision_time_assumed(make_linear_data):
    _, data = make_linear_data([1.0], 5_000, 13, t_nd=0.3)
    fit = _fit(data, strategy="reuse", t_nd=0.3)
    assert fit.model.params[0] == pytest.approx(1.0, abs=0.15)


def test_template_dimension_checked(make_linear_data):
    _, data = make_linear_data([1.0], 50, 14)
    with pytest.raises(ConfigError):
        two_stage_fit(data, FitConfig(), template=LinearReward((2,), [0.0, 0.0]))


def test_fit_config_from_dict():
    cfg = FitConfig.from_dict({"loss": "ortho", "model": "mlp", "hidden": [4], "optimizer": {"max_epochs": 3}})
    assert cfg.nuisance == "regression"
    assert cfg.optimizer.algorithm == "adam" and cfg.optimizer.max_epochs == 3
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="lr"):
        FitConfig.from_dict({"lr": 0.1})
    with pytest.raises(ConfigError, match="crossfit"):
        FitConfig.from_dict({"strategy": "bootstrap"})
    with pytest.raises(ConfigError):
        FitConfig(folds=1)
    with pytest.raises(ConfigError):
        FitConfig(cap="big")


def test_mlp_fit_with_regression_nuisance():
    rng = np.random.default_rng(15)
    n = 200
    x1, x2 = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    data = Dataset(x1, x2, y=rng.choice([-1, 1], size=n), t_total=rng.uniform(0.2, 2.0, size=n))
    opt = {"max_epochs": 5}
    fit = two_stage_fit(data, FitConfig.from_dict({"loss": "ortho", "strategy": "split", "model": "mlp",
                                                   "hidden": [4], "optimizer": opt}))
    assert fit.model.kind == "mlp"
    assert np.all(np.isfinite(fit.model.params))
    assert "time_mse" in fit.report.nuisance_val_losses


def test_report_round_trips_through_dict(make_linear_data):
    _, data = make_linear_data([1.0], 100, 16)
    report = _fit(data, strategy="reuse").report
    assert FitReport(**{k: v for k, v in report.to_dict().items() if k not in ("strategy", "loss")}) == report


class _Corrupted:
    """把时间 nuisance 整体放大 (1 + δ)"""

    def __init__(self, base: NuisanceSet, delta: float):
        self.base, self.delta = base, delta

    def nuisances(self) -> NuisanceSet:
        return NuisanceSet(reward_nuisance=self.base.reward_nuisance,
                           time_nuisance=lambda X1, X2: (1 + self.delta) * self.base.time_nuisance(X1, X2))


@pytest.mark.slow
def test_orthogonal_loss_robust_to_time_nuisance_error(make_linear_data):
    errors = {(loss, d): [] for loss in ("ortho", "nonortho") for d in (0.0, 0.2)}
    for rep in range(20):
        truth, data = make_linear_data([2.0], 20_000, 1000 + rep)
        exact = exact_nuisances(truth, EZParams())
        for loss in ("ortho", "nonortho"):
            for delta in (0.0, 0.2):
                cfg = FitConfig(loss=loss, strategy="reuse", cap="none", seed=rep)
                fit = two_stage_fit(data, cfg, nuisances=_Corrupted(exact, delta).nuisances())
                errors[(loss, delta)].append(abs(fit.model.params[0] - 2.0))
    med = {k: float(np.median(v)) for k, v in errors.items()}
    assert med[("ortho", 0.2)] <= 2 * med[("ortho", 0.0)]
    assert med[("nonortho", 0.2)] > 2 * med[("nonortho", 0.0)]


@pytest.mark.slow
@pytest.mark.parametrize("strategy", ["reuse", "split"])
def test_strategies_consistent_at_large_n(make_linear_data, strategy):
    truth, data = make_linear_data([2.0], 100_000, 17)
    fit = _fit(data, strategy=strategy, seed=17)
    assert fit.model.params[0] == pytest.approx(2.0, abs=0.15)
    oracle = two_stage_fit(data, FitConfig(strategy="reuse", cap="none"),
                           nuisances=exact_nuisances(truth, EZParams()))
    assert oracle.model.params[0] == pytest.approx(2.0, abs=0.05)
