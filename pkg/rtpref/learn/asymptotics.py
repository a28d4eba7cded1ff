"""线性奖励的渐近协方差 — Monte-Carlo 闭式评估 + 重复拟合的经验校验

特征 X 取查询对的差向量；经验校验用 (X, 0) 配对生成数据。
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.special import expit

from rtpref.core.ez_model import EZParams, EZSampleConfig, expected_time, tanhc
from rtpref.core.losses import NuisanceSet
from rtpref.core.reward_models import LinearReward, reward_diff_batch
from rtpref.data.features import feature_sampler
from rtpref.data.generator import OracleSpec, generate
from rtpref.errors import ConfigError, DegeneracyError, ExperimentError, RtPrefError
from rtpref.learn.estimation import FitConfig, two_stage_fit

logger = logging.getLogger(__name__)

# 条件数超过该值抛 DegeneracyError
COND_LIMIT = 1e12
MIN_MC_SAMPLES = 10_000
# 失败 rep 占比上限
MAX_FAIL_RATIO = 0.10


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def stable_inverse(m: np.ndarray, name: str) -> tuple[np.ndarray, float]:
    """对称矩阵的特征分解求逆，返回 (逆, 条件数)"""
    w, v = eigh(_symmetrize(m))
    lo, hi = float(w[0]), float(w[-1])
    if lo <= 0 or hi / lo > COND_LIMIT:
        cond = math.inf if lo <= 0 else hi / lo
        raise DegeneracyError(f"{name} 奇异或病态：最小特征值 {lo:.3e}，条件数 {cond:.3e}")
    return _symmetrize((v / w) @ v.T), hi / lo


def _features(theta_o, feature, n_mc: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """feature 为分布名或 (n, rng) → (n, d) 的采样函数"""
    theta = np.atleast_1d(np.asarray(theta_o, dtype=float))
    if n_mc < MIN_MC_SAMPLES:
        raise ConfigError(f"Monte-Carlo 样本数至少 {MIN_MC_SAMPLES}，当前 {n_mc}")
    sampler = feature if callable(feature) else feature_sampler(feature, theta.size)
    X = np.asarray(sampler(n_mc, rng), dtype=float).reshape(n_mc, theta.size)
    return X, X @ theta


def cov_logloss(theta_o, a: float, feature, n_mc: int, rng: np.random.Generator
                ) -> tuple[np.ndarray, float]:
    """(4a²·E[σ(2a⟨θ,X⟩)σ(−2a⟨θ,X⟩)XXᵀ])⁻¹"""
    X, u = _features(theta_o, feature, n_mc, rng)
    w = expit(2.0 * a * u) * expit(-2.0 * a * u)
    inner = 4.0 * a * a * (X.T * w) @ X / n_mc
    return stable_inverse(inner, "logloss 信息矩阵")


def cov_ortho(theta_o, a: float, feature, n_mc: int, rng: np.random.Generator
              ) -> tuple[np.ndarray, float]:
    """E[t²XXᵀ]⁻¹ · E[t³XXᵀ] · E[t²XXᵀ]⁻¹，t = a·tanh(a⟨θ,X⟩)/⟨θ,X⟩"""
    X, u = _features(theta_o, feature, n_mc, rng)
    t = a * a * np.asarray(tanhc(a * u))
    A = (X.T * t ** 2) @ X / n_mc
    B = (X.T * t ** 3) @ X / n_mc
    A_inv, cond = stable_inverse(A, "E[t²XXᵀ]")
    return _symmetrize(A_inv @ B @ A_inv), cond


@dataclass
class CovarianceReport:
    sigma_logloss: np.ndarray
    sigma_ortho: np.ndarray
    mc_samples: int
    feature: str
    theta_o: np.ndarray
    a: float
    cond_logloss: float = 1.0
    cond_ortho: float = 1.0

    def to_dict(self) -> dict:
        return {
            "sigma_logloss": self.sigma_logloss.tolist(),
            "sigma_ortho": self.sigma_ortho.tolist(),
            "mc_samples": self.mc_samples,
            "feature": self.feature,
            "theta_o": np.atleast_1d(self.theta_o).tolist(),
            "a": self.a,
            "cond_logloss": self.cond_logloss,
            "cond_ortho": self.cond_ortho,
        }


def covariance_report(theta_o, a: float, feature: str, n_mc: int, seed: int) -> CovarianceReport:
    """两个协方差用同一批 Monte-Carlo 特征"""
    s_log, c_log = cov_logloss(theta_o, a, feature, n_mc, np.random.default_rng(seed))
    s_orth, c_orth = cov_ortho(theta_o, a, feature, n_mc, np.random.default_rng(seed))
    return CovarianceReport(sigma_logloss=s_log, sigma_ortho=s_orth, mc_samples=n_mc, feature=feature,
                            theta_o=np.atleast_1d(np.asarray(theta_o, dtype=float)), a=a,
                            cond_logloss=c_log, cond_ortho=c_orth)


@dataclass(frozen=True)
class ExperimentSpec:
    """重复拟合实验：nuisance="exact" 时注入真值 (r_o, t_o)"""

    theta_o: tuple
    a: float = 1.0
    n: int = 50_000
    reps: int = 200
    loss: str = "ortho"
    strategy: str = "reuse"
    feature: str = "rademacher"
    nuisance: str = "exact"

    def __post_init__(self):
        if self.reps < 2:
            raise ConfigError(f"reps 至少为 2，当前 {self.reps}")
        if self.nuisance not in ("exact", "plugin", "regression"):
            raise ConfigError(f"nuisance={self.nuisance!r} 非法，可选: exact, plugin, regression")

    @property
    def d(self) -> int:
        return len(self.theta_o)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        theta = raw.get("theta_o", [0.0])
        theta = tuple(float(v) for v in np.atleast_1d(theta))
        if "d" in raw and int(raw["d"]) != len(theta):
            raise ConfigError(f"d={raw['d']} 与 theta_o 维度 {len(theta)} 不一致")
        return cls(theta_o=theta, a=float(raw.get("a", 1.0)), n=int(raw.get("n", 50_000)),
                   reps=int(raw.get("reps", 200)), loss=raw.get("loss", "ortho"),
                   strategy=raw.get("strategy", "reuse"), feature=raw.get("feature", "rademacher"),
                   nuisance=raw.get("nuisance", "exact"))

    def to_dict(self) -> dict:
        return {"d": self.d, "theta_o": list(self.theta_o), "a": self.a, "n": self.n, "reps": self.reps,
                "loss": self.loss, "strategy": self.strategy, "feature": self.feature,
                "nuisance": self.nuisance}


@dataclass
class EmpiricalCovariance:
    cov: np.ndarray
    estimates: np.ndarray
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"cov": self.cov.tolist(), "n_ok": int(self.estimates.shape[0]),
                "n_failed": len(self.failures), "failures": self.failures}


def exact_nuisances(truth: LinearReward, ez: EZParams) -> NuisanceSet:
    """真值 nuisance：𝔯 = r_o，t̂ = E[T | X]"""
    rdiff = (lambda X1, X2: reward_diff_batch(truth, X1, X2))
    return NuisanceSet(
        reward_nuisance=rdiff,
        time_nuisance=lambda X1, X2: np.asarray(expected_time(rdiff(X1, X2), ez)),
        choice_nuisance=lambda X1, X2: np.tanh(ez.barrier_a * rdiff(X1, X2)),
    )


def run_rep(spec: ExperimentSpec, seed: int) -> np.ndarray:
    """单次：生成数据 → 拟合 → √n(θ̂ − θ_o)"""
    theta = np.asarray(spec.theta_o, dtype=float)
    truth = LinearReward((spec.d,), theta)
    ez = EZParams(barrier_a=spec.a)
    data_seed, fit_seed = np.random.SeedSequence(seed).generate_state(2)
    data = generate(OracleSpec(truth, spec.feature, ez, spec.n, pairing="against_zero"),
                    EZSampleConfig(), int(data_seed))
    nuisance_mode = "regression" if spec.nuisance == "regression" else "plugin"
    cfg = FitConfig(loss=spec.loss, strategy=spec.strategy, nuisance=nuisance_mode, a=spec.a,
                    cap="none", seed=int(fit_seed))
    injected = exact_nuisances(truth, ez) if spec.nuisance == "exact" and spec.loss != "logloss" else None
    fit = two_stage_fit(data, cfg, nuisances=injected)
    return math.sqrt(spec.n) * (fit.model.params - theta)


def empirical_estimator_cov(spec: ExperimentSpec, seed: int) -> EmpiricalCovariance:
    """reps 次独立生成 + 拟合，返回 √n(θ̂ − θ_o) 的样本协方差"""
    if spec.reps < 50:
        logger.warning(f"reps={spec.reps} < 50，经验协方差噪声较大")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(spec.reps)]
    estimates, failures = [], []
    for rep, rep_seed in enumerate(seeds):
        try:
            estimates.append(run_rep(spec, rep_seed))
        except RtPrefError as e:
            logger.warning(f"rep {rep} 拟合失败: {e}")
            failures.append({"rep": rep, "error": type(e).__name__, "message": str(e)})
    return summarize_reps(spec, estimates, failures)


def summarize_reps(spec: ExperimentSpec, estimates: list, failures: list) -> EmpiricalCovariance:
    if len(failures) > MAX_FAIL_RATIO * spec.reps:
        raise ExperimentError(f"{len(failures)}/{spec.reps} 个 rep 失败，超过 {MAX_FAIL_RATIO:.0%}")
    if len(estimates) < 2:
        raise ExperimentError(f"成功的 rep 只有 {len(estimates)} 个，无法估计协方差")
    Z = np.asarray(estimates, dtype=float).reshape(len(estimates), spec.d)
    cov = np.atleast_2d(np.cov(Z, rowvar=False, ddof=1))
    return EmpiricalCovariance(cov=_symmetrize(cov), estimates=Z, failures=failures)
