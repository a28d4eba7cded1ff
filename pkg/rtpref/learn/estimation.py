"""两阶段估计 — nuisance 估计 + 第二阶段损失最小化

样本处理三种方式：
  split     前 ⌈frac·n⌉ 个打乱样本拟合 nuisance，剩余样本做第二阶段
  crossfit  K 折交叉拟合，每折 nuisance 只用其余折训练，第二阶段对全部样本联合优化
  reuse     nuisance 和第二阶段都用全部样本
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import svdvals

from rtpref.core.losses import (
    CapConfig, NuisanceSet, NuisanceValues, check_loss_kind, decision_times, empirical_loss,
)
from rtpref.core.reward_models import FIT_HIDDEN, MODEL_KINDS, RewardModel, random_init
from rtpref.data.folds import FoldAssignment, fold_assign, split_indices
from rtpref.errors import ConfigError
from rtpref.learn import nuisance as nz
from rtpref.learn.optimizer import OptimizerConfig, run_optimizer

logger = logging.getLogger(__name__)

STRATEGIES = ("split", "crossfit", "reuse")
NUISANCE_MODES = ("plugin", "regression")
BARRIER_MODES = ("known", "unknown")

# Gram 矩阵条件数超过该值视为秩亏
RANK_COND_LIMIT = 1e10

_FIT_KEYS = ("loss", "strategy", "folds", "split_frac", "nuisance", "cap", "barrier", "a",
             "t_nd", "optimizer", "seed", "model", "hidden")


def _choice(value, valid, key):
    if value not in valid:
        raise ConfigError(f"{key}={value!r} 非法，可选: {', '.join(valid)}")
    return value


@dataclass(frozen=True)
class FitConfig:
    loss: str = "ortho"
    strategy: str = "crossfit"
    folds: int = 5
    split_frac: float = 0.5
    nuisance: str = "plugin"
    cap: object = "default"  # "default" | "none" | 正数
    barrier: str = "known"
    a: float = 1.0
    t_nd: float = 0.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    model: str = "linear"
    hidden: tuple = FIT_HIDDEN

    def __post_init__(self):
        check_loss_kind(self.loss)
        _choice(self.strategy, STRATEGIES, "strategy")
        _choice(self.nuisance, NUISANCE_MODES, "nuisance")
        _choice(self.barrier, BARRIER_MODES, "barrier")
        _choice(self.model, MODEL_KINDS, "model")
        if self.folds < 2:
            raise ConfigError(f"folds 至少为 2，当前: {self.folds}")
        if not (0 < self.split_frac < 1):
            raise ConfigError(f"split_frac 必须在 (0, 1)，当前: {self.split_frac}")
        if not (math.isfinite(self.a) and self.a > 0):
            raise ConfigError(f"a 必须为正数，当前: {self.a}")
        if not (math.isfinite(self.t_nd) and self.t_nd >= 0):
            raise ConfigError(f"t_nd 必须非负，当前: {self.t_nd}")
        if self.barrier == "unknown" and self.loss == "ortho":
            raise ConfigError("未知边界下 ortho 损失不可辨识，请改用 ortho2")
        CapConfig.parse(self.cap, self.a)

    @property
    def a_internal(self) -> float:
        return self.a if self.barrier == "known" else 1.0

    def to_dict(self) -> dict:
        return {
            "loss": self.loss, "strategy": self.strategy, "folds": self.folds,
            "split_frac": self.split_frac, "nuisance": self.nuisance, "cap": self.cap,
            "barrier": self.barrier, "a": self.a, "t_nd": self.t_nd,
            "optimizer": self.optimizer.to_dict(), "seed": self.seed,
            "model": self.model, "hidden": list(self.hidden),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FitConfig":
        unknown = sorted(set(raw) - set(_FIT_KEYS))
        if unknown:
            raise ConfigError(f"拟合配置未知字段: {', '.join(unknown)}，可选: {', '.join(_FIT_KEYS)}")
        model = raw.get("model", "linear")
        default_nuisance = "regression" if model == "mlp" else "plugin"
        try:
            return cls(
                loss=raw.get("loss", "ortho"),
                strategy=raw.get("strategy", "crossfit"),
                folds=int(raw.get("folds", 5)),
                split_frac=float(raw.get("split_frac", 0.5)),
                nuisance=raw.get("nuisance", default_nuisance),
                cap=raw.get("cap", "default"),
                barrier=raw.get("barrier", "known"),
                a=float(raw.get("a", 1.0)),
                t_nd=float(raw.get("t_nd", 0.0)),
                optimizer=OptimizerConfig.from_dict(raw.get("optimizer"), kind=model),
                seed=int(raw.get("seed", 0)),
                model=model,
                hidden=tuple(int(h) for h in raw.get("hidden", FIT_HIDDEN)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"拟合配置字段类型错误: {e}") from e


@dataclass
class FitReport:
    """拟合报告；to_dict 的内容在相同输入下完全一致"""

    config: dict
    n: int
    n_second_stage: int
    cap: object
    a_internal: float
    final_loss: float
    grad_norm: float
    epochs: int
    stop_reason: str
    nuisance_source: str
    nuisance_val_losses: dict = field(default_factory=dict)
    barrier_sq_estimate: float | None = None
    folds: dict | None = None
    gram_condition: float | str = 1.0
    rank_deficient: bool = False

    def to_dict(self) -> dict:
        return {
            "strategy": self.config["strategy"],
            "loss": self.config["loss"],
            "config": self.config,
            "n": self.n,
            "n_second_stage": self.n_second_stage,
            "cap": self.cap,
            "a_internal": self.a_internal,
            "final_loss": self.final_loss,
            "grad_norm": self.grad_norm,
            "epochs": self.epochs,
            "stop_reason": self.stop_reason,
            "nuisance_source": self.nuisance_source,
            "nuisance_val_losses": self.nuisance_val_losses,
            "barrier_sq_estimate": self.barrier_sq_estimate,
            "folds": self.folds,
            "gram_condition": self.gram_condition,
            "rank_deficient": self.rank_deficient,
        }


@dataclass
class FitResult:
    model: RewardModel
    report: FitReport
    fold_assignment: FoldAssignment | None = None
    nuisance_values: NuisanceValues | None = None
    history: list = field(default_factory=list)


def resolve_cap(cfg: FitConfig, dataset) -> CapConfig:
    """未知边界时 "default" 取 50·mean(决策时间)（E[T] ≤ a²）"""
    if cfg.cap == "default" and cfg.barrier == "unknown":
        t = decision_times(dataset.t_total, cfg.t_nd, CapConfig())
        mean_t = float(np.mean(t))
        return CapConfig(50.0 * mean_t) if mean_t > 0 else CapConfig()
    return CapConfig.parse(cfg.cap, cfg.a)


def gram_condition(dataset) -> float:
    """配对差 X1 − X2 的 Gram 矩阵条件数"""
    D = dataset.x1 - dataset.x2
    s = svdvals(D.T @ D / len(dataset))
    if s[-1] <= 0:
        return math.inf
    return float(s[0] / s[-1])


def default_template(cfg: FitConfig, d: int, rng: np.random.Generator) -> RewardModel:
    dims = (d,) if cfg.model == "linear" else (d, *cfg.hidden, 1)
    return random_init(cfg.model, dims, rng, mode="fit")


def _needs_logistic(cfg: FitConfig) -> bool:
    return not (cfg.loss == "nonortho" and cfg.nuisance == "regression")


def _fit_nuisances(dataset, train_idx, cfg: FitConfig, template: RewardModel, cap: CapConfig,
                   rng: np.random.Generator) -> tuple[NuisanceSet, dict, float | None]:
    """在 train_idx 上拟合本损失需要的 nuisance"""
    a_int = cfg.a_internal
    reward_model = None
    info = {}
    scale = None
    if _needs_logistic(cfg):
        reward_model, res = nz.fit_logistic(dataset, template, a_int, cfg.optimizer, rng, idx=train_idx)
        info["logistic"] = res
        info["reward_model"] = reward_model

    if cfg.nuisance == "regression":
        time_tmpl = nz.time_regression_template(dataset.dim, rng, hidden=cfg.hidden)
        time_fn, res = nz.fit_time_regression(dataset, time_tmpl, cap, cfg.t_nd,
                                              OptimizerConfig.for_model("mlp"), rng, idx=train_idx)
        info["time"] = res
    elif cfg.barrier == "unknown":
        scale = nz.estimate_barrier_sq(reward_model, dataset, cap, cfg.t_nd, idx=train_idx)
        time_fn = nz.plugin_time_nuisance(reward_model, 1.0, scale=scale)
    else:
        time_fn = nz.plugin_time_nuisance(reward_model, cfg.a)

    nset = NuisanceSet(
        reward_nuisance=nz.reward_nuisance(reward_model) if cfg.loss == "ortho" else None,
        time_nuisance=time_fn,
        choice_nuisance=nz.plugin_choice_nuisance(reward_model, a_int) if cfg.loss == "ortho2" else None,
    )
    return nset, info, scale


def _index_digest(idx: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()[:16]


def _logistic_val(dataset, eval_idx, model: RewardModel, a_int: float) -> float:
    loss, _ = empirical_loss("logloss", dataset, model, a=a_int, idx=eval_idx)
    return loss


def two_stage_fit(dataset, cfg: FitConfig, template: RewardModel | None = None,
                  nuisances: NuisanceSet | None = None) -> FitResult:
    """两阶段拟合；nuisances 不为 None 时跳过第一阶段，直接使用给定的 nuisance 函数"""
    n = len(dataset)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.folds + 3)
    init_rng, stage2_rng = np.random.default_rng(streams[0]), np.random.default_rng(streams[1])
    nuis_rngs = [np.random.default_rng(s) for s in streams[2:]]

    if template is None:
        template = default_template(cfg, dataset.dim, init_rng)
    if template.input_dim != dataset.dim:
        raise ConfigError(f"模型输入维度 {template.input_dim} 与数据维度 {dataset.dim} 不一致")
    cap = resolve_cap(cfg, dataset)
    a_int = cfg.a_internal
    if cfg.t_nd > 0 and np.any(dataset.t_total <= cfg.t_nd):
        logger.warning(f"有 {int(np.sum(dataset.t_total <= cfg.t_nd))} 条观测 t_total ≤ t_nd={cfg.t_nd}，决策时间截为 0")

    cond = gram_condition(dataset)
    rank_deficient = not (cond <= RANK_COND_LIMIT)
    if rank_deficient:
        logger.warning(f"配对差 Gram 矩阵条件数 {cond:.3g} > {RANK_COND_LIMIT:g}，参数不可完全辨识")

    val_losses: dict = {}
    scale = None
    folds_info = None
    assignment = None
    values = None

    if cfg.loss == "logloss":
        source = "none"
        model, result = nz.fit_logistic(dataset, template, a_int, cfg.optimizer, stage2_rng)
        stage2_n = n
    else:
        if nuisances is not None:
            source = "injected"
            stage2_idx = np.arange(n)
            if cfg.strategy == "split":
                _, stage2_idx = split_indices(n, cfg.split_frac, cfg.seed)
            values = nuisances.evaluate(dataset.x1[stage2_idx], dataset.x2[stage2_idx])
        elif cfg.strategy == "split":
            source = "fitted"
            if n < 20:
                raise ConfigError(f"split 需要至少 20 条观测，当前 {n}")
            first, stage2_idx = split_indices(n, cfg.split_frac, cfg.seed)
            nset, info, scale = _fit_nuisances(dataset, first, cfg, template, cap, nuis_rngs[0])
            values = nset.evaluate(dataset.x1[stage2_idx], dataset.x2[stage2_idx])
            val_losses = _eval_losses(dataset, stage2_idx, nset, info, cfg, cap)
            folds_info = {"split_sizes": [int(first.size), int(stage2_idx.size)],
                          "nuisance_digest": _index_digest(first),
                          "second_stage_digest": _index_digest(stage2_idx),
                          "disjoint": bool(np.intersect1d(first, stage2_idx).size == 0)}
        elif cfg.strategy == "crossfit":
            source = "fitted"
            if cfg.folds > n:
                raise ConfigError(f"折数 K={cfg.folds} 大于样本数 n={n}")
            if n < 10 * cfg.folds:
                logger.warning(f"crossfit 建议 n ≥ 10·K = {10 * cfg.folds}，当前 n={n}")
            assignment = fold_assign(n, cfg.folds, cfg.seed)
            stage2_idx = np.arange(n)
            parts = {"t_hat": np.empty(n), "r_nuis": np.empty(n), "y_hat": np.empty(n)}
            present = set()
            per_fold = []
            scales = []
            for k in range(cfg.folds):
                train, held = assignment.train_indices(k), assignment.indices(k)
                nset, info, s = _fit_nuisances(dataset, train, cfg, template, cap, nuis_rngs[k % len(nuis_rngs)])
                fold_vals = nset.evaluate(dataset.x1[held], dataset.x2[held])
                for name in parts:
                    v = getattr(fold_vals, name)
                    if v is not None:
                        parts[name][held] = v
                        present.add(name)
                if s is not None:
                    scales.append(s)
                losses = _eval_losses(dataset, held, nset, info, cfg, cap)
                per_fold.append({
                    "fold": k, "train_size": int(train.size), "eval_size": int(held.size),
                    "train_digest": _index_digest(train), "eval_digest": _index_digest(held),
                    "disjoint": bool(np.intersect1d(train, held).size == 0),
                    "val_losses": losses,
                })
            values = NuisanceValues(**{k: (v if k in present else None) for k, v in parts.items()})
            val_losses = {
                key: float(np.average([f["val_losses"][key] for f in per_fold],
                                      weights=[f["eval_size"] for f in per_fold]))
                for key in per_fold[0]["val_losses"]
            }
            if scales:
                scale = float(np.mean(scales))
            folds_info = {"k": cfg.folds, "sizes": assignment.sizes(),
                          "assignment_digest": _index_digest(assignment.folds),
                          "per_fold": per_fold}
        else:
            source = "fitted"
            stage2_idx = np.arange(n)
            nset, info, scale = _fit_nuisances(dataset, stage2_idx, cfg, template, cap, nuis_rngs[0])
            values = nset.evaluate(dataset.x1, dataset.x2)
            val_losses = _eval_losses(dataset, stage2_idx, nset, info, cfg, cap)

        stage2 = dataset.subset(stage2_idx)
        stage2_n = len(stage2)

        def objective(params, idx):
            return empirical_loss(cfg.loss, stage2, template.with_params(params), values,
                                  cap=cap, a=a_int, t_nd=cfg.t_nd, idx=idx)

        result = run_optimizer(objective, template.params, stage2_n, cfg.optimizer, stage2_rng)
        model = template.with_params(result.params)

    report = FitReport(
        config=cfg.to_dict(), n=n, n_second_stage=stage2_n, cap=cap.to_value(), a_internal=a_int,
        final_loss=float(result.loss), grad_norm=float(result.grad_norm), epochs=int(result.epochs),
        stop_reason=result.stop_reason, nuisance_source=source, nuisance_val_losses=val_losses,
        barrier_sq_estimate=scale, folds=folds_info,
        gram_condition=cond if math.isfinite(cond) else "inf", rank_deficient=rank_deficient,
    )
    logger.info(
        f"拟合完成 [{cfg.loss}/{cfg.strategy}] n={n} loss={result.loss:.6g} "
        f"|grad|={result.grad_norm:.3g} epochs={result.epochs}"
    )
    return FitResult(model=model, report=report, fold_assignment=assignment, nuisance_values=values,
                     history=list(result.history))


def _eval_losses(dataset, eval_idx, nset: NuisanceSet, info: dict, cfg: FitConfig, cap: CapConfig) -> dict:
    """nuisance 在评估样本上的损失（split/crossfit 为样本外）"""
    out = {"time_mse": nz.time_mse(nset.time_nuisance, dataset, cap, cfg.t_nd, idx=eval_idx)}
    if "reward_model" in info:
        out["logloss"] = _logistic_val(dataset, eval_idx, info["reward_model"], cfg.a_internal)
    return out
