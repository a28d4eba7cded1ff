"""实验扫描 — 按 (格点, rep) 生成数据、逐方法拟合、写出 results.csv / summary.csv

每个 (格点, rep) 是一个独立任务：同一任务内所有方法共享同一份数据集和拟合种子。
--jobs > 1 时任务在进程池中并行，结果按任务顺序收集，输出与并行度无关。
"""

import asyncio
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from rtpref.config import OUTPUT_DIR
from rtpref.core.ez_model import EZParams, EZSampleConfig
from rtpref.core.reward_models import TRUTH_HIDDEN, LinearReward, random_init
from rtpref.data.features import FEATURE_KINDS
from rtpref.data.generator import OracleSpec, generate
from rtpref.errors import ConfigError, RtPrefError
from rtpref.learn.asymptotics import cov_logloss, cov_ortho, exact_nuisances
from rtpref.learn.estimation import FitConfig, two_stage_fit
from rtpref.storage.files import FLOAT_FORMAT
from rtpref.tracker.metrics import evaluate

logger = logging.getLogger(__name__)

SWEEP_KINDS = ("linear_B_sweep", "nn_N_sweep", "barrier_a_sweep", "covariance_check", "tnd_sweep")

# 各扫描类型的格点参数名
CELL_PARAM = {
    "linear_B_sweep": "B",
    "nn_N_sweep": "N",
    "barrier_a_sweep": "a",
    "covariance_check": "theta_o",
    "tnd_sweep": "tnd_offset",
}

METRIC_COLUMNS = ("param_error", "scaled_error", "mse_raw", "mse_scale_aligned", "scale_factor",
                  "regret", "regret_mean")

# 失败比例超过该值时 sweep 以非零码退出
MAX_FAIL_RATIO = 0.20

_LINEAR_METHODS = {
    "logloss": {"loss": "logloss"},
    "nonortho": {"loss": "nonortho", "strategy": "crossfit"},
    "ortho": {"loss": "ortho", "strategy": "crossfit"},
}
_NN = {"model": "mlp", "nuisance": "regression"}
_NN_METHODS = {
    "logloss": {"loss": "logloss", **_NN},
    "nonortho": {"loss": "nonortho", "strategy": "split", **_NN},
    "ortho_split": {"loss": "ortho", "strategy": "split", **_NN},
    "ortho_reuse": {"loss": "ortho", "strategy": "reuse", **_NN},
}
_UNKNOWN_A = {"model": "mlp", "barrier": "unknown", "nuisance": "plugin"}
_BARRIER_METHODS = {
    "logloss": {"loss": "logloss", **_UNKNOWN_A},
    "nonortho": {"loss": "nonortho", "strategy": "crossfit", **_UNKNOWN_A},
    "ortho2": {"loss": "ortho2", "strategy": "crossfit", **_UNKNOWN_A},
}
_COVARIANCE_METHODS = {
    "logloss": {"loss": "logloss", "cap": "none"},
    "ortho": {"loss": "ortho", "strategy": "reuse", "cap": "none", "nuisance_source": "exact"},
}

DEFAULTS = {
    "linear_B_sweep": {"grid": [1.0, 2.0, 3.0, 4.0, 5.0], "d": 5, "n": 2000, "reps": 10,
                       "feature": "sphere", "methods": _LINEAR_METHODS},
    "nn_N_sweep": {"grid": [500, 1000, 2000, 4000], "d": 10, "n": 2000, "reps": 12,
                   "truth_networks": 3, "feature": "gaussian", "methods": _NN_METHODS},
    "barrier_a_sweep": {"grid": [round(0.5 + 0.2 * i, 2) for i in range(11)], "d": 10, "n": 2000,
                        "reps": 5, "feature": "gaussian", "truth_hidden": [32, 16],
                        "methods": _BARRIER_METHODS},
    "covariance_check": {"grid": [0.0, 2.0], "d": 1, "n": 50_000, "reps": 200, "test_n": 0,
                         "feature": "rademacher", "methods": _COVARIANCE_METHODS},
    "tnd_sweep": {"grid": [-0.2, -0.1, 0.0, 0.1, 0.2], "d": 5, "n": 2000, "reps": 10, "t_nd": 0.3,
                  "feature": "sphere", "methods": _LINEAR_METHODS},
}

_SPEC_KEYS = ("kind", "grid", "reps", "seed", "d", "n", "test_n", "feature", "a", "t_nd",
              "theta_norm", "truth_hidden", "truth_networks", "methods", "output_dir", "mc_samples")


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    grid: tuple
    reps: int
    methods: dict
    seed: int = 0
    d: int = 5
    n: int = 2000
    test_n: int = 1000
    feature: str = "sphere"
    a: float = 1.0
    t_nd: float = 0.0
    theta_norm: float = 2.0
    truth_hidden: tuple = TRUTH_HIDDEN
    truth_networks: int = 0
    output_dir: str | None = None
    mc_samples: int = 100_000

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"未知扫描类型 {self.kind!r}，可选: {', '.join(SWEEP_KINDS)}")
        if not self.grid:
            raise ConfigError("grid 不能为空")
        if self.reps < 1:
            raise ConfigError(f"reps 至少为 1，当前 {self.reps}")
        if not self.methods:
            raise ConfigError("methods 不能为空")
        if self.feature not in FEATURE_KINDS:
            raise ConfigError(f"未知特征分布 {self.feature!r}，可选: {', '.join(FEATURE_KINDS)}")
        if self.kind == "covariance_check" and self.d != 1:
            raise ConfigError("covariance_check 只支持 d = 1")
        if self.truth_networks < 0:
            raise ConfigError(f"truth_networks 不能为负，当前 {self.truth_networks}")
        if self.kind == "covariance_check" and self.truth_networks:
            raise ConfigError("covariance_check 的真值固定，不支持 truth_networks")
        if self.kind == "tnd_sweep" and min(self.grid) + self.t_nd < 0:
            raise ConfigError(f"tnd_offset 最小值 {min(self.grid)} 使假定 t_nd 为负（生成 t_nd={self.t_nd}）")
        for name, method in self.methods.items():
            method_fit_config(method, a=self.a, t_nd=self.t_nd, seed=0)

    @property
    def cell_param(self) -> str:
        return CELL_PARAM[self.kind]

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepSpec":
        unknown = sorted(set(raw) - set(_SPEC_KEYS))
        if unknown:
            raise ConfigError(f"扫描配置未知字段: {', '.join(unknown)}，可选: {', '.join(_SPEC_KEYS)}")
        kind = raw.get("kind")
        if kind not in SWEEP_KINDS:
            raise ConfigError(f"未知扫描类型 {kind!r}，可选: {', '.join(SWEEP_KINDS)}")
        base = {**DEFAULTS[kind], **raw}
        methods = _resolve_methods(raw.get("methods"), DEFAULTS[kind]["methods"])
        try:
            return cls(
                kind=kind, grid=tuple(float(v) for v in base["grid"]), reps=int(base["reps"]),
                methods=methods, seed=int(base.get("seed", 0)), d=int(base.get("d", 5)),
                n=int(base.get("n", 2000)), test_n=int(base.get("test_n", 1000)),
                feature=base.get("feature", "sphere"), a=float(base.get("a", 1.0)),
                t_nd=float(base.get("t_nd", 0.0)), theta_norm=float(base.get("theta_norm", 2.0)),
                truth_hidden=tuple(int(h) for h in base.get("truth_hidden", TRUTH_HIDDEN)),
                truth_networks=int(base.get("truth_networks", 0)),
                output_dir=base.get("output_dir"), mc_samples=int(base.get("mc_samples", 100_000)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"扫描配置字段类型错误: {e}") from e

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "grid": list(self.grid), "reps": self.reps, "seed": self.seed,
            "d": self.d, "n": self.n, "test_n": self.test_n, "feature": self.feature, "a": self.a,
            "t_nd": self.t_nd, "theta_norm": self.theta_norm, "truth_hidden": list(self.truth_hidden),
            "truth_networks": self.truth_networks,
            "methods": self.methods, "output_dir": self.output_dir, "mc_samples": self.mc_samples,
        }


def _resolve_methods(raw, defaults: dict) -> dict:
    """methods 可为名字列表（取默认配置）或 {名字: 覆盖字段}"""
    if raw is None:
        return {k: dict(v) for k, v in defaults.items()}
    if isinstance(raw, list):
        missing = [m for m in raw if m not in defaults]
        if missing:
            raise ConfigError(f"未知方法 {', '.join(missing)}，可选: {', '.join(defaults)}；或用字典给出完整配置")
        return {m: dict(defaults[m]) for m in raw}
    if isinstance(raw, dict):
        return {name: {**defaults.get(name, {}), **(over or {})} for name, over in raw.items()}
    raise ConfigError("methods 必须是列表或字典")


def method_fit_config(method: dict, a: float, t_nd: float, seed: int) -> FitConfig:
    raw = {k: v for k, v in method.items() if k != "nuisance_source"}
    raw.setdefault("a", a)
    raw.setdefault("t_nd", t_nd)
    raw["seed"] = seed
    return FitConfig.from_dict(raw)


@dataclass(frozen=True)
class SweepTask:
    cell: int
    value: float
    rep: int
    seed: int
    truth_id: int = 0
    # truth_networks > 0 时同一网络的各 rep 共用真值与数据种子，只有拟合种子不同
    data_seed: int | None = None


def plan_tasks(spec: SweepSpec) -> list[SweepTask]:
    """每个格点一条 SeedSequence 子流，再按 rep 细分"""
    tasks = []
    cells = np.random.SeedSequence(spec.seed).spawn(len(spec.grid))
    for ci, (value, cell_ss) in enumerate(zip(spec.grid, cells)):
        rep_streams = cell_ss.spawn(spec.reps)
        nets = [int(ss.generate_state(1)[0]) for ss in cell_ss.spawn(spec.truth_networks)]
        for rep, rep_ss in enumerate(rep_streams):
            truth_id = rep % spec.truth_networks if nets else rep
            tasks.append(SweepTask(cell=ci, value=float(value), rep=rep, seed=int(rep_ss.generate_state(1)[0]),
                                   truth_id=truth_id, data_seed=nets[truth_id] if nets else None))
    return tasks


def _truth_for(spec: SweepSpec, value: float, rng: np.random.Generator):
    if spec.kind == "covariance_check":
        return LinearReward((1,), [value])
    if spec.kind in ("linear_B_sweep", "tnd_sweep"):
        norm = value if spec.kind == "linear_B_sweep" else spec.theta_norm
        direction = rng.standard_normal(spec.d)
        return LinearReward((spec.d,), norm * direction / np.linalg.norm(direction))
    return random_init("mlp", (spec.d, *spec.truth_hidden, 1), rng, mode="truth")


def run_task(spec: SweepSpec, task: SweepTask) -> list[dict]:
    """一个 (格点, rep)：生成训练/测试集，逐方法拟合并评估；失败写成 status=failed 的行"""
    truth_seed, data_seed, test_seed, fit_seed = np.random.SeedSequence(task.seed).generate_state(4)
    if task.data_seed is not None:
        truth_seed, data_seed, test_seed = np.random.SeedSequence(task.data_seed).generate_state(3)
    base = {"kind": spec.kind, "cell": task.cell, spec.cell_param: task.value, "rep": task.rep,
            "truth_id": task.truth_id, "seed": task.seed}
    a = task.value if spec.kind == "barrier_a_sweep" else spec.a
    n = int(task.value) if spec.kind == "nn_N_sweep" else spec.n
    assumed_t_nd = spec.t_nd + task.value if spec.kind == "tnd_sweep" else spec.t_nd
    pairing = "against_zero" if spec.kind == "covariance_check" else "independent"

    try:
        truth = _truth_for(spec, task.value, np.random.default_rng(truth_seed))
        ez = EZParams(barrier_a=a, t_nd=spec.t_nd)
        train = generate(OracleSpec(truth, spec.feature, ez, n, pairing=pairing), EZSampleConfig(), int(data_seed))
        test = None
        if spec.test_n > 0:
            test = generate(OracleSpec(truth, spec.feature, ez, spec.test_n, pairing=pairing),
                            EZSampleConfig(), int(test_seed))
    except RtPrefError as e:
        logger.error(f"任务 cell={task.cell} rep={task.rep} 数据生成失败: {e}", exc_info=True)
        return [{**base, "method": m, "status": "failed", "error": f"{type(e).__name__}: {e}"}
                for m in spec.methods]

    rows = []
    for name, method in spec.methods.items():
        row = {**base, "method": name, "status": "ok", "error": ""}
        try:
            cfg = method_fit_config(method, a=a, t_nd=assumed_t_nd, seed=int(fit_seed))
            injected = None
            if method.get("nuisance_source") == "exact" and cfg.loss != "logloss":
                injected = exact_nuisances(truth, ez)
            fit = two_stage_fit(train, cfg, nuisances=injected)
            if isinstance(truth, LinearReward) and cfg.model == "linear":
                diff = fit.model.params - truth.params
                row["param_error"] = float(np.linalg.norm(diff))
                if spec.kind == "covariance_check":
                    row["scaled_error"] = float(math.sqrt(n) * diff[0])
            if test is not None:
                report = evaluate(fit.model, test)
                row.update({k: getattr(report, k) for k in
                            ("mse_raw", "mse_scale_aligned", "scale_factor", "regret", "regret_mean")})
        except RtPrefError as e:
            logger.warning(f"方法 {name} 失败 cell={task.cell} rep={task.rep}: {e}")
            row.update(status="failed", error=f"{type(e).__name__}: {e}")
        rows.append(row)
    return rows


# 每个方法的连续失败计数（达到阈值时 ERROR 日志）
_fail_counts: dict[str, int] = {}
_FAIL_THRESHOLD = 3


def _reset_fail(key: str):
    _fail_counts[key] = 0


def _inc_fail(key: str) -> int:
    _fail_counts[key] = _fail_counts.get(key, 0) + 1
    return _fail_counts[key]


def _track_failures(rows: list[dict]):
    for row in rows:
        key = row["method"]
        if row["status"] == "ok":
            _reset_fail(key)
            continue
        count = _inc_fail(key)
        if count >= _FAIL_THRESHOLD:
            logger.error(f"方法 {key} 连续失败 {count} 次，最近错误: {row['error']}")


async def run_tasks(spec: SweepSpec, tasks: list[SweepTask], jobs: int = 1) -> list[list[dict]]:
    """jobs = 1 时在本进程顺序执行；否则进程池并行，按任务顺序返回"""
    _fail_counts.clear()
    if jobs <= 1:
        results = []
        for i, task in enumerate(tasks, 1):
            rows = run_task(spec, task)
            _track_failures(rows)
            results.append(rows)
            logger.info(f"[{i}/{len(tasks)}] {spec.cell_param}={task.value:g} rep={task.rep} 完成")
        return results

    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [loop.run_in_executor(pool, run_task, spec, task) for task in tasks]
        results = await asyncio.gather(*futures)
    for rows in results:
        _track_failures(rows)
    return list(results)


def results_frame(spec: SweepSpec, results: list[list[dict]]) -> pd.DataFrame:
    columns = ["kind", "cell", spec.cell_param, "method", "rep", "truth_id", "seed", "status", "error",
               *METRIC_COLUMNS]
    frame = pd.DataFrame([row for rows in results for row in rows])
    for col in columns:
        if col not in frame.columns:
            frame[col] = np.nan
    return frame[columns]


def summarize(results: pd.DataFrame, cell_param: str) -> pd.DataFrame:
    """长表：(格点参数, method, metric) → count, mean, median, se；只统计 status=ok 的行"""
    ok = results[results["status"] == "ok"]
    method_order = list(dict.fromkeys(results["method"]))
    records = []
    for (cell, value, method), group in ok.groupby(["cell", cell_param, "method"], sort=False):
        for metric in METRIC_COLUMNS:
            vals = group[metric].dropna().to_numpy(dtype=float)
            if vals.size == 0:
                continue
            se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
            records.append({"cell": cell, cell_param: value, "method": method, "metric": metric,
                            "count": int(vals.size), "mean": float(np.mean(vals)),
                            "median": float(np.median(vals)), "se": se})
    summary = pd.DataFrame(records, columns=["cell", cell_param, "method", "metric", "count", "mean", "median", "se"])
    if not summary.empty:
        summary["_m"] = summary["method"].map({m: i for i, m in enumerate(method_order)})
        summary["_k"] = summary["metric"].map({m: i for i, m in enumerate(METRIC_COLUMNS)})
        summary = summary.sort_values(["cell", "_m", "_k"], kind="stable").drop(columns=["_m", "_k"])
    return summary.reset_index(drop=True)


def covariance_table(spec: SweepSpec, results: pd.DataFrame) -> pd.DataFrame:
    """covariance_check：每个 (θ_o, 方法) 的理论方差与 √n(θ̂ − θ_o) 的样本方差"""
    records = []
    ok = results[results["status"] == "ok"]
    for ci, value in enumerate(spec.grid):
        mc_rng_seed = int(np.random.SeedSequence([spec.seed, ci]).generate_state(1)[0])
        for method in spec.methods:
            loss = spec.methods[method].get("loss")
            fn = cov_logloss if loss == "logloss" else cov_ortho
            theory, _ = fn([value], spec.a, spec.feature, spec.mc_samples, np.random.default_rng(mc_rng_seed))
            vals = ok[(ok["cell"] == ci) & (ok["method"] == method)]["scaled_error"].dropna().to_numpy(dtype=float)
            empirical = float(np.var(vals, ddof=1)) if vals.size > 1 else float("nan")
            records.append({"cell": ci, "theta_o": value, "method": method, "theoretical": float(theory[0, 0]),
                            "empirical": empirical, "ratio": empirical / float(theory[0, 0]),
                            "reps_ok": int(vals.size)})
    return pd.DataFrame(records)


@dataclass
class SweepOutcome:
    results: pd.DataFrame
    summary: pd.DataFrame
    failed: int
    total: int
    paths: dict = field(default_factory=dict)
    covariance: pd.DataFrame | None = None

    @property
    def fail_ratio(self) -> float:
        return self.failed / self.total if self.total else 0.0

    @property
    def too_many_failures(self) -> bool:
        return self.fail_ratio > MAX_FAIL_RATIO


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def output_dir_for(spec: SweepSpec, override=None) -> Path:
    if override is not None:
        return Path(override)
    if spec.output_dir:
        return Path(spec.output_dir)
    return OUTPUT_DIR / spec.kind


async def run_sweep(spec: SweepSpec, jobs: int = 1, out_dir=None) -> SweepOutcome:
    tasks = plan_tasks(spec)
    logger.info(f"=== 扫描 {spec.kind} 开始: {len(spec.grid)} 个格点 × {spec.reps} reps × "
                f"{len(spec.methods)} 方法, jobs={jobs} ===")
    results = results_frame(spec, await run_tasks(spec, tasks, jobs))
    summary = summarize(results, spec.cell_param)
    failed = int((results["status"] != "ok").sum())
    outcome = SweepOutcome(results=results, summary=summary, failed=failed, total=len(results))

    out = output_dir_for(spec, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcome.paths["results"] = out / "results.csv"
    outcome.paths["summary"] = out / "summary.csv"
    _write_csv(results, outcome.paths["results"])
    _write_csv(summary, outcome.paths["summary"])
    if spec.kind == "covariance_check":
        outcome.covariance = covariance_table(spec, results)
        outcome.paths["covariance"] = out / "covariance.csv"
        _write_csv(outcome.covariance, outcome.paths["covariance"])

    level = logging.ERROR if outcome.too_many_failures else logging.INFO
    logger.log(level, f"扫描结束: {len(results)} 行, 失败 {failed} ({outcome.fail_ratio:.1%}), 输出 {out}")
    return outcome
