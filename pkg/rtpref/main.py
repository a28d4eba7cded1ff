"""rtpref 主入口 — simulate / fit / eval / sweep / asymptotics / selftest

退出码：0 成功，2 用法/配置错误，3 拟合或实验失败，4 数据错误。
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rtpref.config import DEFAULT_BARRIER, DEFAULT_JOBS, DEFAULT_T_ND, LOG_LEVEL, OUTPUT_DIR, resolve_seed
from rtpref.core.ez_model import EZParams, EZSampleConfig
from rtpref.core.reward_models import TRUTH_HIDDEN, LinearReward, random_init
from rtpref.data.generator import OracleSpec, generate, ingest_embeddings
from rtpref.errors import ConfigError, ExperimentError, RtPrefError
from rtpref.learn.asymptotics import ExperimentSpec, covariance_report, empirical_estimator_cov
from rtpref.learn.estimation import FitConfig, two_stage_fit
from rtpref.scheduler.sweeps import SweepSpec, run_sweep
from rtpref.storage.files import load_dataset, load_json, load_model, save_dataset, save_json, save_model
from rtpref.tracker.metrics import evaluate
from rtpref.tracker.selftest import run_selftest

# 日志配置
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger("rtpref")

_SIMULATE_KEYS = ("mode", "d", "n", "truth", "feature", "a", "t_nd", "pairing", "seed", "sampler",
                  "output", "path", "score_column", "n_pairs")


def _truth_model(raw: dict, d: int, rng: np.random.Generator):
    """truth: {"kind": "linear", "theta": [...]} | {"kind": "linear", "norm": B} | {"kind": "mlp", "hidden": [...]}"""
    kind = raw.get("kind", "linear")
    if kind == "linear":
        if "theta" in raw:
            theta = np.asarray(raw["theta"], dtype=float)
            if theta.shape != (d,):
                raise ConfigError(f"truth.theta 维度 {theta.shape} 与 d={d} 不一致")
            return LinearReward((d,), theta)
        direction = rng.standard_normal(d)
        return LinearReward((d,), float(raw.get("norm", 1.0)) * direction / np.linalg.norm(direction))
    if kind == "mlp":
        return random_init("mlp", (d, *raw.get("hidden", TRUTH_HIDDEN), 1), rng, mode="truth")
    raise ConfigError(f"truth.kind={kind!r} 非法，可选: linear, mlp")


def cmd_simulate(args) -> int:
    raw = load_json(args.config)
    unknown = sorted(set(raw) - set(_SIMULATE_KEYS))
    if unknown:
        raise ConfigError(f"simulate 配置未知字段: {', '.join(unknown)}，可选: {', '.join(_SIMULATE_KEYS)}")
    seed = resolve_seed(raw.get("seed"))
    ez = EZParams(barrier_a=float(raw.get("a", DEFAULT_BARRIER)), t_nd=float(raw.get("t_nd", DEFAULT_T_ND)))
    sampler = EZSampleConfig.from_dict(raw.get("sampler"))
    mode = raw.get("mode", "generate")

    if mode == "generate":
        d = int(raw.get("d", 2))
        truth_seed, data_seed = np.random.SeedSequence(seed).generate_state(2)
        truth = _truth_model(raw.get("truth", {}), d, np.random.default_rng(truth_seed))
        oracle = OracleSpec(truth, raw.get("feature", "sphere"), ez, int(raw.get("n", 1000)),
                            pairing=raw.get("pairing", "independent"))
        dataset = generate(oracle, sampler, int(data_seed))
    elif mode == "embeddings":
        if "path" not in raw or "score_column" not in raw:
            raise ConfigError("embeddings 模式需要 path 与 score_column")
        n_pairs = raw.get("n_pairs")
        dataset = ingest_embeddings(raw["path"], raw["score_column"], ez, sampler, seed,
                                    n_pairs=None if n_pairs is None else int(n_pairs))
    else:
        raise ConfigError(f"mode={mode!r} 非法，可选: generate, embeddings")

    out = Path(args.out or raw.get("output") or OUTPUT_DIR / "dataset.csv")
    digest = save_dataset(dataset, out)
    print(digest)
    return 0


def cmd_fit(args) -> int:
    raw = load_json(args.config)
    raw["seed"] = resolve_seed(raw.get("seed"))
    cfg = FitConfig.from_dict(raw)
    dataset = load_dataset(args.data)
    result = two_stage_fit(dataset, cfg)

    out_dir = OUTPUT_DIR
    model_path = Path(args.model_out or out_dir / "model.json")
    report_path = Path(args.report_out or out_dir / "fit_report.json")
    save_model(result.model, model_path)
    save_json(result.report.to_dict(), report_path)
    logger.info(f"模型: {model_path}，报告: {report_path}")
    return 0


def _theta_from_provenance(dataset, model):
    """合成线性数据集的来源里带有 θ_o 时返回它"""
    truth = dataset.provenance.get("generator", {}).get("spec", {}).get("truth", {})
    if truth.get("kind") == "linear" and isinstance(model, LinearReward) and len(truth["params"]) == model.n_params:
        return truth["params"]
    return None


def cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data, require_oracle=True)
    report = evaluate(model, dataset, theta_o=_theta_from_provenance(dataset, model))
    payload = report.to_dict()
    if args.out:
        save_json(payload, args.out)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


async def cmd_sweep(args) -> int:
    raw = load_json(args.config)
    raw["seed"] = resolve_seed(raw.get("seed"))
    spec = SweepSpec.from_dict(raw)
    outcome = await run_sweep(spec, jobs=args.jobs, out_dir=args.out)
    if outcome.too_many_failures:
        raise ExperimentError(f"扫描失败比例 {outcome.fail_ratio:.1%} 超过 20%（{outcome.failed}/{outcome.total}）")
    for name, path in outcome.paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_asymptotics(args) -> int:
    """配置: theta_o, a, feature, mc_samples, seed, 可选 empirical: {n, reps, loss, strategy, nuisance}"""
    raw = load_json(args.config)
    seed = resolve_seed(raw.get("seed"))
    theta = np.atleast_1d(np.asarray(raw.get("theta_o", [0.0]), dtype=float))
    report = covariance_report(theta, float(raw.get("a", 1.0)), raw.get("feature", "rademacher"),
                               int(raw.get("mc_samples", 100_000)), seed)
    payload = report.to_dict()
    if "empirical" in raw:
        spec = ExperimentSpec.from_dict({"theta_o": theta.tolist(), "a": report.a,
                                         "feature": report.feature, **raw["empirical"]})
        emp = empirical_estimator_cov(spec, seed)
        payload["empirical"] = {"spec": spec.to_dict(), **emp.to_dict()}
    out = Path(args.out or OUTPUT_DIR / "covariance.json")
    save_json(payload, out)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_selftest(args) -> int:
    result = run_selftest()
    print(json.dumps(result, indent=2, sort_keys=True))
    if not result["passed"]:
        logger.error("自检未通过")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtpref", description="反应时增强的偏好学习")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="生成或摄入数据集，输出 CSV + sidecar")
    p.add_argument("config")
    p.add_argument("--out")

    p = sub.add_parser("fit", help="两阶段拟合")
    p.add_argument("data")
    p.add_argument("config")
    p.add_argument("--model-out")
    p.add_argument("--report-out")

    p = sub.add_parser("eval", help="评估模型（需要 oracle sidecar）")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--out")

    p = sub.add_parser("sweep", help="实验扫描")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    p.add_argument("--out")

    p = sub.add_parser("asymptotics", help="渐近协方差")
    p.add_argument("config")
    p.add_argument("--out")

    sub.add_parser("selftest", help="闭式性质 + 梯度自检")
    return parser


async def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            return await cmd_sweep(args)
        handler = {
            "simulate": cmd_simulate, "fit": cmd_fit, "eval": cmd_eval,
            "asymptotics": cmd_asymptotics, "selftest": cmd_selftest,
        }[args.command]
        return handler(args)
    except RtPrefError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


def run():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    run()
