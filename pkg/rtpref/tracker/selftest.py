"""自检：闭式矩性质网格，四种损失在两类模型上的解析梯度对照有限差分"""

import logging
import time
from types import SimpleNamespace

import numpy as np

from rtpref.core.ez_model import property_report
from rtpref.core.losses import LOSS_KINDS, CapConfig, NuisanceValues, empirical_loss
from rtpref.core.reward_models import random_init

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-5
FD_STEP = 1e-5


def _random_slice(d: int, n: int, rng: np.random.Generator):
    data = SimpleNamespace(
        x1=rng.standard_normal((n, d)),
        x2=rng.standard_normal((n, d)),
        y=rng.choice(np.array([-1, 1]), size=n),
        t_total=rng.uniform(0.1, 3.0, size=n),
    )
    nuis = NuisanceValues(
        t_hat=rng.uniform(0.3, 1.5, size=n),
        r_nuis=rng.standard_normal(n),
        y_hat=rng.uniform(-0.9, 0.9, size=n),
    )
    return data, nuis


def gradient_error(loss_kind: str, model_kind: str, rng: np.random.Generator,
                   d: int = 3, n: int = 5, a: float = 1.0) -> float:
    """解析梯度与中心差分的相对误差 ‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)"""
    dims = (d,) if model_kind == "linear" else (d, 4, 3, 1)
    model = random_init(model_kind, dims, rng, mode="truth")
    data, nuis = _random_slice(d, n, rng)
    cap = CapConfig(2.0)

    def f(params):
        return empirical_loss(loss_kind, data, model.with_params(params), nuis, cap=cap, a=a)

    _, grad = f(model.params)
    fd = np.empty_like(grad)
    for i in range(model.n_params):
        e = np.zeros(model.n_params)
        e[i] = FD_STEP
        fd[i] = (f(model.params + e)[0] - f(model.params - e)[0]) / (2 * FD_STEP)
    scale = max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(grad - fd) / scale)


def gradient_report(instances: int = 20, seed: int = 0) -> dict[str, float]:
    """每个 (损失, 模型) 组合的最大相对误差"""
    rng = np.random.default_rng(seed)
    out = {}
    for model_kind in ("linear", "mlp"):
        for loss_kind in LOSS_KINDS:
            worst = max(gradient_error(loss_kind, model_kind, rng) for _ in range(instances))
            out[f"{loss_kind}/{model_kind}"] = worst
    return out


def run_selftest(seed: int = 0) -> dict:
    start = time.monotonic()
    props = property_report()
    grads = gradient_report(seed=seed)
    checks = {**props, **{f"gradient {k}": v <= GRAD_TOL for k, v in grads.items()}}
    for name, ok in checks.items():
        if ok:
            logger.info(f"  ✓ {name}")
        else:
            logger.error(f"  ✗ {name}")
    return {
        "passed": all(checks.values()),
        "checks": checks,
        "gradient_errors": grads,
        "seconds": round(time.monotonic() - start, 3),
    }
