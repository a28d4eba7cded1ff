import numpy as np
import pytest

from rtpref.core.ez_model import EZParams, EZSampleConfig
from rtpref.core.reward_models import LinearReward
from rtpref.data.dataset import Dataset
from rtpref.data.generator import OracleSpec, generate


def linear_data(theta, n, seed, a=1.0, t_nd=0.0, feature="rademacher", pairing="against_zero"):
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    truth = LinearReward((theta.size,), theta)
    oracle = OracleSpec(truth, feature, EZParams(barrier_a=a, t_nd=t_nd), n, pairing=pairing)
    return truth, generate(oracle, EZSampleConfig(), seed)


@pytest.fixture
def make_linear_data():
    """(θ, n, seed, ...) → (真值模型, 数据集)"""
    return linear_data


@pytest.fixture
def small_dataset():
    """手写的 4 条观测，带 oracle 分数"""
    x1 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]])
    x2 = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.0, 0.0]])
    truth = LinearReward((2,), [1.0, -2.0])
    scores = np.column_stack([truth.forward(x1), truth.forward(x2)])
    return Dataset(x1, x2, y=[1, -1, 1, -1], t_total=[0.8, 1.2, 0.5, 2.0], oracle_scores=scores)
