import numpy as np
import pytest

from rtpref.core.reward_models import (
    LinearReward, MlpReward, QueryPair, model_from_dict, random_init, reward, reward_diff,
    reward_diff_batch, reward_diff_grad,
)
from rtpref.errors import ConfigError, DomainError


def _fd_grad(model, pair, h=1e-6):
    out = np.empty(model.n_params)
    for i in range(model.n_params):
        e = np.zeros(model.n_params)
        e[i] = h
        out[i] = (reward_diff(model.with_params(model.params + e), pair)
                  - reward_diff(model.with_params(model.params - e), pair)) / (2 * h)
    return out


def test_linear_reward():
    assert reward(LinearReward((2,), [1.0, 2.0]), [3.0, 4.0]) == 11.0
    assert reward(LinearReward((3,), np.zeros(3)), [5.0, -1.0, 2.0]) == 0.0


def test_zero_mlp_outputs_zero():
    dims = (3, 4, 2, 1)
    model = MlpReward(dims, np.zeros(MlpReward.n_params_for(dims)))
    assert reward(model, [0.3, -2.0, 7.0]) == 0.0


def test_reward_diff_examples():
    model = LinearReward((2,), [1.0, 0.0])
    pair = QueryPair([2.0, 5.0], [1.0, 5.0])
    assert reward_diff(model, pair) == 1.0
    assert reward_diff(model, pair.swapped()) == -1.0
    assert reward_diff(model, QueryPair([2.0, 5.0], [2.0, 5.0])) == 0.0


def test_reward_diff_antisymmetric_for_mlp():
    rng = np.random.default_rng(0)
    model = random_init("mlp", (4, 5, 3, 1), rng, mode="truth")
    pair = QueryPair(rng.standard_normal(4), rng.standard_normal(4))
    assert reward_diff(model, pair) == pytest.approx(-reward_diff(model, pair.swapped()), abs=1e-14)


def test_linear_gradient():
    model = LinearReward((2,), [0.3, -0.7])
    np.testing.assert_array_equal(reward_diff_grad(model, QueryPair([2.0, 5.0], [1.0, 5.0])), [1.0, 0.0])
    np.testing.assert_array_equal(reward_diff_grad(model, QueryPair([2.0, 5.0], [2.0, 5.0])), [0.0, 0.0])


@pytest.mark.parametrize("output", ["identity", "softplus"])
def test_mlp_gradient_matches_finite_differences(output):
    rng = np.random.default_rng(3)
    model = random_init("mlp", (3, 4, 3, 1), rng, mode="truth", output=output)
    pair = QueryPair(rng.standard_normal(3), rng.standard_normal(3))
    g = reward_diff_grad(model, pair)
    fd = _fd_grad(model, pair)
    assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) <= 1e-5


def test_batch_matches_single():
    rng = np.random.default_rng(4)
    model = random_init("mlp", (2, 6, 1), rng, mode="truth")
    X1, X2 = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    batch = reward_diff_batch(model, X1, X2)
    single = [reward_diff(model, QueryPair(a, b)) for a, b in zip(X1, X2)]
    np.testing.assert_allclose(batch, single, rtol=1e-14)


def test_random_init_deterministic():
    a = random_init("mlp", (3, 8, 1), np.random.default_rng(9))
    b = random_init("mlp", (3, 8, 1), np.random.default_rng(9))
    np.testing.assert_array_equal(a.params, b.params)


def test_truth_init_weight_distribution():
    model = random_init("mlp", (50, 400, 1), np.random.default_rng(1), mode="truth")
    weights = np.concatenate([w.ravel() for w, _ in model.layers()])
    assert abs(weights.mean()) < 0.05
    assert weights.var() == pytest.approx(1.0, rel=0.05)
    assert all(np.all(b == 0) for _, b in model.layers())


def test_fit_init_dims_and_zero_linear():
    model = random_init("mlp", (10, 32, 16, 1), np.random.default_rng(0), mode="fit")
    assert [w.shape for w, _ in model.layers()] == [(10, 32), (32, 16), (16, 1)]
    assert np.all(random_init("linear", (4,), np.random.default_rng(0)).params == 0)


def test_softplus_output_positive():
    model = random_init("mlp", (2, 4, 1), np.random.default_rng(2), mode="truth", output="softplus")
    X = np.random.default_rng(3).standard_normal((100, 2)) * 10
    assert np.all(model.forward(X) > 0)


def test_model_dict_round_trip():
    model = random_init("mlp", (3, 4, 1), np.random.default_rng(5), mode="truth", output="softplus")
    back = model_from_dict(model.to_dict())
    assert isinstance(back, MlpReward) and back.output == "softplus"
    np.testing.assert_array_equal(back.params, model.params)


def test_params_are_read_only():
    model = LinearReward((2,), [1.0, 2.0])
    with pytest.raises(ValueError):
        model.params[0] = 5.0


def test_invalid_models():
    with pytest.raises(ConfigError):
        LinearReward((2,), [1.0])
    with pytest.raises(ConfigError):
        MlpReward((3, 4, 2), np.zeros(100))
    with pytest.raises(ConfigError):
        model_from_dict({"kind": "tree"})
    with pytest.raises(ConfigError):
        random_init("linear", (2,), np.random.default_rng(0), mode="warm")


def test_invalid_inputs():
    with pytest.raises(DomainError):
        QueryPair([1.0, 2.0], [1.0])
    with pytest.raises(DomainError):
        QueryPair([1.0, np.nan], [1.0, 0.0])
    with pytest.raises(DomainError):
        LinearReward((2,), [1.0, 2.0]).forward(np.ones((3, 3)))
