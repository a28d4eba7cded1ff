import json

import numpy as np
import pytest

from rtpref.core.reward_models import LinearReward, random_init
from rtpref.data.dataset import Dataset
from rtpref.errors import ConfigError, DataError
from rtpref.storage.files import (
    csv_columns, load_dataset, load_json, load_model, save_dataset, save_json, save_model, sidecar_path,
)


def test_dataset_round_trip_is_exact(tmp_path, make_linear_data):
    _, data = make_linear_data([0.7, -1.1, 0.2], 64, 9, feature="gaussian", pairing="independent")
    path = tmp_path / "data.csv"
    save_dataset(data, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.x1, data.x1)
    np.testing.assert_array_equal(back.x2, data.x2)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.t_total, data.t_total)
    np.testing.assert_array_equal(back.oracle_scores, data.oracle_scores)
    assert back.provenance["seed"] == 9
    assert "created" in back.provenance


def test_awkward_floats_survive(tmp_path):
    x = np.array([[1 / 3, 2 ** -52], [1e-310, -123456789.123456789]])
    data = Dataset(x1=x, x2=x[::-1], y=[1, -1], t_total=[np.nextafter(0.5, 1.0), 0.1 + 0.2])
    save_dataset(data, tmp_path / "d.csv")
    back = load_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.x1, data.x1)
    np.testing.assert_array_equal(back.t_total, data.t_total)


def test_header_and_dimension(tmp_path, small_dataset):
    path = tmp_path / "d.csv"
    save_dataset(small_dataset, path)
    assert path.read_text().splitlines()[0] == ",".join(csv_columns(2))
    assert load_dataset(path).dim == 2
    assert csv_columns(1) == ["x1_0", "x2_0", "y", "t_total"]


def test_sidecar_records_digest(tmp_path, small_dataset):
    path = tmp_path / "d.csv"
    digest = save_dataset(small_dataset, path)
    meta = json.loads(sidecar_path(path).read_text())
    assert meta["digest"] == digest
    assert len(meta["oracle_scores"]) == 4


def test_bad_label_names_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1_0,x2_0,y,t_total\n0.1,0.2,1,0.5\n0.3,0.4,2,0.6\n")
    with pytest.raises(DataError, match="第 3 行"):
        load_dataset(path)


def test_non_numeric_and_bad_time(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1_0,x2_0,y,t_total\n0.1,oops,1,0.5\n")
    with pytest.raises(DataError, match="第 2 行"):
        load_dataset(path)
    path.write_text("x1_0,x2_0,y,t_total\n0.1,0.2,1,0.5\n0.1,0.2,-1,0\n")
    with pytest.raises(DataError, match="第 3 行"):
        load_dataset(path)


def test_bad_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b,y,t_total\n0.1,0.2,1,0.5\n")
    with pytest.raises(DataError, match="表头"):
        load_dataset(path)
    path.write_text("x1_0,x2_0,y\n0.1,0.2,1\n")
    with pytest.raises(DataError):
        load_dataset(path)


def test_missing_files(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "none.csv")
    with pytest.raises(ConfigError):
        load_model(tmp_path / "none.json")
    with pytest.raises(ConfigError):
        load_json(tmp_path / "none.json")


def test_load_checks_recorded_non_decision_time(tmp_path):
    x = np.array([[0.1], [0.2]])
    ok = Dataset(x1=x, x2=-x, y=[1, -1], t_total=[0.6, 0.9], provenance={"ez": {"a": 1.0, "t_nd": 0.5}})
    save_dataset(ok, tmp_path / "ok.csv")
    assert load_dataset(tmp_path / "ok.csv").provenance["ez"]["t_nd"] == 0.5
    bad = Dataset(x1=x, x2=-x, y=[1, -1], t_total=[0.6, 0.4], provenance={"ez": {"a": 1.0, "t_nd": 0.5}})
    save_dataset(bad, tmp_path / "bad.csv")
    with pytest.raises(DataError, match="t_nd"):
        load_dataset(tmp_path / "bad.csv")
    sidecar_path(tmp_path / "bad.csv").unlink()
    assert len(load_dataset(tmp_path / "bad.csv")) == 2


def test_require_oracle_without_sidecar(tmp_path, small_dataset):
    path = tmp_path / "d.csv"
    save_dataset(small_dataset, path)
    sidecar_path(path).unlink()
    assert load_dataset(path).oracle_scores is None
    with pytest.raises(ConfigError):
        load_dataset(path, require_oracle=True)


@pytest.mark.parametrize("model", [
    LinearReward((3,), [0.1, -2.0, 1 / 3]),
    random_init("mlp", (4, 5, 1), np.random.default_rng(0), mode="truth", output="softplus"),
])
def test_model_round_trip(tmp_path, model):
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert type(back) is type(model)
    np.testing.assert_array_equal(back.params, model.params)


def test_json_helpers(tmp_path):
    save_json({"b": 1, "a": "中文"}, tmp_path / "r.json")
    text = (tmp_path / "r.json").read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert "中文" in text
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_json(tmp_path / "bad.json")
    (tmp_path / "m.json").write_text('{"kind": "linear"}')
    with pytest.raises(ConfigError):
        load_model(tmp_path / "m.json")
