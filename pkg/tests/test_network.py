import numpy as np
import pytest

from omllab.autodiff import Value, backward, mse
from omllab.errors import ConfigError
from omllab.network import (
    NetworkSpec,
    build,
    init_pln,
    load_checkpoint,
    pln_forward,
    predict,
    read_manifest,
    representation,
    save_checkpoint,
    task_loss,
)

from .oracles import forward_np


def small_spec(**kw):
    kw = {"input_dim": 4, "output_dim": 3, "widths": (6, 5), "rln_depth": 1, **kw}
    return NetworkSpec(**kw)


def test_paper_sine_network_parameter_count():
    spec = NetworkSpec(input_dim=11, output_dim=1, widths=(300,) * 8, rln_depth=6)
    dims = [11] + [300] * 8 + [1]
    closed_form = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    assert spec.n_layers == 9
    assert spec.n_params() == closed_form
    params = build(spec, 0)
    assert sum(p.size for p in params.all()) == closed_form
    assert len(params.theta) == 12 and len(params.w) == 6


def test_rln_depth_bounds():
    with pytest.raises(ConfigError):
        small_spec(rln_depth=0)
    with pytest.raises(ConfigError):
        small_spec(rln_depth=3)
    assert small_spec(rln_depth=2).rep_dim == 5


def test_build_is_deterministic_with_zero_biases():
    a, b = build(small_spec(), 7), build(small_spec(), 7)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), build(small_spec(), 8).flat())
    biases = [p for p in a.all() if p.data.ndim == 1]
    assert biases and all(not p.data.any() for p in biases)


def test_weights_within_fan_in_bound():
    params = build(small_spec(), 1)
    for p in params.all():
        if p.data.ndim == 2:
            assert np.abs(p.data).max() <= np.sqrt(6.0 / p.shape[0])


def test_theta_and_w_are_disjoint_and_cover_everything():
    params = build(small_spec(), 0)
    ids_theta = {id(p) for p in params.theta}
    ids_w = {id(p) for p in params.w}
    assert not ids_theta & ids_w
    assert len(ids_theta | ids_w) == len(params.all())
    shapes = [p.shape for p in params.all()]
    expected = []
    for fan_in, fan_out in small_spec().layer_shapes():
        expected += [(fan_in, fan_out), (fan_out,)]
    assert shapes == expected


def test_zero_input_gives_zero_representation():
    params = build(small_spec(), 0)
    h = representation(Value(np.zeros((3, 4))), params.theta)
    assert h.shape == (3, 6)
    assert not h.data.any()


@pytest.mark.parametrize("batch", [1, 2, 17])
def test_representation_width(batch):
    params = build(small_spec(rln_depth=2), 0)
    assert representation(Value(np.ones((batch, 4))), params.theta).shape == (batch, 5)


def test_forward_matches_numpy_reference():
    rng = np.random.default_rng(5)
    params = build(small_spec(), 3)
    x = rng.normal(size=(7, 4))
    layers = [(params.all()[i].data, params.all()[i + 1].data) for i in range(0, len(params.all()), 2)]
    assert np.allclose(predict(Value(x), params.theta, params.w).data, forward_np(x, layers), atol=1e-12)


def test_predict_is_composition():
    rng = np.random.default_rng(0)
    params = build(small_spec(), 0)
    x = Value(rng.normal(size=(4, 4)))
    composed = pln_forward(representation(x, params.theta), params.w)
    assert np.array_equal(predict(x, params.theta, params.w).data, composed.data)


def test_zero_head_gives_zero_logits():
    spec = NetworkSpec(4, 3, (6,), 1)
    params = build(spec, 0)
    zero_w = [Value(np.zeros(p.shape), requires_grad=True) for p in params.w]
    out = predict(Value(np.ones((2, 4))), params.theta, zero_w)
    assert out.shape == (2, 3) and not out.data.any()


def test_sine_prediction_shape():
    spec = NetworkSpec(11, 1, (8, 8), 1)
    params = build(spec, 0)
    assert predict(Value(np.ones((8, 11))), params.theta, params.w).shape == (8, 1)


def test_partition_has_no_gradient_leak():
    rng = np.random.default_rng(1)
    params = build(small_spec(), 0)
    x = Value(rng.normal(size=(5, 4)))
    loss = task_loss(predict(x, params.theta, params.w), rng.integers(0, 3, size=5), "classification")
    only_w = backward(loss, params.w)
    assert set(map(id, only_w)) == set(map(id, params.w))
    both = backward(loss, params.all())
    for p in params.w:
        assert np.array_equal(both[p].data, only_w[p].data)


def test_representation_ignores_w():
    rng = np.random.default_rng(2)
    params = build(small_spec(), 0)
    x = Value(rng.normal(size=(3, 4)))
    h1 = representation(x, params.theta).data
    init_pln(small_spec(), np.random.default_rng(9))
    assert np.array_equal(h1, representation(x, params.theta).data)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = build(small_spec(), 4)
    params.meta["objective"] = "oml"
    save_checkpoint(tmp_path / "ck", params, {"meta_step": 3})
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.spec == params.spec
    assert loaded.flat().tobytes() == params.flat().tobytes()
    assert loaded.meta == {"objective": "oml", "meta_step": "3"}
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["rln_depth"] == "1" and manifest["widths"] == "6,5" and manifest["seed"] == "4"
    raw = np.fromfile(tmp_path / "ck" / "params.bin", dtype="<f8")
    assert np.array_equal(raw, params.flat())


def test_checkpoint_size_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck", build(small_spec(), 0))
    with open(tmp_path / "ck" / "params.bin", "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_task_loss_kinds():
    pred = Value(np.array([[1.0], [2.0]]))
    assert task_loss(pred, np.array([1.0, 2.0]), "regression").item() == 0.0
    assert task_loss(pred, np.array([1.0, 2.0]), "regression").item() == mse(pred, Value(pred.data)).item()
    with pytest.raises(ConfigError):
        task_loss(pred, [0, 0], "ranking")
