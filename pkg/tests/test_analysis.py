import json

import jsonschema
import numpy as np
import pytest

from omllab.analysis import (
    REPORT_SCHEMA,
    activations,
    dead_fraction_of,
    dead_neurons,
    dump_representation,
    instance_sparsity,
    instance_sparsity_of,
    load_matrix,
    sparsity_report,
    write_summary,
)
from omllab.autodiff import Value
from omllab.errors import ConfigError, ContractError
from omllab.network import NetworkSpec, build

SPEC = NetworkSpec(6, 2, (16, 8), 1)


def inputs(n=50, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 6))


def test_all_zero_and_all_positive_representations():
    assert instance_sparsity_of(np.zeros((4, 10))) == 0.0
    assert dead_fraction_of(np.zeros((4, 10))) == 1.0
    assert instance_sparsity_of(np.full((4, 10), 0.3)) == 1.0
    assert dead_fraction_of(np.full((4, 10), 0.3)) == 0.0
    with pytest.raises(ContractError):
        instance_sparsity_of(np.zeros((0, 3)))


def test_hand_computed_fractions():
    reps = np.array([[1.0, 0.0, 0.0, 2.0], [0.5, 0.0, 0.0, 0.0]])
    assert instance_sparsity_of(reps) == pytest.approx((2 / 4 + 1 / 4) / 2)
    assert dead_fraction_of(reps) == 0.5


def test_large_negative_bias_unit_is_dead():
    params = build(SPEC, 0)
    w, b = params.theta[0].data.copy(), params.theta[0 + 1].data.copy()
    # inputs live in [0, 1], so a bias below -sum|w| bounds the pre-activation below zero
    b[3] = -np.abs(w[:, 3]).sum() - 1.0
    theta = [Value(w, requires_grad=True), Value(b, requires_grad=True)]
    x = inputs()
    assert (activations(theta, x)[:, 3] == 0).all()
    dead_before = ~np.any(activations(params.theta, x) > 0, axis=0)
    dead_before[3] = True
    assert dead_neurons(theta, x) == dead_before.mean()


def test_dead_bounded_by_least_sparse_input():
    params = build(SPEC, 2)
    reps = activations(params.theta, inputs())
    per_input = np.mean(reps > 0, axis=1)
    assert dead_fraction_of(reps) <= 1 - per_input.min()


def test_order_and_chunking_do_not_matter():
    params = build(SPEC, 1)
    x = inputs(300)
    perm = np.random.default_rng(0).permutation(len(x))
    a = instance_sparsity(params.theta, x)
    assert instance_sparsity(params.theta, x[perm]) == pytest.approx(a, abs=1e-15)
    chunked = activations(params.theta, x, chunk=7)
    assert np.array_equal(chunked, activations(params.theta, x))
    assert dead_neurons(params.theta, x[perm]) == dead_neurons(params.theta, x)


def test_report_validates_against_schema(tmp_path):
    params = build(SPEC, 0)
    report = sparsity_report(params.theta, inputs())
    assert report.d == 16 and report.n_inputs == 50
    report.to_json(tmp_path / "s.json")
    jsonschema.validate(json.loads((tmp_path / "s.json").read_text()), REPORT_SCHEMA)


def test_dump_round_trip_and_normalization(tmp_path):
    params = build(SPEC, 0)
    x = inputs()
    manifest = dump_representation(params.theta, x, 4, tmp_path, n_instances=3)
    assert manifest["shape"] == [4, 4] and set(manifest["files"]) == {"mean", "instance_0", "instance_1", "instance_2"}
    reps = activations(params.theta, x)
    mean = load_matrix(tmp_path / "mean.csv")
    assert mean.max() == 1.0
    assert np.array_equal(mean, (reps.mean(axis=0) / reps.mean(axis=0).max()).reshape(4, 4))
    first = load_matrix(tmp_path / "instance_0.csv")
    expected = reps[0] / reps[0].max() if reps[0].max() > 0 else np.zeros(16)
    assert np.array_equal(first, expected.reshape(4, 4))


def test_zero_representation_dumps_zeros(tmp_path):
    params = build(SPEC, 0)
    dump_representation(params.theta, np.zeros((3, 6)), 2, tmp_path)
    assert not load_matrix(tmp_path / "mean.csv").any()


def test_paper_layout_for_wide_representation(tmp_path):
    spec = NetworkSpec(4, 2, (2304,), 1)
    params = build(spec, 0)
    manifest = dump_representation(params.theta, inputs(5)[:, :4], 32, tmp_path, n_instances=0)
    assert manifest["shape"] == [32, 72]


def test_indivisible_reshape_is_config_error(tmp_path):
    params = build(SPEC, 0)
    with pytest.raises(ConfigError):
        dump_representation(params.theta, inputs(), 5, tmp_path)


def test_dump_is_idempotent(tmp_path):
    params = build(SPEC, 0)
    dump_representation(params.theta, inputs(), 4, tmp_path / "a")
    dump_representation(params.theta, inputs(), 4, tmp_path / "a")
    dump_representation(params.theta, inputs(), 4, tmp_path / "b")
    for name in ("mean.csv", "instance_0.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_summary_table(tmp_path):
    write_summary(tmp_path / "s.csv", [{"method": "oml", "instance_sparsity": 0.1, "dead_fraction": 0.0, "extra": 1}])
    assert (tmp_path / "s.csv").read_text().splitlines() == ["method,instance_sparsity,dead_fraction", "oml,0.1,0.0"]
