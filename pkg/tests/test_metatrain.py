import numpy as np
import pytest

from omllab.autodiff import Value, backward
from omllab.errors import ConfigError, DivergenceError
from omllab.metatrain import (
    Adam,
    Episode,
    MetaTrainConfig,
    _episode_start,
    inner_update,
    init_state,
    maml_rep_meta_gradient,
    maml_rep_meta_step,
    meta_train,
    oml_meta_gradient,
    oml_meta_step,
    truncated_oml_gradient,
    truncated_oml_meta_step,
    unrolled_depth,
)
from omllab.network import NetworkSpec, build, load_checkpoint, pln_forward, representation, task_loss
from omllab.problems import SineSource, SplitSource, sample_sine_functions, sample_sine_problem, sample_trajectory, synthetic_class_dataset
from omllab.rng import stream


def sine_setup(seed=0, n=3, widths=(16, 16), rln_depth=1):
    pool = sample_sine_functions(np.random.default_rng(seed), 50)
    source = SineSource(pool, n, 4)
    spec = NetworkSpec(n + 1, 1, widths, rln_depth)
    return source, spec


def episode(seed=0, k=6, n=3, bs=4):
    rng = np.random.default_rng(seed)
    problem = sample_sine_problem(rng, n)
    return Episode(problem, sample_trajectory(problem, k, bs, rng), sample_trajectory(problem, k, bs, rng), "regression")


def cfg(**kw):
    base = {"objective": "oml", "inner_lr": 0.05, "meta_lr": 1e-3, "k": 6, "truncation": 1, "meta_steps": 3}
    return MetaTrainConfig(**{**base, **kw})


def test_zero_step_keeps_w():
    params = build(NetworkSpec(4, 1, (5,), 1), 0)
    x, y = np.ones((2, 4)), np.zeros((2, 1))
    new = inner_update(params.w, params.theta, (Value(x), y), 0.0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(new, params.w))


def test_linear_inner_step_value():
    # PLN of one linear layer on a one-unit representation equal to x
    w = [Value(np.array([[1.0]]), requires_grad=True), Value(np.zeros(1), requires_grad=True)]
    new = inner_update(w, [], (None, np.array([[0.0]])), 0.1, h=Value(np.array([[1.0]])))
    assert new[0].item() == pytest.approx(0.8)


def test_gradient_through_one_step_reaches_theta():
    spec = NetworkSpec(3, 1, (6, 6), 1)
    params = build(spec, 2)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 1))
    w1 = inner_update(params.w, params.theta, (Value(x), y), 0.1)
    loss = task_loss(pln_forward(representation(Value(x), params.theta), w1), y, "regression")
    gm = backward(loss, params.theta)
    assert any(np.abs(gm[p].data).sum() > 0 for p in params.theta)


def test_zero_inner_lr_gives_plain_gradient():
    source, spec = sine_setup()
    params = build(spec, 0)
    ep = episode()
    _, grads = oml_meta_gradient(params.theta, params.w, ep, cfg(inner_lr=0.0))
    xs = np.concatenate([*ep.train.inputs, *ep.test.inputs])
    ys = np.concatenate([*ep.train.targets, *ep.test.targets])
    plain = backward(task_loss(pln_forward(representation(Value(xs), params.theta), params.w), ys, "regression"), params.theta)
    for g, p in zip(grads, params.theta):
        assert np.allclose(g, plain[p].data, rtol=1e-12, atol=1e-14)


def test_train_plus_test_scope_concatenates():
    source, spec = sine_setup()
    params = build(spec, 1)
    ep = episode()
    c = cfg()
    loss, _ = oml_meta_gradient(params.theta, params.w, ep, c)
    w = list(params.w)
    for batch in ep.train:
        w = inner_update(w, params.theta, (Value(batch[0]), batch[1]), c.inner_lr, create_graph=False)
    xs = np.concatenate([*ep.train.inputs, *ep.test.inputs])
    ys = np.concatenate([*ep.train.targets, *ep.test.targets])
    expected = task_loss(pln_forward(representation(Value(xs), params.theta), w), ys, "regression").item()
    assert loss == pytest.approx(expected, rel=1e-12)
    test_only, _ = oml_meta_gradient(params.theta, params.w, ep, cfg(meta_loss_scope="test"))
    assert test_only != pytest.approx(loss)


def test_inner_loop_never_modifies_theta():
    source, spec = sine_setup()
    params = build(spec, 0)
    before = [p.data.copy() for p in params.theta]
    oml_meta_gradient(params.theta, params.w, episode(), cfg())
    maml_rep_meta_gradient(params.theta, params.w, episode(), cfg())
    assert all(np.array_equal(a, p.data) for a, p in zip(before, params.theta))


def test_maml_rep_equals_oml_for_single_sample():
    source, spec = sine_setup(n=1)
    source.batch_size = 1
    params = build(spec, 3)
    c_oml = cfg(k=1, meta_loss_scope="test")
    c_maml = cfg(objective="maml-rep", k=1, inner_steps=1)
    a = oml_meta_step(init_state(params, c_oml), source, c_oml, stream(0, "ep"))
    b = maml_rep_meta_step(init_state(params, c_maml), source, c_maml, stream(0, "ep"))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.params.theta, b.params.theta))


def test_oml_and_maml_rep_differ_on_block_data():
    source, spec = sine_setup()
    params = build(spec, 3)
    c_oml = cfg()
    c_maml = cfg(objective="maml-rep")
    a = oml_meta_step(init_state(params, c_oml), source, c_oml, stream(0, "ep"))
    b = maml_rep_meta_step(init_state(params, c_maml), source, c_maml, stream(0, "ep"))
    assert not all(np.array_equal(x.data, y.data) for x, y in zip(a.params.theta, b.params.theta))


def test_more_whole_batch_steps_reduce_inner_loss():
    # single linear PLN on a fixed representation: a convex quadratic in W
    rng = np.random.default_rng(0)
    h = Value(rng.normal(size=(20, 4)))
    y = rng.normal(size=(20, 1))
    w0 = [Value(rng.normal(size=(4, 1)), requires_grad=True), Value(np.zeros(1), requires_grad=True)]

    def loss_after(steps):
        w = w0
        for _ in range(steps):
            w = inner_update(w, [], (None, y), 0.05, h=h, create_graph=False)
        return task_loss(pln_forward(h, w), y, "regression").item()

    assert loss_after(5) <= loss_after(1) <= loss_after(0)


def test_pln_rerandomized_each_iteration():
    source, spec = sine_setup()
    state = init_state(build(spec, 0), cfg())
    rng = stream(0, "ep")
    w_a, _ = _episode_start(state, source, cfg(), rng, persist_w=False)
    w_b, _ = _episode_start(state, source, cfg(), rng, persist_w=False)
    assert not np.array_equal(w_a[0].data, w_b[0].data)


def test_truncated_single_window_matches_oml():
    source, spec = sine_setup()
    params = build(spec, 4)
    ep = episode(k=3)
    _, oml_grads = oml_meta_gradient(params.theta, params.w, ep, cfg(k=3, meta_loss_scope="test"))
    _, acc, info = truncated_oml_gradient(params.theta, params.w, ep, cfg(k=3, truncation=3, objective="oml-truncated"))
    assert info["n_accumulations"] == 1
    for a, b in zip(acc, oml_grads):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-14)


def test_truncation_windows_and_depth():
    source, spec = sine_setup(n=5)
    params = build(spec, 0)
    ep = episode(k=25, n=5)
    c = cfg(objective="oml-truncated", k=25, truncation=5)
    _, _, info = truncated_oml_gradient(params.theta, params.w, ep, c, audit=True)
    assert info["n_accumulations"] == 5
    assert max(info["window_depths"]) <= 5


def test_truncated_step_keeps_persistent_w():
    source, spec = sine_setup()
    params = build(spec, 0)
    c = cfg(objective="oml-truncated", truncation=2)
    new = truncated_oml_meta_step(init_state(params, c), source, c, stream(0, "ep"))
    assert all(np.array_equal(a.data, b.data) for a, b in zip(new.params.w, params.w))
    assert not all(np.array_equal(a.data, b.data) for a, b in zip(new.params.theta, params.theta))


def test_unrolled_depth_counts_inner_steps():
    source, spec = sine_setup()
    params = build(spec, 0)
    ep = episode(k=6)
    w = list(params.w)
    for j, batch in enumerate(ep.train):
        w = inner_update(w, params.theta, (Value(batch[0]), batch[1]), 0.05, step=j)
    out = task_loss(pln_forward(representation(Value(ep.test.inputs[0]), params.theta), w), ep.test.targets[0], "regression")
    assert unrolled_depth(out) == 6


def test_no_rln_ablation_updates_encoder_in_inner_loop():
    source, spec = sine_setup()
    params = build(spec, 0)
    ep = episode()
    l_frozen, g_frozen = oml_meta_gradient(params.theta, params.w, ep, cfg())
    l_free, g_free = oml_meta_gradient(params.theta, params.w, ep, cfg(objective="oml-no-rln"), with_w0=True)
    assert l_frozen != pytest.approx(l_free)
    assert len(g_free) == len(params.theta) + len(params.w)


def test_adam_zero_gradient_is_a_no_op():
    params = build(NetworkSpec(3, 1, (4,), 1), 0).theta
    adam = Adam(0.1)
    new, state = adam.step(params, [np.zeros(p.shape) for p in params], adam.init(params))
    assert state.t == 1
    assert all(np.array_equal(a.data, b.data) for a, b in zip(new, params))


def test_divergence_is_raised():
    source, spec = sine_setup()
    c = cfg(inner_lr=50.0, divergence_norm=1e-3)
    with pytest.raises(DivergenceError):
        meta_train(c, source, spec, stream(0, "init"), stream(0, "ep"))


def test_gradient_clipping_bounds_update():
    source, spec = sine_setup()
    c = cfg(clip_norm=1e-6)
    state = oml_meta_step(init_state(build(spec, 0), c), source, c, stream(0, "ep"))
    assert state.info["grad_norm"] > 1e-6


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError) as exc:
        MetaTrainConfig(inner_lr=-1.0)
    assert exc.value.field == "inner_lr"
    for bad in ({"objective": "sgd"}, {"meta_loss_scope": "train"}, {"k": 0}, {"truncation": 0}, {"meta_lr": 0.0}):
        with pytest.raises(ConfigError):
            MetaTrainConfig(**bad)


def test_meta_train_log_and_reproducibility(tmp_path):
    source, spec = sine_setup()
    c = cfg(meta_steps=4, checkpoint_every=2)

    def run(d):
        return meta_train(c, source, spec, stream(0, "init"), stream(0, "ep"), out_dir=d)

    p1, rows = run(tmp_path / "a")
    p2, _ = run(tmp_path / "b")
    assert len(rows) == 4 and [r["meta_step"] for r in rows] == [1, 2, 3, 4]
    a = (tmp_path / "a" / "checkpoint" / "params.bin").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint" / "params.bin").read_bytes()
    assert np.array_equal(load_checkpoint(tmp_path / "a" / "checkpoint").flat(), p1.flat())
    header = (tmp_path / "a" / "meta_train_log.csv").read_text().splitlines()[0]
    assert header == "meta_step,meta_loss,grad_norm,wall_ms"


def test_sine_desk_meta_loss_decreases():
    pool = sample_sine_functions(stream(0, "pool"), 400)
    source = SineSource(pool, 5, 8)
    spec = NetworkSpec(6, 1, (64, 64, 64), 3)
    c = MetaTrainConfig(objective="oml", inner_lr=0.003, meta_lr=1e-3, k=50, meta_steps=200)
    _, rows = meta_train(c, source, spec, stream(0, "init"), stream(0, "ep"))
    losses = [r["meta_loss"] for r in rows]
    assert np.mean(losses[-40:]) < np.mean(losses[:40])


def test_classification_episode_meta_step():
    ds = synthetic_class_dataset(30, 8, np.random.default_rng(0))
    source = SplitSource(ds, 3, 1)
    spec = NetworkSpec(8, 3, (10, 10), 1)
    c = cfg(k=6)
    state = oml_meta_step(init_state(build(spec, 0), c), source, c, stream(0, "ep"))
    assert np.isfinite(state.info["meta_loss"])
