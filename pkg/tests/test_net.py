import numpy as np
import pytest

import oracles
from geoseg.errors import BadShape, DecodeError
from geoseg.losses import final_loss, geometric_loss
from geoseg.net import (
    MAGIC,
    PARAM_NAMES,
    AdamState,
    SegNet,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    load_tensors,
    save_checkpoint,
    save_tensors,
    upsample_matrix,
)
from geoseg.weakmask import PartialMask


def image(seed, h=8, w=8):
    return np.random.default_rng(seed).random((h, w, 3))


def test_output_shape_and_dtype():
    y = forward(init_params(0), image(0, 16, 24))
    assert y.shape == (16, 24) and y.dtype == np.float64
    assert forward(init_params(0, np.float32), image(0)).dtype == np.float32


def test_uint8_and_chw_inputs_agree():
    img = (image(1) * 255).astype(np.uint8)
    p = init_params(1)
    chw = np.moveaxis(img.astype(float) / 255, -1, 0)
    assert np.array_equal(forward(p, img), forward(p, chw))


def test_bad_shapes():
    p = init_params(0)
    with pytest.raises(BadShape):
        forward(p, image(0, 10, 8))
    with pytest.raises(BadShape):
        forward(p, np.zeros((8, 8)))
    with pytest.raises(BadShape):
        forward({**p, "w3": np.zeros((2, 32, 1, 1))}, image(0))
    with pytest.raises(BadShape):
        backward(p, image(0), np.zeros((4, 4)))


def test_zero_weights_give_bias_only_output():
    p = {k: np.zeros_like(v) for k, v in init_params(0).items()}
    assert not forward(p, image(2)).any()
    p["b3"] = np.array([0.7])
    assert np.allclose(forward(p, image(2)), 0.7)


def test_last_layer_is_linear():
    p = init_params(3)
    img = image(3)
    base = forward(p, img)
    q = dict(p, w3=2 * p["w3"], b3=2 * p["b3"])
    assert np.allclose(forward(q, img), 2 * base, atol=1e-14)


def test_upsample_rows_sum_to_one_and_constant_preserved():
    U = upsample_matrix(5)
    assert U.shape == (20, 5)
    assert np.allclose(U.sum(axis=1), 1.0)
    # half-pixel centres: output 1 sits at source -0.125 (clamped), output 2 at 0.125
    assert U[1, 0] == 1.0 and U[2, 0] == pytest.approx(0.875)


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    p = init_params(seed)
    p["b1"] = r.normal(0, 0.1, 16)
    p["b2"] = r.normal(0, 0.1, 32)
    img = image(seed)
    g_out = r.normal(size=(8, 8))
    grads = backward(p, img, g_out)

    def f(q):
        return float(np.sum(g_out * forward(q, img)))

    h = 1e-6
    for name in PARAM_NAMES:
        flat = p[name].ravel()
        picks = r.choice(flat.size, min(flat.size, 40), replace=False)
        fd = np.empty(len(picks))
        for n, i in enumerate(picks):
            plus, minus = dict(p), dict(p)
            plus[name], minus[name] = p[name].copy(), p[name].copy()
            plus[name].flat[i] += h
            minus[name].flat[i] -= h
            fd[n] = (f(plus) - f(minus)) / (2 * h)
        assert oracles.rel_error(grads[name].ravel()[picks], fd) <= 1e-6, name


def test_every_parameter_on_16x16():
    r = np.random.default_rng(10)
    p = init_params(10)
    img = image(10, 16, 16)
    g_out = r.normal(size=(16, 16))
    grads = backward(p, img, g_out)
    h = 1e-6
    for name in PARAM_NAMES:
        fd = np.empty(p[name].size)
        for i in range(p[name].size):
            q = dict(p)
            q[name] = p[name].copy()
            q[name].flat[i] += h
            up = np.sum(g_out * forward(q, img))
            q[name].flat[i] -= 2 * h
            fd[i] = (up - np.sum(g_out * forward(q, img))) / (2 * h)
        assert oracles.rel_error(grads[name].ravel(), fd) <= 1e-6, name


def test_final_loss_through_the_network():
    r = np.random.default_rng(11)
    p = init_params(11)
    a, b = image(11), image(12)
    labels = r.choice(np.array([0, 128, 255], np.uint8), size=(8, 8))
    labels[0, :2] = (0, 255)
    m = PartialMask(labels)
    pts, ptsp = r.uniform(0, 8, (4, 2)), r.uniform(0, 8, (4, 2))

    def loss(q):
        return final_loss(forward(q, a), forward(q, b), m, m, pts, ptsp).value

    res = final_loss(forward(p, a), forward(p, b), m, m, pts, ptsp)
    ga, gb = backward(p, a, res.grad), backward(p, b, res.grad_prime)
    h = 1e-6
    for name in PARAM_NAMES:
        picks = r.choice(p[name].size, min(p[name].size, 30), replace=False)
        fd = np.empty(len(picks))
        for n, i in enumerate(picks):
            q = dict(p)
            q[name] = p[name].copy()
            q[name].flat[i] += h
            up = loss(q)
            q[name].flat[i] -= 2 * h
            fd[n] = (up - loss(q)) / (2 * h)
        assert oracles.rel_error((ga[name] + gb[name]).ravel()[picks], fd) <= 1e-3, name


def test_frozen_parameters_get_zero_gradient():
    p = init_params(0)
    g = backward(p, image(0), np.ones((8, 8)), frozen=("w1", "b1"))
    assert not g["w1"].any() and not g["b1"].any()
    assert g["w3"].any()


def test_zero_output_gradient():
    g = backward(init_params(0), image(0), np.zeros((8, 8)))
    assert all(not v.any() for v in g.values())


def test_first_adam_step_moves_by_lr():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    g = {"a": np.array([0.5, -4.0, 0.0])}
    new, state = adam_step(p, g, AdamState(lr=0.1))
    # bias correction makes the first step lr * sign(g) (up to eps)
    assert np.allclose(new["a"], [0.9, -1.9, 3.0], atol=1e-7)
    assert state.step == 1 and p["a"][0] == 1.0


def test_zero_gradient_adam_step():
    p = {"a": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"a": np.zeros(2)}, AdamState(lr=0.1))
    assert np.array_equal(new["a"], p["a"]) and state.step == 1


def test_training_is_deterministic():
    def run():
        m = SegNet(seed=4, lr=1e-2)
        img = image(4)
        for _ in range(3):
            m.step(backward(m.params, img, forward(m.params, img)))
        return m.params
    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in PARAM_NAMES)


def test_loss_decreases_on_a_synthetic_frame():
    from geoseg.synthworld import SceneSpec, render_frame
    from geoseg.weakmask import rasterize_partial_mask

    spec = SceneSpec(width=64, height=32, fx=32, fy=32, u0=32, v0=16, n_frames=1)
    img = render_frame(spec, 0)[0]
    mask = rasterize_partial_mask(spec.rig, spec.vehicle, spec.width, spec.height)
    m = SegNet(seed=5, lr=1e-3)
    losses = []
    for _ in range(50):
        y = m(img)
        value, g = geometric_loss(y, mask)
        losses.append(value)
        m.step(backward(m.params, img, g))
    upticks = sum(b > a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    assert upticks <= 5


def test_checkpoint_round_trip(tmp_path):
    m = SegNet(seed=6, lr=3e-3)
    img = image(6)
    m.step(backward(m.params, img, forward(m.params, img)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert path.read_bytes()[:8] == MAGIC
    assert all(np.array_equal(back.params[k], m.params[k]) for k in PARAM_NAMES)
    assert back.adam.step == 1 and back.adam.lr == 3e-3
    assert np.array_equal(back(img), m(img))
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_tensor_container_round_trip():
    t = {"x": np.arange(6, dtype=np.int64).reshape(2, 3), "y": np.float32([1.5]), "z": np.zeros((0, 4))}
    back = load_tensors(save_tensors(t))
    for k in t:
        assert back[k].dtype == t[k].dtype and np.array_equal(back[k], t[k])


@pytest.mark.parametrize("blob", [b"", b"GEOSEG02" + b"\0" * 8, MAGIC + b"\1\0"])
def test_bad_checkpoints_raise_decode_error(blob):
    with pytest.raises(DecodeError):
        load_tensors(blob)


def test_truncated_and_trailing_bytes():
    good = save_tensors({"a": np.ones(4)})
    with pytest.raises(DecodeError):
        load_tensors(good[:-3])
    with pytest.raises(DecodeError):
        load_tensors(good + b"x")
