import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmbpo.nets import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    AdamState,
    GaussianHead,
    Layout,
    MlpSpec,
    adam_step,
    backward,
    forward,
    gaussian_sample_and_logp,
    grad,
    init_params,
    load_params,
    numerical_gradient,
    relative_error,
    save_params,
)

# Coordinates smaller than FD_FLOOR, or than FD_SCALE times the largest
# entry, are compared against that floor instead of their own size: there the
# central difference is dominated by round-off in f, not by the gradient.
FD_FLOOR = 1e-7
FD_SCALE = 1e-6
FD_TOL = 1e-4


def assert_gradient(analytic, f, theta):
    numeric = numerical_gradient(f, theta)
    floor = max(FD_FLOOR, FD_SCALE * float(np.max(np.abs(numeric), initial=0.0)))
    err = relative_error(analytic, numeric, floor)
    assert err.max() < FD_TOL, (err.max(), int(err.argmax()))


def random_config(seed):
    """A small MLP and batch whose pre-activations keep clear of the relu kink."""
    rng = np.random.default_rng(seed)
    while True:
        spec = MlpSpec(int(rng.integers(1, 5)), tuple(int(h) for h in rng.integers(1, 7, rng.integers(1, 3))),
                       int(rng.integers(1, 4)), ["tanh", "relu"][seed % 2])
        params = init_params(spec, rng) + rng.normal(0, 0.1, spec.layout.size)
        x = rng.normal(0, 1, (int(rng.integers(1, 6)), spec.input_dim))
        cache = []
        forward(spec, params, x, cache)
        if spec.activation == "tanh" or min(np.abs(z).min() for _, z in cache[:-1]) > 1e-3:
            return spec, params, x, rng


# forward


def test_zero_parameters_give_zero_output():
    spec = MlpSpec(3, (4, 5), 2)
    out = forward(spec, np.zeros(spec.layout.size), np.ones((7, 3)))
    assert np.array_equal(out, np.zeros((7, 2)))


def test_linear_layer_is_matrix_product():
    spec = MlpSpec(3, (), 2)
    rng = np.random.default_rng(0)
    params = rng.normal(size=spec.layout.size)
    W, b = params[:6].reshape(3, 2), params[6:]
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(forward(spec, params, x), x @ W + b, rtol=0, atol=1e-15)


def test_forward_is_deterministic():
    spec = MlpSpec(4, (16, 16), 3, "relu")
    params = init_params(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(10, 4))
    assert forward(spec, params, x).tobytes() == forward(spec, params, x).tobytes()


def test_shape_mismatch_raises():
    spec = MlpSpec(3, (4,), 1)
    params = np.zeros(spec.layout.size)
    with pytest.raises(ValueError):
        forward(spec, params, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(spec, params[:-1], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        grad(spec, params, np.zeros((2, 3)), np.zeros((2, 2)))


@pytest.mark.parametrize("kw", [dict(input_dim=0), dict(input_dim=2, hidden=(0,)), dict(input_dim=2, activation="gelu")])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        MlpSpec(**kw)


def test_layout_covers_vector_once():
    spec = MlpSpec(3, (5, 4), 2)
    layout = spec.layout
    hits = np.zeros(layout.size)
    for offset, shape in layout.entries.values():
        hits[offset:offset + int(np.prod(shape))] += 1
    assert np.all(hits == 1)
    assert layout.size == 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2


# gradients


def test_linear_gradient_is_outer_product():
    spec = MlpSpec(3, (), 2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 3))
    cot = rng.normal(size=(1, 2))
    g = spec.layout.unpack(grad(spec, rng.normal(size=spec.layout.size), x, cot))
    np.testing.assert_allclose(g["W0"], np.outer(x[0], cot[0]), atol=1e-15)
    np.testing.assert_allclose(g["b0"], cot[0], atol=1e-15)


def test_zero_cotangent_gives_zero_gradient():
    spec = MlpSpec(3, (8,), 2, "relu")
    params = init_params(spec, np.random.default_rng(0))
    assert not grad(spec, params, np.ones((4, 3)), np.zeros((4, 2))).any()


@pytest.mark.parametrize("seed", range(20))
def test_mlp_gradient_matches_finite_differences(seed):
    spec, params, x, rng = random_config(seed)
    cot = rng.normal(size=(len(x), spec.output_dim))

    def f(theta):
        return float(np.sum(forward(spec, theta, x) * cot))

    assert_gradient(grad(spec, params, x, cot), f, params)
    # and w.r.t. the input
    cache = []
    forward(spec, params, x, cache)
    d_x = backward(spec, params, cache, cot)[1]
    assert_gradient(d_x.ravel(), lambda flat: float(np.sum(forward(spec, params, flat.reshape(x.shape)) * cot)),
                    x.ravel())


# Gaussian head


def head_config(seed):
    rng = np.random.default_rng(100 + seed)
    dim = int(rng.integers(1, 4))
    head = GaussianHead(dim, squash=bool(seed % 2), scale=float(rng.uniform(0.5, 3.0)))
    n = int(rng.integers(1, 5))
    out = np.hstack([rng.normal(0, 1, (n, dim)), rng.uniform(-2, 1, (n, dim))])
    eps = rng.normal(size=(n, dim))
    return head, out, eps, rng


def test_zero_noise_without_squash_gives_mean():
    head = GaussianHead(2)
    out = np.array([[0.3, -1.0, math.log(0.5), 0.0]])
    a, logp, _ = head.sample(out, np.zeros((1, 2)))
    np.testing.assert_array_equal(a, out[:, :2])
    assert logp[0] == pytest.approx(-(math.log(0.5) + 0.5 * math.log(2 * math.pi)) - 0.5 * math.log(2 * math.pi))


def test_squashed_density_concentrates_as_std_shrinks():
    head = GaussianHead(1, squash=True)
    prev = -np.inf
    for log_std in (0.0, -2.0, -4.0, -8.0):
        a, logp, _ = head.sample(np.array([[0.0, log_std]]), np.array([[0.5]]))
        assert abs(a[0, 0]) <= math.exp(log_std)
        assert logp[0] > prev
        prev = logp[0]


def test_log_std_is_clamped():
    head = GaussianHead(1)
    _, log_std, inside = head.split(np.array([[0.0, -50.0], [0.0, 9.0], [0.0, 0.0]]))
    assert log_std[:, 0].tolist() == [LOG_STD_MIN, LOG_STD_MAX, 0.0]
    assert inside[:, 0].tolist() == [False, False, True]


@pytest.mark.parametrize("squash", [False, True])
def test_density_integrates_to_one(squash):
    head = GaussianHead(1, squash=squash, scale=2.0)
    out = np.array([[0.4, math.log(0.7)]])
    lo, hi = (-2.0, 2.0) if squash else (-8.0, 8.0)
    actions = np.linspace(lo, hi, 200_001)[1:-1]
    u = head.preimage(actions[:, None], limit=1 - 1e-12)
    density = np.exp(head.log_prob(np.repeat(out, len(u), axis=0), u))
    assert abs(np.trapezoid(density, actions) - 1.0) < 0.02


def test_squash_correction_formula():
    head = GaussianHead(1, squash=True)
    out = np.array([[0.2, -0.3]])
    u = np.array([[0.8]])
    base = -0.5 * ((0.8 - 0.2) / math.exp(-0.3)) ** 2 + 0.3 - 0.5 * math.log(2 * math.pi)
    expect = base - math.log(1 - math.tanh(0.8) ** 2 + 1e-6)
    assert head.log_prob(out, u)[0] == pytest.approx(expect, abs=1e-12)


def test_squashed_samples_stay_in_bounds():
    head = GaussianHead(2, squash=True, scale=2.0)
    rng = np.random.default_rng(0)
    out = np.hstack([rng.normal(0, 5, (1000, 2)), np.full((1000, 2), 2.0)])
    a, _, _ = head.sample(out, rng.normal(size=(1000, 2)))
    assert np.all(np.abs(a) <= 2.0)


def test_sample_and_log_prob_agree():
    head, out, eps, _ = head_config(1)
    _, logp, u = head.sample(out, eps)
    np.testing.assert_allclose(head.log_prob(out, u), logp, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pathwise_gradient_matches_finite_differences(seed):
    head, out, eps, rng = head_config(seed)
    n = len(out)
    d_action = rng.normal(size=(n, head.dim))
    d_logp = rng.normal(size=n)

    def f(flat):
        a, logp, _ = head.sample(flat.reshape(out.shape), eps)
        return float(np.sum(a * d_action) + logp @ d_logp)

    assert_gradient(head.sample_backward(out, eps, d_action, d_logp).ravel(), f, out.ravel())


@pytest.mark.parametrize("seed", range(20))
def test_log_prob_gradient_matches_finite_differences(seed):
    head, out, eps, rng = head_config(seed)
    u = rng.normal(size=eps.shape)
    w = rng.normal(size=len(out))
    d_out, d_u = head.log_prob_backward(out, u, w)
    assert_gradient(d_out.ravel(), lambda flat: float(head.log_prob(flat.reshape(out.shape), u) @ w), out.ravel())
    assert_gradient(d_u.ravel(), lambda flat: float(head.log_prob(out, flat.reshape(u.shape)) @ w), u.ravel())


@pytest.mark.parametrize("seed", range(20))
def test_kl_gradient_matches_finite_differences(seed):
    head, out_q, _, rng = head_config(seed)
    out_p = out_q + rng.normal(0, 0.5, out_q.shape)
    w = rng.normal(size=len(out_q))
    analytic = head.kl_backward_q(out_p, out_q, w)
    assert_gradient(analytic.ravel(), lambda flat: float(head.kl(out_p, flat.reshape(out_q.shape)) @ w),
                    out_q.ravel())


def test_kl_is_zero_for_identical_heads():
    head, out, _, _ = head_config(2)
    np.testing.assert_allclose(head.kl(out, out), 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_trunk_and_head_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    dim = int(rng.integers(1, 3))
    spec = MlpSpec(3, (5,), 2 * dim, "tanh")
    head = GaussianHead(dim, squash=True, scale=2.0)
    params = init_params(spec, rng)
    x = rng.normal(size=(3, 3))
    eps = rng.normal(size=(3, dim))
    d_action = rng.normal(size=(3, dim))
    d_logp = rng.normal(size=3)
    _, _, back = gaussian_sample_and_logp(head, spec, params, x, eps)

    def f(theta):
        a, logp, _ = gaussian_sample_and_logp(head, spec, theta, x, eps)
        return float(np.sum(a * d_action) + logp @ d_logp)

    assert_gradient(back(d_action, d_logp), f, params)


# Adam


def test_first_adam_step_moves_by_lr_against_sign():
    g = np.array([3.0, -0.2, 1e-3])
    new, state = adam_step(AdamState.zeros(3), np.zeros(3), g, 0.01)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-4)
    assert state.t == 1


def test_zero_gradient_leaves_parameters():
    params = np.array([1.0, -2.0])
    state = AdamState.zeros(2)
    for _ in range(100):
        new, state = adam_step(state, params, np.zeros(2), 0.1)
        assert np.array_equal(new, params)


def test_adam_minimizes_quadratic_bowl():
    theta = np.random.default_rng(0).normal(size=5)
    state = AdamState.zeros(5)
    for _ in range(5000):
        theta, state = adam_step(state, theta, 2 * theta, 1e-2)
    assert np.linalg.norm(theta) < 1e-3


@given(st.floats(1e-6, 1.0), st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
@settings(max_examples=50, deadline=None)
def test_adam_step_size_is_bounded_by_lr_on_first_step(lr, g):
    g = np.array(g)
    new, _ = adam_step(AdamState.zeros(len(g)), np.zeros(len(g)), g, lr)
    assert np.all(np.abs(new) <= lr * (1 + 1e-12))


# checkpoints


def test_checkpoint_round_trip(tmp_path):
    spec = MlpSpec(3, (7, 4), 2)
    params = init_params(spec, np.random.default_rng(0))
    path = tmp_path / "p.bin"
    save_params(path, params, spec.layout)
    back, layout = load_params(path)
    assert layout == spec.layout
    assert back.tobytes() == params.tobytes()


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    bad = tmp_path / "x.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_params(bad)
    spec = MlpSpec(2, (3,), 1)
    good = tmp_path / "p.bin"
    save_params(good, np.zeros(spec.layout.size), spec.layout)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_params(good)


def test_layout_equality():
    assert Layout([("a", (2, 3))]) == Layout([("a", [2, 3])])
    assert Layout([("a", (2, 3))]) != Layout([("a", (3, 2))])
