import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbench.diffusion import (LatentGrid, NoiseSchedule, add_noise, anatomy_loss,
                               composite_loss, concat_latents, noise_loss, pixel_loss,
                               recover_z0)
from ctbench.errors import ParameterError


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.linear_beta()


def _rand_latent(rng, shape=(4, 4, 3)):
    return LatentGrid(rng.standard_normal(shape))


def test_schedule_shape_and_monotonicity(sched):
    assert sched.T == 1000
    ab = sched.alpha_bar
    assert np.all(np.diff(ab) < 0)
    assert 0 < ab[-1] < ab[0] <= 1


def test_schedule_validation():
    with pytest.raises(ParameterError):
        NoiseSchedule(np.array([0.5, 0.5]))  # not strictly decreasing
    with pytest.raises(ParameterError):
        NoiseSchedule(np.array([1.2, 0.5]))  # out of (0, 1]
    with pytest.raises(ParameterError):
        NoiseSchedule.linear_beta(0)


def test_add_noise_limit_alpha_bar_one():
    sched = NoiseSchedule(np.array([1.0, 0.5]))
    rng = np.random.default_rng(0)
    z0, eps = _rand_latent(rng), _rand_latent(rng)
    zt = add_noise(z0, eps, 1, sched)
    assert np.array_equal(zt.data, z0.data)


def test_add_noise_zero_eps(sched):
    rng = np.random.default_rng(1)
    z0 = _rand_latent(rng)
    zeros = LatentGrid(np.zeros(z0.shape))
    zt = add_noise(z0, zeros, 700, sched)
    assert np.allclose(zt.data, math.sqrt(sched.at(700)) * z0.data, atol=0)


def test_add_noise_matches_elementwise_oracle(sched):
    rng = np.random.default_rng(2)
    z0, eps = _rand_latent(rng), _rand_latent(rng)
    t = 500
    zt = add_noise(z0, eps, t, sched)
    ab = sched.at(t)
    for idx in np.ndindex(z0.shape):
        want = math.sqrt(ab) * z0.data[idx] + math.sqrt(1 - ab) * eps.data[idx]
        assert zt.data[idx] == want


def test_add_noise_t_range(sched):
    rng = np.random.default_rng(3)
    z0, eps = _rand_latent(rng), _rand_latent(rng)
    for t in (0, 1001):
        with pytest.raises(ParameterError):
            add_noise(z0, eps, t, sched)


@pytest.mark.parametrize("t", [1, 250, 500, 1000])
def test_recover_roundtrip(sched, t):
    rng = np.random.default_rng(t)
    z0, eps = _rand_latent(rng), _rand_latent(rng)
    back = recover_z0(add_noise(z0, eps, t, sched), eps, t, sched)
    assert np.max(np.abs(back.data - z0.data)) < 1e-6


def test_recover_zero_eps_hat(sched):
    rng = np.random.default_rng(9)
    zt = _rand_latent(rng)
    zeros = LatentGrid(np.zeros(zt.shape))
    out = recover_z0(zt, zeros, 123, sched)
    assert np.allclose(out.data, zt.data / math.sqrt(sched.at(123)), atol=0)


def test_concat_latents():
    a = LatentGrid(np.full((2, 3, 1), 5.0))
    b = LatentGrid(np.full((2, 3, 1), -1.0))
    out = concat_latents(a, b)
    assert out.shape == (2, 3, 2)
    assert np.all(out.data[:, :, 0] == 5.0) and np.all(out.data[:, :, 1] == -1.0)

    rng = np.random.default_rng(4)
    z = _rand_latent(rng, (4, 4, 3))
    zz = concat_latents(z, LatentGrid(np.zeros((4, 4, 3))))
    assert zz.shape == (4, 4, 6)
    assert np.array_equal(zz.data[:, :, :3], z.data)

    with pytest.raises(ParameterError):
        concat_latents(a, LatentGrid(np.zeros((3, 3, 1))))


def test_losses_zero_at_identity():
    rng = np.random.default_rng(5)
    z = _rand_latent(rng)
    assert noise_loss(z, z) == 0.0
    x = rng.standard_normal((6, 6))
    assert pixel_loss(x, x) == 0.0


def test_anatomy_loss_uniform_logits():
    for k in (2, 5, 9):
        logits = np.zeros((4, 4, k))
        labels = np.random.default_rng(k).integers(0, k, (4, 4))
        assert anatomy_loss(logits, labels) == pytest.approx(math.log(k), abs=1e-9)


def test_losses_match_naive_oracles():
    rng = np.random.default_rng(6)
    a, b = _rand_latent(rng), _rand_latent(rng)
    want = 0.0
    for idx in np.ndindex(a.shape):
        want += (a.data[idx] - b.data[idx]) ** 2
    want /= a.data.size
    assert noise_loss(a, b) == pytest.approx(want, abs=1e-9)

    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    want = float(sum(abs(x[i, j] - y[i, j]) for i in range(5) for j in range(4)) / 20)
    assert pixel_loss(x, y) == pytest.approx(want, abs=1e-9)

    logits = rng.standard_normal((3, 3, 4))
    labels = rng.integers(0, 4, (3, 3))
    total = 0.0
    for i in range(3):
        for j in range(3):
            e = np.exp(logits[i, j] - logits[i, j].max())
            total += -math.log(e[labels[i, j]] / e.sum())
    assert anatomy_loss(logits, labels) == pytest.approx(total / 9, abs=1e-9)


def test_anatomy_loss_validation():
    with pytest.raises(ParameterError):
        anatomy_loss(np.zeros((2, 2, 3)), np.array([[0, 1], [2, 3]]))  # class id 3 of 3
    with pytest.raises(ParameterError):
        anatomy_loss(np.zeros((2, 3)), np.zeros((3,), dtype=int))


def test_composite_loss_values():
    assert composite_loss(0.0, 0.0, 0.0) == 0.0
    assert composite_loss(1.0, 1.0, 1.0) == pytest.approx(2.001, abs=0)
    assert composite_loss(0.7, 5.0, 9.0, lambda_p=0.0, lambda_s=0.0) == 0.7
    with pytest.raises(ParameterError):
        composite_loss(-1.0, 0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_composite_loss_linear_in_components(ln, lp, ls, wp, ws):
    base = composite_loss(ln, lp, ls, wp, ws)
    assert composite_loss(ln + 1.0, lp, ls, wp, ws) == pytest.approx(base + 1.0, rel=1e-12, abs=1e-9)
    assert composite_loss(ln, lp + 1.0, ls, wp, ws) == pytest.approx(base + wp, rel=1e-12, abs=1e-9)
    assert composite_loss(ln, lp, ls + 1.0, wp, ws) == pytest.approx(base + ws, rel=1e-12, abs=1e-9)


def test_variance_preservation(sched):
    rng = np.random.default_rng(8)
    n = 100_000
    z0 = LatentGrid(rng.standard_normal((n // 100, 100, 1)))
    eps = LatentGrid(rng.standard_normal((n // 100, 100, 1)))
    for t in (50, 400, 999):
        zt = add_noise(z0, eps, t, sched)
        assert np.var(zt.data) == pytest.approx(1.0, rel=0.05)
