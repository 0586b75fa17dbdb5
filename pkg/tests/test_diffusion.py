import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from inpaint_swap.diffusion import (
    NoiseSchedule,
    NonFiniteError,
    ScheduleError,
    TimestepError,
    build_schedule,
    ddim_predict_x0,
    ddim_sample,
    ddim_step,
    forward_diffuse,
    make_step_schedule,
    true_noise,
)

SCALAR = NoiseSchedule.from_alphas([0.81, 0.25 / 0.81])  # alpha_bar = [0.81, 0.25]


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alphas, [0.5])
    np.testing.assert_allclose(s.alpha_bars, [0.5])


def test_default_first_alpha_bar():
    s = build_schedule()
    assert s.T == 1000
    assert s.alpha_bar(1) == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bar(0) == 1.0


def test_two_step_hand_oracle():
    s = NoiseSchedule.from_alphas([0.9, 0.8])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)


def test_schedule_invariants():
    s = build_schedule()
    ab = s.alpha_bars
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab <= 1))
    np.testing.assert_array_equal(ab[1:], ab[:-1] * s.alphas[1:])
    assert np.sqrt(ab[-1]) < 0.01


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


def test_schedule_is_immutable():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.5


def test_forward_scalar_oracle():
    out = forward_diffuse(torch.tensor([1.0], dtype=torch.float64), 2, torch.tensor([2.0], dtype=torch.float64), SCALAR)
    assert out.item() == pytest.approx(0.5 + np.sqrt(0.75) * 2.0, abs=1e-12)
    assert out.item() == pytest.approx(2.2320508, abs=1e-7)


def test_forward_limits():
    s = build_schedule()
    z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    # alpha_bar_1 = 0.9999: output close to z0
    assert torch.allclose(forward_diffuse(z0, 1, eps, s), z0, atol=0.05)
    out = forward_diffuse(z0, 500, torch.zeros_like(z0), s)
    assert torch.allclose(out, np.sqrt(s.alpha_bar(500)) * z0)


def test_forward_errors():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        forward_diffuse(torch.zeros(2), 1, torch.zeros(3), s)
    for t in (0, 11):
        with pytest.raises(TimestepError):
            forward_diffuse(torch.zeros(2), t, torch.zeros(2), s)


def test_true_noise_inverse_and_scalar():
    s = build_schedule()
    z0 = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn_like(z0)
    t = torch.tensor([1, 10, 500, 1000])
    zt = forward_diffuse(z0, t, eps, s)
    assert torch.allclose(true_noise(zt, z0, t, s), eps, atol=1e-6)
    assert torch.allclose(true_noise(np.sqrt(s.alpha_bar(7)) * z0, z0, 7, s), torch.zeros_like(z0), atol=1e-12)
    out = true_noise(torch.tensor([2.2320508], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), 2, SCALAR)
    assert out.item() == pytest.approx(2.0, abs=1e-6)


def test_predict_x0_scalar_and_limit():
    out = ddim_predict_x0(torch.tensor([2.2320508], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64), 2, SCALAR)
    assert out.item() == pytest.approx(1.0, abs=1e-6)
    s = build_schedule()
    z = torch.randn(3, dtype=torch.float64)
    assert torch.allclose(ddim_predict_x0(z, torch.randn(3, dtype=torch.float64), 1, s), z, atol=0.05)


def test_ddim_step_rules():
    s = build_schedule()
    z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    zt = forward_diffuse(z0, 600, eps, s)
    assert torch.equal(ddim_step(zt, eps, 600, 0, s), ddim_predict_x0(zt, eps, 600, s))
    assert torch.allclose(ddim_step(zt, eps, 600, 200, s), forward_diffuse(z0, 200, eps, s), atol=1e-10)
    with pytest.raises(TimestepError):
        ddim_step(zt, eps, 600, 600, s)


def test_ddim_step_scalar_oracle():
    out = ddim_step(torch.tensor([2.2320508], dtype=torch.float64), torch.tensor([2.0], dtype=torch.float64), 2, 1, SCALAR)
    assert out.item() == pytest.approx(0.9 * 1.0 + np.sqrt(0.19) * 2.0, abs=1e-6)
    assert out.item() == pytest.approx(1.7717798, abs=1e-6)


def test_step_schedules():
    assert make_step_schedule(1000, 4).steps == (1000, 750, 500, 250)
    assert make_step_schedule(1000, 4).pairs[-1] == (250, 0)
    assert make_step_schedule(10, 1).pairs == [(10, 0)]
    s50 = make_step_schedule(1000, 50).steps
    assert len(s50) == 50 and set(np.diff(s50)) == {-20}
    with pytest.raises(ValueError):
        make_step_schedule(10, 0)
    with pytest.raises(ValueError):
        make_step_schedule(10, 11)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 2000), data=st.data())
def test_step_schedule_properties(T, data):
    n = data.draw(st.integers(1, T))
    steps = make_step_schedule(T, n).steps
    assert len(steps) == n
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert steps[-1] >= 1 and T - steps[0] <= max(1, T // n)
    if n > 1:
        gaps = -np.diff(steps)
        assert gaps.max() - gaps.min() <= 1


def _oracle(z0, sched):
    return lambda z, t: true_noise(z, z0, t, sched)


@pytest.mark.parametrize("n", [1, 5, 50])
def test_oracle_sampling_recovers_z0(n):
    s = build_schedule()
    gen = torch.Generator().manual_seed(n)
    z0 = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    zT = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    out, traj = ddim_sample(_oracle(z0, s), zT, make_step_schedule(s.T, n), s)
    assert (out - z0).abs().max() < 1e-4
    assert [t for t, _ in traj] == list(make_step_schedule(s.T, n).steps)


def test_single_step_sampling_equals_predict_x0():
    s = build_schedule()
    z = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    fn = lambda zz, t: 0.3 * zz
    out, _ = ddim_sample(fn, z, make_step_schedule(s.T, 1), s)
    assert torch.equal(out, ddim_predict_x0(z, 0.3 * z, s.T, s))


def test_sampling_determinism_and_nonfinite():
    s = build_schedule()
    lin = torch.nn.Conv2d(3, 3, 1).double()
    z = torch.randn(1, 3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    a = ddim_sample(lambda zz, t: lin(zz), z, make_step_schedule(s.T, 10), s)
    b = ddim_sample(lambda zz, t: lin(zz), z, make_step_schedule(s.T, 10), s)
    assert all(torch.equal(x, y) for (_, x), (_, y) in zip(a[1], b[1]))
    with pytest.raises(NonFiniteError):
        ddim_sample(lambda zz, t: zz * float("nan"), z, make_step_schedule(s.T, 3), s)


def test_differentiable_flag():
    s = build_schedule()
    lin = torch.nn.Conv2d(3, 3, 1).double()
    z = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    out, _ = ddim_sample(lambda zz, t: lin(zz), z, make_step_schedule(s.T, 4), s, differentiable=True)
    out.sum().backward()
    assert lin.weight.grad is not None and lin.weight.grad.abs().sum() > 0
    out2, _ = ddim_sample(lambda zz, t: lin(zz), z, make_step_schedule(s.T, 4), s)
    assert not out2.requires_grad


def test_round_trip_1000_triples():
    s = build_schedule()
    rng = np.random.default_rng(0)
    z0 = torch.as_tensor(rng.uniform(0.05, 1.0, size=(1000, 3, 4, 4)) * rng.choice([-1, 1], size=(1000, 3, 4, 4)))
    eps = torch.as_tensor(rng.standard_normal((1000, 3, 4, 4)))
    t = torch.as_tensor(rng.integers(1, 1001, size=1000))
    rec = ddim_predict_x0(forward_diffuse(z0, t, eps, s), eps, t, s)
    rel = ((rec - z0).abs() / z0.abs()).max().item()
    assert rel <= 1e-5


def test_scaled_linear_schedule():
    sched = build_schedule(1000, 0.00085, 0.012, "scaled_linear")
    betas = (np.linspace(0.00085**0.5, 0.012**0.5, 1000) ** 2)
    np.testing.assert_allclose(sched.betas, betas, rtol=1e-12, atol=1e-15)
    assert sched.betas[0] == pytest.approx(0.00085) and sched.betas[-1] == pytest.approx(0.012)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.1, 0.2, "cosine")
