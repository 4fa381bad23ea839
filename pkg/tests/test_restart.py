import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialctl.restart import (
    RestartConfig,
    RestartConfigError,
    cycle_grid,
    plain_stepper,
    restart_refine,
    self_recur_step,
)
from spatialctl.scheduler import LatentImage, NoiseSchedule

S = NoiseSchedule()


class CountingStepper:
    def __init__(self, schedule=S):
        self.calls = []
        self.schedule = schedule

    def __call__(self, x, t, t_prev, seed):
        self.calls.append((t, t_prev))
        return S.ddim_step(x, np.zeros(x.shape), t, t_prev)


def oracle_stepper(x0):
    """DDIM with the exact noise implied by a known clean image."""

    def eps(x, t):
        a = S.ab(t)
        return (x.data - np.sqrt(a) * x0) / np.sqrt(1 - a)

    return plain_stepper(eps, S, eta=0.0)


def test_defaults_and_bounds():
    cfg = RestartConfig()
    assert (cfg.sigma_tmin, cfg.sigma_tmax, cfg.N, cfg.S_steps, cfg.N_prime) == (1.0, 2.0, 3, 5, 2)
    assert (cfg.tprime_min, cfg.tprime_max) == (0.1, 0.5)
    assert cfg.bounds(S) == (259, 397)


@pytest.mark.parametrize("kw", [
    {"sigma_tmin": 2.0, "sigma_tmax": 1.0},
    {"sigma_tmin": -1.0},
    {"N": -1},
    {"S_steps": 0},
    {"N_prime": 0},
    {"tprime_min": 0.6, "tprime_max": 0.5},
])
def test_config_errors(kw):
    with pytest.raises(RestartConfigError):
        RestartConfig(**kw)


def test_mapped_bounds_collapse_is_error():
    cfg = RestartConfig(sigma_tmin=1.0, sigma_tmax=1.0001)
    with pytest.raises(RestartConfigError):
        cfg.bounds(S)


def test_cycle_grid():
    assert cycle_grid(397, 260, 5) == [397, 370, 342, 315, 287, 260]
    with pytest.raises(RestartConfigError):
        cycle_grid(12, 10, 5)


def test_bypass_returns_input(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 259)
    stepper = CountingStepper()
    assert restart_refine(x, stepper, RestartConfig(N=0), S) is x
    assert stepper.calls == []


def test_call_count_and_trace(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 259)
    stepper, trace = CountingStepper(), []
    out = restart_refine(x, stepper, RestartConfig(), S, seed=0, trace=trace)
    assert len(stepper.calls) == 15
    assert [e for e in trace if e[0] == "perturb"] == [("perturb", 259, 397)] * 3
    assert sum(e[0] == "step" for e in trace) == 15
    assert stepper.calls[:5] == list(zip(cycle_grid(397, 259, 5)[:-1], cycle_grid(397, 259, 5)[1:]))
    assert out.t == 259


def test_explicit_t_min_and_tag_check(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 260)
    out = restart_refine(x, CountingStepper(), RestartConfig(), S, t_min=260)
    assert out.t == 260
    with pytest.raises(ValueError):
        restart_refine(x, CountingStepper(), RestartConfig(), S)
    with pytest.raises(RestartConfigError):
        restart_refine(x.retag(500), CountingStepper(), RestartConfig(), S, t_min=500)


def test_oracle_fixed_point(rng):
    x0 = rng.uniform(-1, 1, (8, 8, 3))
    eps = rng.normal(size=x0.shape)
    x = S.forward_diffuse(LatentImage(x0), 259, eps)
    stepper = oracle_stepper(x0)
    cfg = RestartConfig(N=1)
    est = lambda z: S.estimate_clean(z, (z.data - np.sqrt(S.ab(z.t)) * x0) / np.sqrt(1 - S.ab(z.t))).data
    prev = est(x)
    for cycle in range(3):
        x = restart_refine(x, stepper, cfg, S, seed=cycle)
        cur = est(x)
        assert np.abs(cur - prev).max() <= 1e-4
        prev = cur
    assert np.abs(prev - x0).max() <= 1e-4


def test_oracle_fixed_point_full_run(rng):
    x0 = rng.uniform(-1, 1, (8, 8, 3))
    x = S.forward_diffuse(LatentImage(x0), 259, rng.normal(size=x0.shape))
    out = restart_refine(x, oracle_stepper(x0), RestartConfig(), S, seed=3)
    # final DDIM from t_min with the oracle recovers the clean image
    final = oracle_stepper(x0)(out, 259, 0, None)
    assert np.abs(final.data - x0).max() <= 1e-4


def test_restart_seeded_determinism(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 259)
    a = restart_refine(x, CountingStepper(), RestartConfig(), S, seed=5)
    b = restart_refine(x, CountingStepper(), RestartConfig(), S, seed=5)
    c = restart_refine(x, CountingStepper(), RestartConfig(), S, seed=6)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)


def test_recurrence_window():
    cfg = RestartConfig()
    inside = [t for t in S.timesteps(50)[:-1] if cfg.recurs_at(t, S)]
    assert inside[0] == 900 and inside[-1] == 500 and len(inside) == 21
    assert not RestartConfig(N_prime=1).recurs_at(700, S)


def test_self_recur_plain_outside_window(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 200)
    stepper = CountingStepper()
    out = self_recur_step(x, 200, 180, stepper, RestartConfig(), S, seed=1)
    assert stepper.calls == [(200, 180)] and out.t == 180


def test_self_recur_nprime_one_is_plain(rng):
    x = LatentImage(rng.normal(size=(4, 4, 3)), 700)
    stepper = CountingStepper()
    self_recur_step(x, 700, 680, stepper, RestartConfig(N_prime=1), S, seed=1)
    assert stepper.calls == [(700, 680)]


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4))
def test_self_recur_multiplies_calls_in_window(n_prime):
    x = LatentImage(np.zeros((2, 2, 1)), 700)
    stepper = CountingStepper()
    out = self_recur_step(x, 700, 680, stepper, RestartConfig(N_prime=n_prime), S, seed=0)
    assert stepper.calls == [(700, 680)] * n_prime
    assert out.t == 680


def test_self_recur_trajectory_call_doubling():
    cfg = RestartConfig()
    grid = S.timesteps(50)
    stepper = CountingStepper()
    x = LatentImage(np.zeros((2, 2, 1)), 1000)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        x = self_recur_step(x, t, t_prev, stepper, cfg, S, seed=t)
    assert len(stepper.calls) == 50 + 21
