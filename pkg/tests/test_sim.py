from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insurer_control.model import (
    ClaimModel,
    Constant,
    Deterministic,
    Exponential,
    ModelSpec,
    MomentDomainError,
    OUDrift,
    UtilitySpec,
)
from insurer_control.pde import DomainError, GridSpec
from insurer_control.sim import (
    P,
    P_HAT,
    Measure,
    MeasureTag,
    PathBundle,
    PathConfig,
    RunningStats,
    coarsen,
    exponential_martingale,
    girsanov_weight,
    simulate_claims,
    simulate_factor,
    simulate_wealth,
    substreams,
    wealth_on_bundle,
)


def ou_model(kappa=1.0, sf=0.3, r=0.02, mu=0.08):
    return ModelSpec(1, 1, Constant(r), Constant([mu]), Constant([[0.2]]), OUDrift(kappa, [0.0]),
                     Constant([[sf]]), max(r, 0.0))


def test_pathconfig_guards():
    with pytest.raises(ValueError):
        PathConfig(0)
    with pytest.raises(ValueError):
        PathConfig(3)
    with pytest.raises(ValueError):
        PathConfig(4, chunk_size=3)
    with pytest.raises(ValueError):
        PathConfig(4, dt=0.0)
    with pytest.raises(ValueError):
        PathConfig(4, seed=-1)
    with pytest.raises(ValueError):
        PathConfig(4, dt=0.3).steps(1.0)
    assert PathConfig(4).steps(1.0) == 500
    assert PathConfig(25, antithetic=False, chunk_size=10).chunks() == [(0, 0, 10), (1, 10, 10), (2, 20, 5)]


def test_measure_tag_requirements(surf0):
    with pytest.raises(ValueError):
        MeasureTag(Measure.P_BAR)
    with pytest.raises(ValueError):
        MeasureTag(Measure.P_HAT_N)
    assert MeasureTag("P_bar", surf0.a).kind is Measure.P_BAR


def test_factor_without_noise_stays_put():
    m = ModelSpec(1, 1, Constant(0.02), Constant([0.08]), Constant([[0.2]]), Constant([0.0]),
                  Constant([[1e-300]]), 0.02)
    b = simulate_factor(m, P, 0.0, [0.4], 1.0, PathConfig(20, dt=0.1, seed=1))
    assert np.all(b.Y == 0.4)


def test_ou_moments_under_p():
    m = ou_model(kappa=1.0, sf=0.3)
    b = simulate_factor(m, P, 0.0, [0.5], 1.0, PathConfig(40000, dt=0.01, seed=7, antithetic=False))
    yT = b.Y[:, -1, 0]
    # Euler OU: mean (1 - dt)^N y0, variance sf^2 dt sum (1 - dt)^{2j}
    q = 0.99
    mean = q**100 * 0.5
    var = 0.09 * 0.01 * (1 - q**200) / (1 - q**2)
    se = math.sqrt(var / yT.size)
    assert abs(yT.mean() - mean) < 4 * se
    assert yT.var() == pytest.approx(var, rel=0.03)


def test_p_hat_drift_shift():
    m = ou_model()
    cfg = PathConfig(2000, dt=0.01, seed=3)
    bp = simulate_factor(m, P, 0.0, [0.0], 1.0, cfg)
    bh = simulate_factor(m, P_HAT, 0.0, [0.0], 1.0, cfg)
    assert np.array_equal(bp.dW, bh.dW)
    # same noise, so the difference is deterministic: -0.09 * sum (1 - dt)^j dt
    d = bh.Y[:, -1, 0] - bp.Y[:, -1, 0]
    want = -0.09 * 0.01 * (1 - 0.99**100) / 0.01
    np.testing.assert_allclose(d, want, rtol=1e-10)


def test_claim_counts_and_sizes():
    cl = ClaimModel(2.0, Exponential(10.0))
    rng = np.random.default_rng(5)
    ptr, times, sizes = simulate_claims(cl, 0.0, 1.5, 50000, rng)
    counts = np.diff(ptr)
    assert counts.mean() == pytest.approx(3.0, abs=4 * math.sqrt(3.0 / 50000))
    assert counts.var() == pytest.approx(3.0, rel=0.03)
    assert sizes.mean() == pytest.approx(0.1, rel=0.01)
    assert np.all((times > 0) & (times <= 1.5))
    for i in range(20):
        seg = times[ptr[i]:ptr[i + 1]]
        assert np.all(np.diff(seg) > 0)


def test_no_claims_when_rate_zero():
    ptr, times, sizes = simulate_claims(ClaimModel(0.0, Exponential(10.0)), 0, 1, 7, np.random.default_rng())
    assert ptr.tolist() == [0] * 8 and times.size == 0 == sizes.size


def test_wealth_zero_rate_exact():
    m = ou_model(r=0.0, mu=0.05)
    cl = ClaimModel(1.0, Deterministic(0.2))
    u = UtilitySpec(alpha=1.0, T=1.0, c=1.5, x0=2.0)
    b = simulate_wealth(m, cl, u, lambda t, x, y: np.full((x.size, 1), 0.7), PathConfig(200, dt=0.01, seed=2))
    W = b.dW[:, :, 0].sum(axis=1)
    want = 2.0 + 1.5 + 0.7 * 0.05 + 0.7 * 0.2 * W - 0.2 * b.jump_counts
    np.testing.assert_allclose(b.X[:, -1], want, atol=1e-12)


def test_wealth_riskless_euler_recursion():
    m = ou_model(r=0.05)
    cl = ClaimModel(0.0, Exponential(10.0))
    u = UtilitySpec(alpha=1.0, T=1.0, c=1.0, x0=1.0)
    b = simulate_wealth(m, cl, u, lambda t, x, y: np.zeros((x.size, 1)), PathConfig(4, dt=0.01, seed=0))
    q = 1.0 + 0.05 * 0.01
    want = q**100 * 1.0 + 1.0 * 0.01 * (q**100 - 1) / (q - 1)
    np.testing.assert_allclose(b.X[:, -1], want, rtol=1e-13)
    exact = math.exp(0.05) + (math.exp(0.05) - 1) / 0.05
    assert abs(b.X[0, -1] - exact) < 1e-3


def test_martingale_constant_kernel():
    m = ou_model()
    cl = ClaimModel(1.0, Exponential(10.0))
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(20000, dt=0.01, seed=4), cl)
    res = exponential_martingale(b, lambda t, x, y: np.full((y.shape[0], 1), 0.5), 2.0, cl)
    assert abs(res.mean - 1.0) < 3 * res.std_error
    log_eps = np.log(res.values)
    jumps = np.array([b.jump_sizes[b.jump_ptr[i]:b.jump_ptr[i + 1]].sum() for i in range(b.n_paths)])
    want = -0.5 * b.dW[:, :, 0].sum(axis=1) - 0.125 + 2.0 * jumps - (10 / 8 - 1)
    np.testing.assert_allclose(log_eps, want, atol=1e-10)


def test_martingale_trivial_is_one():
    m = ou_model()
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(10, dt=0.1), None)
    res = exponential_martingale(b, None, None, ClaimModel(0.0, Exponential(10.0)))
    assert np.all(res.values == 1.0) and res.std_error == 0.0


def test_martingale_rejects_non_p_paths():
    b = simulate_factor(ou_model(), P_HAT, 0.0, [0.0], 1.0, PathConfig(4, dt=0.1))
    with pytest.raises(ValueError):
        exponential_martingale(b, None, None, ClaimModel(0.0, Exponential(10.0)))


def test_girsanov_weight_reproduces_p_hat():
    m = ou_model()
    cfg = PathConfig(40000, dt=0.01, seed=11)
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, cfg)
    lw = girsanov_weight(b, P_HAT, m)
    w = np.exp(lw)
    yT = b.Y[:, -1, 0]
    assert abs(w.mean() - 1.0) < 4 * w.std() / math.sqrt(w.size / 2)
    want = -0.09 * (1 - 0.99**100)  # mean of Y_T under P_hat (Euler)
    est = np.mean(w * yT)
    assert abs(est - want) < 4 * np.std(w * yT) / math.sqrt(w.size / 2)
    with pytest.raises(ValueError):
        girsanov_weight(b, P, m)
    with pytest.raises(ValueError):
        girsanov_weight(b, MeasureTag(Measure.P_HAT_N, 1.0), m)


def test_p_hat_n_constant_tilt_claims():
    m = ou_model()
    cl = ClaimModel(1.0, Exponential(10.0))
    b = simulate_factor(m, MeasureTag(Measure.P_HAT_N, 2.0), 0.0, [0.0], 1.0, PathConfig(40000, dt=0.01, seed=8), cl)
    # tilted intensity lambda * beta / (beta - u) and sizes Exp(beta - u)
    assert b.jump_counts.mean() == pytest.approx(1.25, rel=0.02)
    assert b.jump_sizes.mean() == pytest.approx(1 / 8, rel=0.02)
    with pytest.raises(MomentDomainError):
        simulate_factor(m, MeasureTag(Measure.P_HAT_N, 10.0), 0.0, [0.0], 1.0, PathConfig(4, dt=0.1), cl)


def test_same_seed_same_paths_and_chunk_independence():
    m = ou_model()
    cl = ClaimModel(1.0, Exponential(10.0))
    a = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(40, dt=0.05, seed=9, chunk_size=10), cl)
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(40, dt=0.05, seed=9, chunk_size=10), cl)
    c = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(40, dt=0.05, seed=10, chunk_size=10), cl)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.jump_times, b.jump_times)
    assert not np.array_equal(a.Y, c.Y)
    first = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(10, dt=0.05, seed=9, chunk_size=10), cl)
    assert np.array_equal(first.Y, a.Y[:10])


def test_antithetic_pairs():
    m = ou_model()
    cl = ClaimModel(1.0, Exponential(10.0))
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(200, dt=0.05, seed=1), cl)
    assert np.array_equal(b.dW[0::2], -b.dW[1::2])
    # OU is linear with zero mean, so pair averages vanish
    np.testing.assert_allclose(b.Y[0::2] + b.Y[1::2], 0.0, atol=1e-14)
    counts = b.jump_counts
    assert np.array_equal(counts[0::2], counts[1::2])


def test_diffusion_and_jump_streams_independent():
    rw, rj = substreams(123, 0)
    x = rw.standard_normal(20000)
    z = rj.standard_normal(20000)
    assert abs(np.corrcoef(x, z)[0, 1]) < 4 / math.sqrt(20000)
    rw2, _ = substreams(123, 1)
    assert not np.array_equal(x[:5], rw2.standard_normal(5))


def test_binary_and_csv_roundtrip(tmp_path):
    m = ou_model()
    cl = ClaimModel(1.0, Exponential(10.0))
    u = UtilitySpec(alpha=1.0, T=1.0, c=1.5)
    b = simulate_wealth(m, cl, u, lambda t, x, y: np.full((x.size, 1), 0.3), PathConfig(6, dt=0.25, seed=2))
    b.log_weight = np.linspace(-1, 1, 6)
    path = tmp_path / "b.bin"
    b.to_binary(path)
    back = PathBundle.from_binary(path)
    for name in ("times", "dW", "Y", "jump_ptr", "jump_times", "jump_sizes", "log_weight", "X"):
        assert np.array_equal(getattr(b, name), getattr(back, name)), name
    assert back.measure is b.measure and back.antithetic
    csvp = tmp_path / "b.csv"
    b.to_csv(csvp)
    rows = csvp.read_text().splitlines()
    assert rows[0] == "path,step,t,y1,dw1,n_jumps,jump_sum,x,log_weight"
    assert len(rows) == 1 + 6 * 5
    assert float(rows[5].split(",")[3]) == b.Y[0, 4, 0]
    with pytest.raises(ValueError):
        (tmp_path / "junk").write_bytes(b"nope")
        PathBundle.from_binary(tmp_path / "junk")


def test_clamp_budget_aborts(m1, utility):
    small = GridSpec(((-0.2, 0.2),), n_y=21, n_t=20)
    from insurer_control.pde import a_from_a_hat, solve_a_hat
    a = a_from_a_hat(solve_a_hat(m1, utility, small), 1.0)
    with pytest.raises(DomainError, match="domain too small"):
        simulate_factor(m1, MeasureTag(Measure.P_BAR, a), 0.0, [0.0], 1.0, PathConfig(200, dt=0.01, seed=0))


def test_coarsen_adds_increments():
    m = ou_model()
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(8, dt=0.05, seed=0))
    c = coarsen(b, m)
    assert c.steps == 10
    np.testing.assert_allclose(c.dW.sum(axis=1), b.dW.sum(axis=1), atol=1e-14)
    np.testing.assert_array_equal(coarsen(b).Y, b.Y[:, ::2])
    with pytest.raises(ValueError):
        coarsen(coarsen(c))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=60), st.integers(1, 59))
def test_running_stats_merge(values, cut):
    v = np.array(values)
    cut = min(cut, v.size - 1)
    s = RunningStats().add(v[:cut]).merge(RunningStats().add(v[cut:]))
    assert s.mean == pytest.approx(v.mean(), abs=1e-9 * (1 + np.abs(v).max()))
    assert s.var == pytest.approx(v.var(ddof=1), rel=1e-7, abs=1e-6)


def test_running_stats_constant_exact():
    s = RunningStats().add(np.full(7, 0.1)).add(np.full(5, 0.1))
    assert s.mean == 0.1 and s.m2 == 0.0 and s.se == 0.0
    s = RunningStats()
    for _ in range(10):
        s.add(np.full(5000, 1.0202013400267558))
    assert s.mean == 1.0202013400267558 and s.se == 0.0


def test_wealth_on_bundle_keeps_noise():
    m = ou_model()
    u = UtilitySpec(alpha=1.0, T=1.0, c=1.5)
    b = simulate_factor(m, P, 0.0, [0.0], 1.0, PathConfig(4, dt=0.1, seed=0), ClaimModel(1.0, Exponential(10.0)))
    w = wealth_on_bundle(m, ClaimModel(1.0, Exponential(10.0)), u, lambda t, x, y: np.zeros((x.size, 1)), b)
    assert w.dW is b.dW and w.X.shape == (4, 11)
