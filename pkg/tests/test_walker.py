import math

import numpy as np
import pytest
import scipy.linalg as sla

from rcmhomlab import (
    Constant,
    DomainError,
    Geometry,
    IidParetoLower,
    ParameterError,
    Periodic1D,
    RefGridFunction,
    cumulant_spectral,
    exact_a_hom,
    local_times,
    rate_function,
    rescaled_profile,
    sample_environment,
    simulate_vsrw,
)
from rcmhomlab.walker import box_generator_matrix, heat_kernel_histogram


def _cos_potential(pts):
    return np.cos(np.pi * pts[:, 0] / 2)


def test_trajectory_starts_at_x0_with_positive_first_event():
    env = sample_environment(Constant(1.0), Geometry(2, 8), 0)
    traj = simulate_vsrw(env, (1, -2), 10.0, 3)
    assert traj.start == (1, -2)
    assert traj.times[0] > 0.0
    assert np.all(np.diff(traj.times) > 0)


def test_consecutive_sites_differ_by_admissible_steps():
    env = sample_environment(IidParetoLower(1.0), Geometry(2, 8), 1)
    traj = simulate_vsrw(env, (0, 0), 50.0, 5)
    prev = np.array(traj.start)
    for site in traj.sites:
        step = site - prev
        assert np.abs(step).sum() == 1  # nearest-neighbor law
        assert env.conductance(prev, step) > 0
        prev = site


def test_holding_time_mean_matches_the_exponential_law():
    # Constant(1) in d=1: total rate 2, mean holding time 1/2
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    traj = simulate_vsrw(env, (0,), 60000.0, 11)
    holds = np.diff(np.concatenate([[0.0], traj.times]))
    assert holds.size >= 10**5
    se = holds.std(ddof=1) / math.sqrt(holds.size)
    assert abs(holds.mean() - 0.5) <= 3 * se


def test_jump_probabilities_match_the_categorical_law():
    # every even site has right weight 3 and left weight 1
    env = sample_environment(Periodic1D((3.0, 1.0)), Geometry(1, 4), 0)
    traj = simulate_vsrw(env, (0,), 40000.0, 13)
    sites = np.concatenate([[0], traj.sites[:, 0]])
    frm, to = sites[:-1], sites[1:]
    even = frm % 2 == 0
    count = int(even.sum())
    p_right = float(np.mean(to[even] > frm[even]))
    se = math.sqrt(0.75 * 0.25 / count)
    assert count >= 10**4
    assert abs(p_right - 0.75) <= 3 * se


def test_markov_uniform_jump_frequencies_chi_squared():
    env = sample_environment(Constant(1.0), Geometry(2, 8), 0)
    traj = simulate_vsrw(env, (0, 0), 5000.0, 17)
    steps = np.diff(np.vstack([np.array(traj.start), traj.sites]), axis=0)
    labels = steps[:, 0] * 2 + steps[:, 1]  # four distinct values
    _, counts = np.unique(labels, return_counts=True)
    expected = counts.sum() / 4.0
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 <= 11.345  # 1% critical value, 3 degrees of freedom


def test_local_times_without_jumps():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    traj = simulate_vsrw(env, (0,), 10.0, 2)
    t_first = float(traj.times[0])
    lt = local_times(traj, t_first / 2)
    assert lt.durations == {(0,): t_first / 2}


def test_local_times_conservation_and_monotonicity():
    env = sample_environment(IidParetoLower(1.0), Geometry(2, 8), 4)
    traj = simulate_vsrw(env, (0, 0), 200.0, 7)
    for t in (10.0, 50.0, 200.0):
        lt = local_times(traj, t)
        assert abs(lt.total() - t) <= 1e-12 * t
        assert all(v >= 0 for v in lt.durations.values())
    early, late = local_times(traj, 50.0), local_times(traj, 120.0)
    for site, dur in early.durations.items():
        assert late.durations.get(site, 0.0) >= dur - 1e-12


def test_local_times_beyond_horizon_raise():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    traj = simulate_vsrw(env, (0,), 5.0, 1)
    with pytest.raises(DomainError):
        local_times(traj, 6.0)


def test_rescaled_profile_mass_and_single_site():
    env = sample_environment(Constant(1.0), Geometry(1, 4), 0)
    traj = simulate_vsrw(env, (0,), 10.0, 2)
    t_half = float(traj.times[0]) / 2
    prof = rescaled_profile(local_times(traj, t_half), 4.0)
    assert prof.support_ok
    assert prof.integral() == pytest.approx(1.0, rel=1e-12)
    assert prof(np.array([[0.0], [0.1]])).tolist() == [4.0, 4.0]  # alpha^d / t * t
    assert prof(np.array([[0.9]])).tolist() == [0.0]


def test_rescaled_profile_support_flag_is_a_nontrivial_event():
    # short horizon: some walks stay inside alpha_t Q, some leave
    env = sample_environment(Constant(1.0), Geometry(1, 16), 0)
    t, alpha = 10.0, 10.0**0.4
    flags = []
    for seed in range(100):
        traj = simulate_vsrw(env, (0,), t, seed)
        flags.append(rescaled_profile(local_times(traj, t), alpha).support_ok)
    violations = flags.count(False)
    assert 0 < violations < 100
    # mass is conserved whether or not the support condition holds
    assert all(
        rescaled_profile(local_times(simulate_vsrw(env, (0,), t, s), t), alpha).integral()
        == pytest.approx(1.0, rel=1e-12)
        for s in range(5)
    )


def test_cumulant_zero_potential_is_exactly_zero():
    env = sample_environment(Constant(1.0), Geometry(1, 8), 0)
    est = cumulant_spectral(env, None, 1e4, 5.0)
    assert est.value == 0.0


def test_cumulant_constant_potential_shifts_exactly():
    env = sample_environment(Constant(1.0), Geometry(1, 8), 0)
    c = 0.7

    def vconst(pts):
        return np.full(pts.shape[0], c)

    est = cumulant_spectral(env, vconst, 1e4, 5.0)
    assert est.lambda_t_v - est.lambda_t_0 == pytest.approx(c, abs=1e-12)
    assert est.value == pytest.approx(-c, abs=1e-12)


def test_cumulant_monotone_in_the_potential():
    env = sample_environment(Constant(1.0), Geometry(1, 20), 0)

    def v_plus(pts):
        return _cos_potential(pts) + 0.5

    base = cumulant_spectral(env, _cos_potential, 2.5e3, 20.0 / 1.01, tol=1e-10)
    bigger = cumulant_spectral(env, v_plus, 2.5e3, 20.0 / 1.01, tol=1e-10)
    assert bigger.value < base.value


def test_cumulant_validates_and_warns():
    env = sample_environment(Constant(1.0), Geometry(1, 8), 0)
    with pytest.raises(ParameterError):
        cumulant_spectral(env, None, 100.0, 1.5)
    with pytest.warns(UserWarning):
        cumulant_spectral(env, None, 25.0, 4.0)
    with pytest.raises(ParameterError):
        cumulant_spectral(
            sample_environment(IidParetoLower(1.0), Geometry(1, 8), 0), None, 1e4, 5.0
        )


def test_semigroup_matrix_exponential_oracle():
    # 7-site box (alpha_t = 4), d = 1: the log of (P_t 1)(0) matches the
    # spectral formula -(t/alpha^2) lambda_1 + log(psi_1(0) <psi_1, 1>)
    env = sample_environment(Constant(1.0), Geometry(1, 8), 0)
    alpha = 4.0
    mat = box_generator_matrix(env, alpha, V=_cos_potential).toarray()
    vals, vecs = np.linalg.eigh(mat)
    psi = vecs[:, 0] if vecs[3, 0] > 0 else -vecs[:, 0]
    for t in (800.0, 1600.0):
        s = t / alpha**2
        assert s >= 50
        log_direct = float(np.log((sla.expm(-s * mat) @ np.ones(7))[3]))
        log_spectral = -s * vals[0] + math.log(psi[3] * psi.sum())
        assert abs(log_direct - log_spectral) <= 0.01 * abs(log_spectral)


def _normalized_mode(k, m_intervals=512):
    h = 2.0 / m_intervals
    x = -1.0 + h * np.arange(m_intervals + 1)
    g = np.sin(k * np.pi * (x + 1.0) / 2.0)
    g = g / math.sqrt(h * np.sum(g**2))
    return RefGridFunction(h, g)


def test_rate_function_quadratic_scaling_and_exact_value():
    ahom = exact_a_hom(Constant(1.0), 1)  # A = 2, D_eff = 1
    i1 = rate_function(ahom, _normalized_mode(1))
    i2 = rate_function(ahom, _normalized_mode(2))
    assert i2 / i1 == pytest.approx(4.0, rel=1e-3)  # doubled gradient quadruples
    # independent oracle: the exact integral of (pi/2)^2 sin^2 over (-1,1)
    assert i1 == pytest.approx(np.pi**2 / 4, abs=1e-4)


def test_rate_function_checkerboard_is_energy_dominated():
    m = 128
    h = 2.0 / m
    vals = np.zeros(m + 1)
    inner = slice(m // 4, 3 * m // 4)
    vals[inner] = np.where(np.arange(m + 1)[inner] % 2 == 0, 1.0, -1.0)
    vals /= math.sqrt(h * np.sum(vals**2))
    rough = RefGridFunction(h, vals)
    ahom = exact_a_hom(Constant(1.0), 1)
    assert rate_function(ahom, rough) > 100.0


def test_rate_function_validation_and_boundary_sentinel():
    ahom = exact_a_hom(Constant(1.0), 1)
    bad_norm = RefGridFunction(2.0 / 8, np.ones(9))
    with pytest.raises(ParameterError):
        rate_function(ahom, bad_norm)
    m = 64
    h = 2.0 / m
    vals = np.ones(m + 1)  # nonzero on the boundary
    vals = vals / math.sqrt(h * np.sum(vals**2))
    assert rate_function(ahom, RefGridFunction(h, vals)) == math.inf


def test_trajectory_dump_round_trips(tmp_path):
    from rcmhomlab.walker import dump_trajectory

    env = sample_environment(Constant(1.0), Geometry(2, 8), 0)
    traj = simulate_vsrw(env, (1, -1), 20.0, 19)
    path = tmp_path / "walk.csv"
    dump_trajectory(traj, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time,x0,x1"
    assert lines[1] == "0,1,-1"
    assert len(lines) == 2 + traj.times.shape[0]
    t_last, x0, x1 = lines[-1].split(",")
    assert float(t_last) == traj.times[-1]
    assert (int(x0), int(x1)) == tuple(traj.sites[-1])


def test_heat_kernel_histogram_smoke():
    env = sample_environment(Constant(1.0), Geometry(1, 16), 0)
    report = heat_kernel_histogram(env, 4.0, 200, 29)
    assert sum(report["counts"].values()) == 200
    assert report["scaled_min_inside"] >= 0.0
