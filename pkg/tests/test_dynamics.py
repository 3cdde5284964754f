"""Open-system dynamics: bath model, family tables, master-equation evolution,
readout sampling, and the planar-rotor comparator.

Oracles: the Ohmic spectral function obeys detailed balance analytically; a
two-level problem relaxes to a closed-form Gibbs state; classical single-flip
dynamics on two qubits is checked against a hand-built 4x4 generator
exponential.  The iterative table path is cross-checked against dense
diagonalization on a 12-qubit ring.
"""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anneal_range.dynamics import (
    DEFAULT_ETA_HIGH,
    DEFAULT_ETA_LOW,
    BasisMode,
    BathModel,
    DynamicsError,
    FamilyTable,
    OutcomeHistogram,
    PopulationState,
    build_family_table,
    default_eta,
    evolve,
    sample_outcomes,
    spectral_density,
    svmc_evolve,
    tracked_family,
    transition_rates,
)
from anneal_range.ising import IsingProblem, code_to_config, state_code
from anneal_range.schedule import (
    Device,
    Waveform,
    reverse_waveform,
    synthetic_schedule,
)
from anneal_range.spectrum import assemble, lowest_eigenpairs

TWO_PI = 2.0 * np.pi

CHAIN4 = IsingProblem(4, ((0, 1, -1.0), (1, 2, -1.0), (2, 3, -1.0)),
                      (-0.5, 0.0, 0.0, -0.25))
CHAIN4_START = (1, 1, 1, -1)


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return str(tmp_path_factory.mktemp("family-cache"))


@pytest.fixture(scope="module")
def table4(cache):
    return build_family_table(CHAIN4, CHAIN4_START, cache_override=cache)


@pytest.fixture(scope="module")
def sched():
    return synthetic_schedule(Device.LOW_NOISE)


# ---------------------------------------------------------------- bath model


def test_bath_model_validation():
    BathModel(eta=0.0)   # decoupled limit is allowed
    with pytest.raises(ValueError):
        BathModel(eta=-1e-6)
    with pytest.raises(ValueError):
        BathModel(eta=1e-3, temperature_ghz=0.0)
    with pytest.raises(ValueError):
        BathModel(eta=1e-3, temperature_ghz=0.26, cutoff_ghz=0.1)
    with pytest.raises(ValueError):
        BathModel(eta=1e-3, basis_mode="EnergyEigenbasis")


def test_bath_model_defaults():
    bath = BathModel(eta=2e-3)
    assert bath.temperature_ghz == 0.26
    assert bath.cutoff_ghz == 100.0
    assert bath.basis_mode is BasisMode.ENERGY_EIGENBASIS


def test_default_eta_per_device():
    assert default_eta(Device.LOW_NOISE) == DEFAULT_ETA_LOW
    assert default_eta(Device.HIGH_NOISE) == DEFAULT_ETA_HIGH
    assert DEFAULT_ETA_HIGH / DEFAULT_ETA_LOW == pytest.approx(5.0)


def test_spectral_density_zero_frequency_limit():
    # S(0) equals the angular temperature exactly
    assert spectral_density(0.0, 0.26, 100.0) == pytest.approx(
        TWO_PI * 0.26, rel=1e-12)


def test_spectral_density_shapes():
    val = spectral_density(1.7)
    assert isinstance(val, float)
    arr = spectral_density(np.linspace(-5, 5, 11))
    assert arr.shape == (11,)
    assert (arr > 0).all()


@given(w=st.floats(min_value=-80.0, max_value=80.0),
       t=st.floats(min_value=0.1, max_value=5.0))
@settings(max_examples=60, deadline=None)
def test_spectral_density_detailed_balance(w, t):
    s_plus = spectral_density(w, t, 100.0)
    s_minus = spectral_density(-w, t, 100.0)
    assert s_plus > 0.0 and s_minus > 0.0
    assert s_plus / s_minus == pytest.approx(np.exp(w / (TWO_PI * t)), rel=1e-9)


def test_spectral_density_huge_quantum_underflows():
    # absorption of a quantum far beyond the temperature is suppressed
    assert spectral_density(-1e5, 0.26, 100.0) == 0.0


# ----------------------------------------------------------- transition rates


@pytest.fixture(scope="module")
def eigsys2():
    prob = IsingProblem(2, ((0, 1, -1.0),), (-0.3, 0.1))
    return lowest_eigenpairs(assemble(prob, 0.4), 4)


def test_transition_rates_kms(eigsys2):
    bath = BathModel(eta=1e-3)
    g = transition_rates(eigsys2, bath, b_scale=5.0)
    assert np.allclose(np.diag(g), 0.0)
    lam = eigsys2.eigenvalues
    t_ang = TWO_PI * bath.temperature_ghz
    for i in range(4):
        for j in range(4):
            if i == j or g[j, i] == 0.0:
                continue
            w = TWO_PI * 5.0 * (lam[i] - lam[j])
            assert g[i, j] / g[j, i] == pytest.approx(np.exp(w / t_ang),
                                                      rel=1e-9)


def test_transition_rates_linear_in_eta(eigsys2):
    g1 = transition_rates(eigsys2, BathModel(eta=1e-3), b_scale=5.0)
    g3 = transition_rates(eigsys2, BathModel(eta=3e-3), b_scale=5.0)
    assert np.allclose(g3, 3.0 * g1, rtol=1e-12)


def test_transition_rates_zero_eta(eigsys2):
    assert not transition_rates(eigsys2, BathModel(eta=0.0), b_scale=5.0).any()


# ----------------------------------------------------------- tracked family


def test_tracked_family_level_closure():
    codes, energies = tracked_family(CHAIN4, CHAIN4_START)
    assert codes.size == 5          # ground, first excited, full start level
    assert energies[-1] == pytest.approx(CHAIN4.energy(CHAIN4_START))
    assert state_code(CHAIN4_START) in codes


def test_tracked_family_explicit_m():
    codes, energies = tracked_family(CHAIN4, CHAIN4_START, m=7)
    assert codes.size == 7
    assert (np.diff(energies) >= -1e-12).all()
    with pytest.raises(ValueError):
        tracked_family(CHAIN4, CHAIN4_START, m=2)
    with pytest.raises(ValueError):
        tracked_family(CHAIN4, CHAIN4_START, m=17)


# ------------------------------------------------------------- family table


def test_table_row0_anchors(table4):
    codes, energies = tracked_family(CHAIN4, CHAIN4_START)
    assert table4.gammas[0] == 0.0
    assert np.allclose(table4.lambdas[0], energies, atol=1e-12)
    assert np.allclose(table4.m2[0], 4.0 * np.eye(5), atol=1e-12)
    assert np.allclose(table4.hams[0], np.diag(energies), atol=1e-12)
    assert np.allclose(table4.defect[0], 0.0, atol=1e-12)
    assert (table4.codes == codes).all()
    # row-0 sigma-z profiles are the anchor configurations themselves
    for i, code in enumerate(codes):
        assert np.allclose(table4.zavg[0, i], code_to_config(int(code), 4))


def test_table_physical_bounds(table4):
    # the ground sheet never crosses anything, so its energy falls
    # monotonically with Gamma; overlaps stay in [0, n] with the remainder
    # accounted as defect
    assert np.isfinite(table4.lambdas).all()
    assert (np.diff(table4.lambdas[:, 0]) <= 1e-12).all()
    assert (table4.m2 >= -1e-12).all()
    total = table4.m2.sum(axis=2) + table4.out_m2.sum(axis=2) + table4.defect
    assert (total <= 4.0 + 1e-9).all()
    assert (table4.defect >= 0.0).all()


def test_table_row_interpolation(table4):
    node = table4.row(table4.gammas[3])
    assert np.allclose(node.lam, table4.lambdas[3], atol=1e-12)
    assert np.allclose(node.ham, table4.hams[3], atol=1e-12)
    g_mid = 0.5 * (table4.gammas[3] + table4.gammas[4])
    mid = table4.row(g_mid)
    lo, hi = table4.lambdas[3], table4.lambdas[4]
    assert (mid.lam >= np.minimum(lo, hi) - 1e-12).all()
    assert (mid.lam <= np.maximum(lo, hi) + 1e-12).all()


def test_table_row_out_of_range(table4):
    with pytest.raises(DynamicsError):
        table4.row(table4.gamma_max * 1.5)
    with pytest.raises(DynamicsError):
        table4.row(-0.2)


def test_table_cache_roundtrip(table4, cache, tmp_path):
    path = tmp_path / "copy.npz"
    table4.save(path)
    loaded = FamilyTable.load(path)
    assert np.array_equal(loaded.gammas, table4.gammas)
    assert np.array_equal(loaded.lambdas, table4.lambdas)
    assert np.array_equal(loaded.m2, table4.m2)
    assert np.array_equal(loaded.hams, table4.hams)
    assert np.array_equal(loaded.zavg, table4.zavg)
    assert np.array_equal(loaded.out_lambdas, table4.out_lambdas)
    assert loaded.meta["n_qubits"] == 4


def test_table_memoized(table4, cache):
    again = build_family_table(CHAIN4, CHAIN4_START, cache_override=cache)
    assert again is table4


def test_table_disk_reload(table4, cache):
    from anneal_range import dynamics as dyn
    dyn._TABLE_MEMO.clear()
    try:
        again = build_family_table(CHAIN4, CHAIN4_START, cache_override=cache)
    finally:
        dyn._TABLE_MEMO[table4.problem_key] = table4
    assert again is not table4
    assert np.array_equal(again.lambdas, table4.lambdas)


def test_iterative_path_matches_dense():
    # 12 qubits forces the block iteration (dim 4096 > dense threshold)
    n = 12
    edges = tuple((min(i, (i + 1) % n), max(i, (i + 1) % n), -1.0)
                  for i in range(n))
    fields = tuple(-0.6 if i % 3 == 0 else (-0.2 if i % 3 == 1 else 0.1)
                   for i in range(n))
    prob = IsingProblem(n, edges, fields)
    # a start a few levels up keeps the family small but non-trivial
    from anneal_range.ising import enumerate_states
    enum = enumerate_states(prob)
    start = code_to_config(int(enum.codes[8]), n)
    table = build_family_table(prob, start, cache_override=None, force=True,
                               grid_points=12, gamma_max=0.3)
    for gi in (3, 8):
        g = table.gammas[gi]
        ev = np.linalg.eigvalsh(assemble(prob, g).matrix.toarray())
        dev = np.abs(table.lambdas[gi][:, None] - ev[None, :]).min(axis=1)
        assert dev.max() < 1e-6
    assert np.allclose(table.lambdas[0], enum.energies[:table.m], atol=1e-12)


# ---------------------------------------------------------------- evolution


def test_evolve_requires_start(sched):
    wf = reverse_waveform(0.6, 5.0)
    with pytest.raises(ValueError):
        evolve(CHAIN4, wf, sched, BathModel(eta=1e-3))
    with pytest.raises(ValueError):
        evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=(1, 1))


def test_evolve_decoupled_bath_is_frozen(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    out = evolve(CHAIN4, wf, sched, BathModel(eta=0.0), start=CHAIN4_START,
                 table=table4)
    i_start = int(np.nonzero(table4.codes == state_code(CHAIN4_START))[0][0])
    assert out.populations[i_start] == pytest.approx(1.0, abs=1e-9)
    assert out.leaked == pytest.approx(0.0, abs=1e-12)


def test_evolve_conserves_probability(table4, sched):
    wf = reverse_waveform(0.55, 5.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3),
                     start=CHAIN4_START, table=table4)
    assert out.populations.sum() + out.leaked == pytest.approx(1.0, abs=1e-9)
    assert (out.populations >= 0.0).all()


def test_evolve_monotone_in_eta(table4, sched):
    # stronger coupling relaxes more mass to the ground sheet
    wf = reverse_waveform(0.6, 5.0)
    lo = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
                table=table4)
    hi = evolve(CHAIN4, wf, sched, BathModel(eta=5e-3), start=CHAIN4_START,
                table=table4)
    assert hi.populations[0] >= lo.populations[0] - 1e-12


def test_evolve_two_level_gibbs(sched, cache):
    # closed-form oracle: a held qubit whose splitting sits above the gauge
    # linewidth relaxes by the secular channel to the two-level Gibbs state
    prob = IsingProblem(1, (), (-0.1,))
    table = build_family_table(prob, (-1,), cache_override=cache)
    s_star = 0.75
    wf = Waveform(((0.0, 20.0, s_star, s_star),))
    bath = BathModel(eta=0.2, temperature_ghz=1.2)
    out = evolve(prob, wf, sched, bath, start=(-1,), table=table)
    row = table.row(sched.a(s_star) / sched.b(s_star))
    w = np.exp(-(row.lam - row.lam.min()) * sched.b(s_star) / bath.temperature_ghz)
    w /= w.sum()
    assert 0.01 < w[1] < 0.5          # a genuinely mixed target
    assert np.abs(out.populations - w).sum() < 2e-3


def test_evolve_long_hold_gibbs_with_reservoir(table4, sched):
    # stationary state is Gibbs over tracked sheets plus the lumped
    # reservoir, by detailed balance of the return flow
    s_star = 0.55
    wf = Waveform(((0.0, 200.0, s_star, s_star),))
    bath = BathModel(eta=0.05, temperature_ghz=2.6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = evolve(CHAIN4, wf, sched, bath, start=CHAIN4_START, table=table4)
    g = sched.a(s_star) / sched.b(s_star)
    row = table4.row(g)
    beta_b = sched.b(s_star) / bath.temperature_ghz
    w = np.exp(-(row.lam - row.lam.min()) * beta_b)
    w_res = np.exp(-(row.out_lam - row.lam.min()) * beta_b).sum()
    z = w.sum() + w_res
    target = np.append(w, w_res) / z
    got = np.append(out.populations, out.leaked)
    assert np.abs(got - target).sum() < 1e-3


def test_evolve_leak_warning(table4, sched):
    # a hot bath pushes visible weight into the reservoir
    wf = Waveform(((0.0, 50.0, 0.5, 0.5),))
    bath = BathModel(eta=0.2, temperature_ghz=2.6)
    with pytest.warns(RuntimeWarning, match="leaked"):
        out = evolve(CHAIN4, wf, sched, bath, start=CHAIN4_START, table=table4)
    assert out.leaked > 0.05


def test_evolve_rejects_out_of_table_waveform(table4, sched):
    wf = reverse_waveform(0.25, 1.0)   # Gamma(0.25) far beyond the grid
    with pytest.raises(DynamicsError, match="beyond the table"):
        evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
               table=table4)


def test_evolve_start_outside_family(sched, cache):
    outside = (-1, 1, 1, 1)
    codes, _ = tracked_family(CHAIN4, CHAIN4_START, m=4)
    assert state_code(outside) not in codes
    table = build_family_table(CHAIN4, CHAIN4_START, m=4,
                               cache_override=cache)
    wf = reverse_waveform(0.6, 5.0)
    with pytest.raises(DynamicsError, match="larger m"):
        evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=outside,
               table=table)


def test_evolve_table_m_mismatch(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    with pytest.raises(ValueError, match="table has m"):
        evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
               table=table4, m=7)


def test_evolve_trajectory(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    final, traj = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3),
                         start=CHAIN4_START, table=table4,
                         return_trajectory=True)
    assert len(traj) >= 4
    assert traj[0].s == 1.0
    assert traj[-1].s == 1.0
    for st_ in traj:
        assert st_.populations.sum() + st_.leaked == pytest.approx(1.0,
                                                                   abs=1e-9)
    assert np.allclose(traj[-1].populations, final.populations, atol=1e-12)


def test_population_state_check():
    codes = np.array([0, 1])
    good = PopulationState(s=1.0, gamma=0.0,
                           populations=np.array([0.7, 0.3 - 1e-13]),
                           leaked=1e-13, codes=codes, n_qubits=1)
    good.check()
    bad = PopulationState(s=1.0, gamma=0.0,
                          populations=np.array([0.7, -0.1]), leaked=0.4,
                          codes=codes, n_qubits=1)
    with pytest.raises(DynamicsError):
        bad.check()
    off = PopulationState(s=1.0, gamma=0.0,
                          populations=np.array([0.7, 0.2]), leaked=0.0,
                          codes=codes, n_qubits=1)
    with pytest.raises(DynamicsError):
        off.check()


# -------------------------------------------------------- classical dynamics


def test_basis_mode_matches_hand_built_generator(sched):
    prob = IsingProblem(2, ((0, 1, -1.0),), (-0.3, 0.1))
    bath = BathModel(eta=2e-3, basis_mode=BasisMode.COMPUTATIONAL_BASIS)
    tau, s_star = 3.0, 0.7
    wf = Waveform(((0.0, tau, s_star, s_star),))
    out = evolve(prob, wf, sched, bath, start=(1, -1))

    from scipy.linalg import expm
    b = sched.b(s_star)
    E = np.array([prob.energy(code_to_config(z, 2)) for z in range(4)])
    G = np.zeros((4, 4))
    for z in range(4):
        for k in range(2):
            zf = z ^ (1 << (1 - k))
            w = TWO_PI * b * (E[z] - E[zf])
            G[zf, z] = bath.eta * spectral_density(w) * 1000.0
    G[np.diag_indices_from(G)] -= G.sum(axis=0)
    p0 = np.zeros(4)
    p0[state_code((1, -1))] = 1.0
    expected = expm(G * tau) @ p0
    assert np.abs(out.populations - expected).max() < 1e-8
    assert out.leaked == 0.0


def test_basis_mode_ramp_conserves(sched):
    prob = IsingProblem(2, ((0, 1, -1.0),), (-0.3, 0.1))
    bath = BathModel(eta=2e-3, basis_mode=BasisMode.COMPUTATIONAL_BASIS)
    out = evolve(prob, reverse_waveform(0.5, 2.0), sched, bath, start=(1, -1))
    assert out.populations.sum() == pytest.approx(1.0, abs=1e-9)


# ------------------------------------------------------------------ readout


def test_sample_outcomes_deterministic(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    out = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
                 table=table4)
    h1 = sample_outcomes(out, shots=5000, seed=11)
    h2 = sample_outcomes(out, shots=5000, seed=11)
    assert h1.counts == h2.counts
    assert sum(h1.counts.values()) + h1.leaked == 5000


def test_sample_outcomes_concentration(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    out = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
                 table=table4)
    shots = 20000
    hist = sample_outcomes(out, shots=shots, seed=3)
    for i, code in enumerate(table4.codes):
        p = out.populations[i]
        got = hist.counts.get(code_to_config(int(code), 4), 0) / shots
        sigma = np.sqrt(max(p * (1 - p), 1e-12) / shots)
        assert abs(got - p) < 5 * sigma + 1e-9


def test_sample_outcomes_leaked_shots():
    state = PopulationState(s=1.0, gamma=0.0,
                            populations=np.array([0.5, 0.2]), leaked=0.3,
                            codes=np.array([0, 3]), n_qubits=2)
    hist = sample_outcomes(state, shots=10000, seed=7)
    assert hist.leaked > 0
    assert abs(hist.leaked / 10000 - 0.3) < 5 * np.sqrt(0.3 * 0.7 / 10000)
    assert sum(hist.counts.values()) + hist.leaked == 10000


def test_sample_outcomes_ambiguity_warning(table4, sched):
    wf = reverse_waveform(0.6, 5.0)
    out = evolve(CHAIN4, wf, sched, BathModel(eta=1e-3), start=CHAIN4_START,
                 table=table4)
    hybrid = lowest_eigenpairs(assemble(CHAIN4, 1.0), 5)
    with pytest.warns(RuntimeWarning, match="ambiguous"):
        sample_outcomes(out, eigensystem=hybrid, shots=100, seed=0)


def test_outcome_histogram_validation():
    with pytest.raises(ValueError):
        OutcomeHistogram(counts={(1, 1): 5}, shots=4)
    with pytest.raises(ValueError):
        OutcomeHistogram(counts={(1, 1): -1}, shots=0)


# --------------------------------------------------------------------- svmc


def test_svmc_cold_hold_is_frozen(sched):
    # at s = 1 the transverse term vanishes; a cold rotor gas started in the
    # global minimum must stay there
    wf = Waveform(((0.0, 1.0, 1.0, 1.0),))
    hist = svmc_evolve(CHAIN4, wf, sched, temperature_ghz=1e-3, sweeps=50,
                       seed=5, shots=40, start=(1, 1, 1, 1))
    assert hist.counts == {(1, 1, 1, 1): 40}


def test_svmc_hot_limit_randomizes(sched):
    prob = IsingProblem(1, (), (-0.5,))
    wf = Waveform(((0.0, 1.0, 1.0, 1.0),))
    hist = svmc_evolve(prob, wf, sched, temperature_ghz=1e4, sweeps=200,
                       seed=9, shots=400, start=(1,))
    frac_up = hist.counts.get((1,), 0) / 400
    assert 0.35 < frac_up < 0.65


def test_svmc_deterministic(sched):
    wf = reverse_waveform(0.6, 2.0)
    h1 = svmc_evolve(CHAIN4, wf, sched, sweeps=100, seed=2, shots=50,
                     start=CHAIN4_START)
    h2 = svmc_evolve(CHAIN4, wf, sched, sweeps=100, seed=2, shots=50,
                     start=CHAIN4_START)
    assert h1.counts == h2.counts
    assert h1.meta["method"] == "svmc"


def test_svmc_requires_start(sched):
    wf = reverse_waveform(0.6, 2.0)
    with pytest.raises(ValueError):
        svmc_evolve(CHAIN4, wf, sched, shots=10)
