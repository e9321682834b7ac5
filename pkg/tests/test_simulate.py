import math

import numpy as np
import pytest
from scipy import integrate, stats

from ppflow.seqdata import EventSequence, InterArrivalSequence, UNCONSTRAINED, Dataset
from ppflow.simulate import (
    HawkesParams,
    HomogeneousPoisson,
    PoissonBumpIntensity,
    SimConfig,
    SimulationError,
    SwitchingSpec,
    event_logliks,
    ground_truth_loglik,
    hawkes_compensator,
    hawkes_intensity,
    ip_intensity,
    rescaled_gaps,
    simulate_dataset,
    simulate_marked,
    simulate_switching,
    simulate_thinning,
    switching_ground_truth_loglik,
    switching_step_logpdf,
)

LOG_2PI = math.log(2 * math.pi)


def bump_oracle(t, alphas, centers, sigmas):
    return sum(a / math.sqrt(2 * math.pi * s * s) * math.exp(-((t - c) ** 2) / s**2)
               for a, c, s in zip(alphas, centers, sigmas))


def test_ip_intensity_default_at_three():
    p = PoissonBumpIntensity()
    want = bump_oracle(3.0, (14, 18, 13, 17, 10, 13), (3, 6, 9, 12, 15, 18), (5,) * 6)
    assert ip_intensity(3.0, p) == pytest.approx(want, rel=1e-13)
    assert ip_intensity(3.0, p) == pytest.approx(2.4206, abs=1e-4)


def test_unit_bump_peak_and_tail():
    p = PoissonBumpIntensity(k=1, alphas=(1.0,), centers=(0.0,), sigmas=(1.0,))
    assert ip_intensity(0.0, p) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)
    tail = ip_intensity(np.linspace(0, 8, 50), p)
    assert np.all(np.diff(tail) < 0) and tail[-1] < 1e-25


def test_ip_compensator_matches_quadrature():
    rng = np.random.default_rng(0)
    p = PoissonBumpIntensity()
    for _ in range(100):
        lo, hi = np.sort(rng.uniform(0, 30, size=2))
        quad, _ = integrate.quad(lambda t: ip_intensity(t, p), lo, hi, epsabs=1e-13, epsrel=1e-13, limit=200)
        assert abs(float(p.compensator(lo, hi)) - quad) < 1e-8


def test_ip_upper_bound_dominates():
    p = PoissonBumpIntensity()
    for lo in np.arange(0.0, 30.0, 0.7):
        grid = np.linspace(lo, lo + 0.7, 200)
        assert p.upper_bound(lo, lo + 0.7) >= ip_intensity(grid, p).max()


def test_hawkes_intensity_examples():
    p = HawkesParams()
    assert hawkes_intensity(3.3, [], p) == 1.0
    assert hawkes_intensity(1.0, [0.0], p) == pytest.approx(1 + 0.8 * math.exp(-1), abs=1e-12)
    assert hawkes_intensity(1.0, [0.0], p) == pytest.approx(1.294304, abs=1e-6)
    assert hawkes_intensity(1.0, [0.0, 0.5], p) == pytest.approx(1.779528, abs=1e-6)
    with pytest.raises(SimulationError):
        hawkes_intensity(1.0, [1.0], p)


def test_hawkes_event_loglik_example():
    p = HawkesParams()
    comp = 1 + 0.8 * (1 - math.exp(-1))
    assert hawkes_compensator(0.0, 1.0, [0.0], p) == pytest.approx(comp, abs=1e-12)
    assert comp == pytest.approx(1.505696, abs=1e-6)
    ll = event_logliks(EventSequence("h", (1e-300, 1.0)), p)[1]
    # second event's term with the first event at 0 (its own term is log mu - mu*t1)
    want = math.log(1 + 0.8 * math.exp(-1)) - comp
    assert ll == pytest.approx(want, abs=1e-9)
    assert want == pytest.approx(-1.247724, abs=1e-6)


def test_hawkes_compensator_matches_quadrature():
    rng = np.random.default_rng(1)
    p = HawkesParams()
    for _ in range(100):
        hist = np.sort(rng.uniform(0, 10, size=rng.integers(0, 6)))
        lo = (hist[-1] if hist.size else 0.0) + rng.uniform(0, 1)
        hi = lo + rng.uniform(0.01, 3)
        quad, _ = integrate.quad(lambda t: hawkes_intensity(t, hist, p), lo, hi, epsabs=1e-13, epsrel=1e-13)
        assert abs(hawkes_compensator(lo, hi, hist, p) - quad) < 1e-8


def test_hawkes_recursive_loglik_matches_direct_sum():
    p = HawkesParams()
    seq = simulate_thinning(p, SimConfig(target_len=25, n_seqs=1, seed=4))[0]
    t = np.asarray(seq.times)
    prev = np.concatenate([[0.0], t[:-1]])
    direct = [math.log(hawkes_intensity(t[n], t[:n], p)) - hawkes_compensator(prev[n], t[n], t[:n], p)
              for n in range(t.size)]
    np.testing.assert_allclose(event_logliks(seq, p), direct, rtol=1e-12)


def test_poisson_loglik_unit_gaps():
    seq = EventSequence("p", (1.0, 2.0, 3.0))
    assert ground_truth_loglik(seq, HomogeneousPoisson(1.0)) == pytest.approx(-1.0, abs=1e-15)


def test_poisson_mean_gap_and_ks():
    seqs = simulate_thinning(HomogeneousPoisson(1.0), SimConfig(target_len=10, n_seqs=10000, seed=0))
    gaps = np.concatenate([np.diff(np.concatenate([[0.0], s.times])) for s in seqs])
    assert abs(gaps.mean() - 1.0) < 0.02
    assert stats.kstest(gaps, "expon").pvalue > 0.01


def test_fixed_length_and_determinism():
    cfg = SimConfig(target_len=60, n_seqs=5, seed=3)
    for spec in (PoissonBumpIntensity(), HawkesParams()):
        a = simulate_thinning(spec, cfg)
        assert all(len(s) == 60 for s in a)
        assert [s.times for s in a] == [s.times for s in simulate_thinning(spec, cfg)]


def test_workers_do_not_change_output():
    cfg = SimConfig(target_len=20, n_seqs=6, seed=2)
    assert simulate_thinning(HawkesParams(), cfg, workers=1) == simulate_thinning(HawkesParams(), cfg, workers=2)


def test_non_stationary_hawkes_rejected():
    with pytest.raises(SimulationError):
        simulate_thinning(HawkesParams(beta=1.2), SimConfig(n_seqs=1))


def test_ip_rescaled_gaps_are_unit_exponential():
    seqs = simulate_thinning(PoissonBumpIntensity(), SimConfig(target_len=60, n_seqs=200, seed=5))
    # fixed-length IP realizations are conditioned on reaching 60 events, so test the horizon law
    horizon = simulate_thinning(PoissonBumpIntensity(), SimConfig(n_seqs=300, seed=5, horizon=40.0))
    gaps = np.concatenate([rescaled_gaps(s, PoissonBumpIntensity()) for s in horizon if len(s)])
    assert stats.kstest(gaps, "expon").pvalue > 0.01
    assert all(len(s) == 60 for s in seqs)


def test_truth_beats_perturbed_parameters():
    truth = HawkesParams()
    seqs = simulate_thinning(truth, SimConfig(target_len=60, n_seqs=200, seed=8))
    avg = lambda p: np.mean([ground_truth_loglik(s, p) for s in seqs])
    best = avg(truth)
    for mu in (0.8, 1.0, 1.2):
        for beta in (0.6, 0.8, 0.95):
            if (mu, beta) != (1.0, 0.8):
                assert avg(HawkesParams(mu, beta)) <= best + 1e-3


def test_switching_defaults_and_moments():
    ds = simulate_switching(SwitchingSpec(), seed=0)
    assert len(ds) == 1000 and all(len(s) == 15 for s in ds.sequences) and ds.mode == UNCONSTRAINED
    vals = np.array([s.taus for s in ds.sequences])
    even, odd = vals[:, 1::2].ravel(), vals[:, 0::2].ravel()
    assert abs(even.mean() - 4.0) < 3 * even.std() / math.sqrt(even.size)
    assert abs(odd.mean() - 7.0) < 3 * odd.std() / math.sqrt(odd.size)


def test_switching_step_logpdf_examples():
    spec = SwitchingSpec()
    assert switching_step_logpdf(4.0, 2, spec) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)
    mix = math.log(0.5 * math.exp(-0.5 * LOG_2PI) + 0.5 * math.exp(-18 - 0.5 * LOG_2PI))
    assert switching_step_logpdf(4.0, 1, spec) == pytest.approx(mix, abs=1e-12)
    assert mix == pytest.approx(-1.612085, abs=1e-6)
    assert switching_step_logpdf(7.0, 3, spec) == pytest.approx(-4.5 - 0.5 * LOG_2PI, abs=1e-12)
    assert switching_step_logpdf(7.0, 3, spec) == pytest.approx(-5.418939, abs=1e-6)


def test_switching_truth_average():
    ds = Dataset((InterArrivalSequence((7.0, 4.0)),), UNCONSTRAINED)
    assert switching_ground_truth_loglik(ds) == pytest.approx((-5.418939 - 0.918939) / 2, abs=1e-6)


def test_noiseless_marks_follow_previous_gap_bucket():
    ds = simulate_marked(HawkesParams(), 2, SimConfig(target_len=30, n_seqs=50, seed=1), noise=0.0)
    edge = ds.meta["mark_rule"]["edges"][0]
    hits = [m == (0 if n == 0 else int(s.taus[n - 1] > edge))
            for s in ds.sequences for n, m in enumerate(s.marks)]
    assert np.mean(hits) == 1.0


def test_label_noise_rate():
    ds = simulate_marked(HawkesParams(), 3, SimConfig(target_len=60, n_seqs=300, seed=2), noise=0.1)
    edges = ds.meta["mark_rule"]["edges"]
    hits = []
    for s in ds.sequences:
        clean = np.concatenate([[0], np.searchsorted(edges, s.taus[:-1], side="right")])
        hits.extend(np.asarray(s.marks) == clean)
    acc = np.mean(hits)
    assert abs(acc - 0.9) < 3 * math.sqrt(0.09 / len(hits))


def test_single_category_rejected():
    with pytest.raises(SimulationError):
        simulate_marked(HawkesParams(), 1, SimConfig(n_seqs=2))


def test_combined_dataset_halves():
    ds = simulate_dataset("ip+se", SimConfig(target_len=10, n_seqs=10, seed=0))
    assert len(ds) == 10
    assert sorted(s.id.split("-")[0] for s in ds.sequences) == ["1"] * 5 + ["2"] * 5
