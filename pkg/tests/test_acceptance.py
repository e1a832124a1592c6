"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (visible with `pytest -s`). The suite uses
scaled synthetic scenarios with known ground truth; published-dataset numbers
are exercised only by the optional stretch test at the bottom.
"""

import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from ratesim import engine, regression, trace
from ratesim.cli import main as cli_main
from ratesim.connmap import grid_key
from ratesim.derivation import (
    KernelConfig,
    clip_sample,
    fit_derivation,
    sample_virtual,
    synthesize_profile,
)
from ratesim.metrics import ecdf_similarity
from ratesim.schemes import (
    MetricSample,
    SchemeState,
    decide,
    default_config,
    normalize_metric,
    tx_probability,
    z_factor,
)


@contextmanager
def criterion(name):
    try:
        yield
    except BaseException:
        print(f"FAIL  {name}")
        raise
    print(f"PASS  {name}")


# Shared heavy artifacts, built once by the regression-quality criterion and
# reused by later criteria (rebuilt on demand if tests run in isolation).
_CACHE: dict = {}


def _noisy_scenario():
    if "noisy" not in _CACHE:
        base = trace.SyntheticSpec(n_samples=5000, noise_sigma=0.0)
        _, clean_records = trace.generate_synthetic_scenario(base, seed=1001)
        _, y_clean = trace.records_to_arrays(clean_records)
        sigma = 0.2 * float(y_clean.std())
        spec = trace.SyntheticSpec(n_samples=5000, noise_sigma=sigma)
        _, records = trace.generate_synthetic_scenario(spec, seed=1002)
        _CACHE["noisy"] = (spec, records, sigma)
    return _CACHE["noisy"]


def _noisy_models():
    if "models" not in _CACHE:
        _, records, _ = _noisy_scenario()
        X, y = trace.records_to_arrays(records)
        report = regression.cross_validate(
            X, y, 10, regression.forest_trainer(100, 20), seed=2
        )
        forest = regression.train_forest(
            X, y, n_trees=100, max_depth=20, seed=3, mno="A", direction="uplink"
        )
        deriv = fit_derivation(report.predictions, report.measurements)
        _CACHE["models"] = (forest, deriv, report)
    return _CACHE["models"]


class TestEquationFidelity:
    """Each formula passes >= 10 hand/brute-force-derived cases within 1e-9."""

    TOL = 1e-9

    def test_coefficient_of_determination(self):
        def ref(pred, meas):
            ybar = sum(meas) / len(meas)
            sse = sum((p - y) ** 2 for p, y in zip(pred, meas))
            tot = sum((ybar - y) ** 2 for y in meas)
            return 1.0 - sse / tot

        with criterion("Eq fidelity: coefficient of determination"):
            cases = [
                ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]),
                ([2.0, 2.0, 2.0, 2.0], [1.0, 2.0, 3.0, 2.0]),
                ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]),  # hand value 11/14
            ]
            rng = np.random.default_rng(1)
            for _ in range(12):
                n = int(rng.integers(2, 20))
                meas = rng.normal(size=n)
                while np.ptp(meas) == 0:
                    meas = rng.normal(size=n)
                cases.append((list(rng.normal(size=n)), list(meas)))
            assert len(cases) >= 10
            for pred, meas in cases:
                got = regression.r_squared(pred, meas)
                assert abs(got - ref(pred, meas)) <= self.TOL
            assert abs(regression.r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
                       - 11.0 / 14.0) <= self.TOL

    def test_grid_key(self):
        def ref(p, c):
            return (math.floor(p[0] / c), math.floor(p[1] / c))

        with criterion("Eq fidelity: connectivity grid key"):
            cases = [((0.0, 0.0), 25.0), ((125.3, 47.9), 25.0), ((-0.1, 0.0), 25.0),
                     ((25.0, -25.0), 25.0), ((24.999, 49.999), 25.0)]
            rng = np.random.default_rng(2)
            for _ in range(15):
                cases.append((tuple(rng.uniform(-1e4, 1e4, 2)),
                              float(rng.uniform(0.5, 500.0))))
            assert len(cases) >= 10
            for p, c in cases:
                assert grid_key(p, c) == ref(p, c)
            assert grid_key((125.3, 47.9), 25.0) == (5, 1)
            assert grid_key((-0.1, 0.0), 25.0) == (-1, 0)

    def test_sample_clipping(self):
        def ref(raw, lo, hi):
            if raw < lo:
                return lo
            if raw > hi:
                return hi
            return raw

        class Box:
            def __init__(self, lo, hi):
                self.clip_lo, self.clip_hi = lo, hi

        with criterion("Eq fidelity: virtual-measurement clipping"):
            cases = [(-0.5, 0.1, 50.0), (51.0, 0.1, 50.0), (7.0, 0.1, 50.0),
                     (0.1, 0.1, 50.0), (50.0, 0.1, 50.0)]
            rng = np.random.default_rng(3)
            for _ in range(15):
                lo, hi = sorted(rng.uniform(-10, 60, 2))
                cases.append((float(rng.uniform(-30, 90)), float(lo), float(hi)))
            assert len(cases) >= 10
            for raw, lo, hi in cases:
                assert clip_sample(Box(lo, hi), raw) == ref(raw, lo, hi)

    def test_metric_normalization(self):
        # Reference: linear rescale, clamped into [0, 1] (out-of-range metric
        # values occur in the data; unclamped they would break the
        # probability semantics downstream).
        def ref(phi, lo, hi):
            return min(1.0, max(0.0, (phi - lo) / (hi - lo)))

        with criterion("Eq fidelity: metric normalization"):
            cases = [(0.0, 0.0, 30.0), (15.0, 0.0, 30.0), (45.0, 0.0, 30.0),
                     (-5.0, 0.0, 30.0), (30.0, 0.0, 30.0)]
            rng = np.random.default_rng(4)
            for _ in range(15):
                lo, hi = sorted(rng.uniform(-50, 80, 2))
                if hi - lo < 1e-6:
                    hi = lo + 1.0
                cases.append((float(rng.uniform(-80, 120)), float(lo), float(hi)))
            assert len(cases) >= 10
            for phi, lo, hi in cases:
                assert abs(normalize_metric(phi, lo, hi) - ref(phi, lo, hi)) <= self.TOL
            assert normalize_metric(45.0, 0.0, 30.0) == 1.0

    def test_transmission_probability(self):
        def ref(theta, alpha, z, dt, t_min, t_max):
            if dt < t_min:
                return 0.0
            if dt > t_max:
                return 1.0
            return theta ** (alpha * z)

        with criterion("Eq fidelity: transmission probability"):
            cases = [(0.9, 6.0, 1.0, 5.0, 10.0, 120.0),
                     (0.0, 6.0, 1.0, 121.0, 10.0, 120.0),
                     (0.5, 6.0, 1.0, 60.0, 10.0, 120.0),
                     (0.5, 6.0, 1.0, 10.0, 10.0, 120.0),   # dt == t_min
                     (0.5, 6.0, 1.0, 120.0, 10.0, 120.0)]  # dt == t_max
            rng = np.random.default_rng(5)
            for _ in range(15):
                cases.append((float(rng.uniform(0, 1)), float(rng.uniform(0.5, 8)),
                              float(rng.uniform(0.1, 4)), float(rng.uniform(0, 200)),
                              10.0, 120.0))
            assert len(cases) >= 10
            for args in cases:
                assert abs(tx_probability(*args) - ref(*args)) <= self.TOL
            assert tx_probability(0.5, 6.0, 1.0, 60.0, 10.0, 120.0) == 0.015625

    def test_predictive_factor(self):
        def ref(phi, phi_future, theta, gamma):
            delta = phi_future - phi
            if delta > 0:
                return max(abs(delta * (1 - theta) * gamma), 1.0)
            return 1.0 / max(abs(delta * theta * gamma), 1.0)

        with criterion("Eq fidelity: predictive z factor"):
            cases = [(10.0, 10.0, 0.3, 2.0), (0.0, 2.0, 0.5, 2.0),
                     (4.0, 0.0, 0.5, 2.0), (5.0, 5.5, 0.9, 0.5),
                     (9.0, 3.0, 0.1, 0.5)]
            rng = np.random.default_rng(6)
            for _ in range(15):
                cases.append((float(rng.uniform(-20, 40)), float(rng.uniform(-20, 40)),
                              float(rng.uniform(0, 1)), float(rng.uniform(0.1, 4))))
            assert len(cases) >= 10
            for args in cases:
                assert abs(z_factor(*args) - ref(*args)) <= self.TOL
            assert z_factor(0.0, 2.0, 0.5, 2.0) == 2.0
            assert z_factor(4.0, 0.0, 0.5, 2.0) == 0.25


def test_tree_oracle_depth_one():
    """Depth-1 trained trees equal the exhaustive optimal split on 200
    random instances of <= 64 rows (threshold interval and leaf values)."""
    with criterion("Tree oracle: depth-1 equals exhaustive split (200 instances)"):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 65))
            X = rng.normal(size=(n, 9))
            y = rng.normal(size=n)
            tree = regression.train_tree(X, y, regression.TreeParams(max_depth=1))
            assert tree.feature[0] >= 0
            # Exhaustive search over every (feature, midpoint) split.
            best_sse = np.inf
            optimal = []
            for f in range(9):
                values = np.unique(X[:, f])
                for a, b in zip(values, values[1:]):
                    thr = (a + b) / 2
                    mask = X[:, f] <= thr
                    yl, yr = y[mask], y[~mask]
                    sse = float(np.sum((yl - yl.mean()) ** 2)
                                + np.sum((yr - yr.mean()) ** 2))
                    if sse < best_sse - 1e-12:
                        best_sse = sse
                        optimal = [(f, a, b, mask)]
                    elif sse <= best_sse + 1e-9 * max(1.0, best_sse):
                        optimal.append((f, a, b, mask))
            got_mask = X[:, tree.feature[0]] <= tree.threshold[0]
            matches = [
                (f, a, b, m) for f, a, b, m in optimal if np.array_equal(m, got_mask)
            ]
            assert matches, "chosen split is not among the exhaustive optima"
            f, a, b, mask = matches[0]
            assert tree.feature[0] == f or len(optimal) > 1
            assert a <= tree.threshold[0] < b  # same threshold interval
            np.testing.assert_allclose(tree.value[tree.left[0]], y[mask].mean(),
                                       rtol=1e-12)
            np.testing.assert_allclose(tree.value[tree.right[0]], y[~mask].mean(),
                                       rtol=1e-12)


def test_regression_quality_on_synthetic_data():
    """Forest CV R^2 >= 0.9 noise-free and >= 0.6 at 20% label noise on
    5000-row scenarios; each full train+CV under 30 s."""
    with criterion("Regression quality: CV R^2 on 5000-row scenarios, < 30 s each"):
        spec = trace.SyntheticSpec(n_samples=5000, noise_sigma=0.0)
        _, records = trace.generate_synthetic_scenario(spec, seed=1001)
        X, y = trace.records_to_arrays(records)
        started = time.perf_counter()
        report = regression.cross_validate(
            X, y, 10, regression.forest_trainer(100, 20), seed=1
        )
        regression.train_forest(X, y, n_trees=100, max_depth=20, seed=1)
        elapsed_clean = time.perf_counter() - started
        assert report.r_squared >= 0.9
        assert elapsed_clean < 30.0

        _, records_n, sigma = _noisy_scenario()
        Xn, yn = trace.records_to_arrays(records_n)
        started = time.perf_counter()
        report_n = regression.cross_validate(
            Xn, yn, 10, regression.forest_trainer(100, 20), seed=2
        )
        forest = regression.train_forest(
            Xn, yn, n_trees=100, max_depth=20, seed=3, mno="A", direction="uplink"
        )
        elapsed_noisy = time.perf_counter() - started
        assert report_n.r_squared >= 0.6
        assert elapsed_noisy < 30.0
        _CACHE["models"] = (forest, fit_derivation(report_n.predictions,
                                                   report_n.measurements), report_n)


def test_gpr_oracle():
    """Posterior mean/std at 20 probes match a dense closed-form evaluation
    within 1e-6 on a 50-point fixed-hyperparameter instance; 1e5 Monte-Carlo
    draws match the model mean/std within 3 standard errors."""
    with criterion("GPR oracle: closed form within 1e-6, Monte-Carlo within 3 SE"):
        rng = np.random.default_rng(8)
        u = np.sort(rng.uniform(0.0, 30.0, 50))
        t = u + rng.normal(0.0, 1.5, 50)
        ls, sf, sn = 4.0, 30.0, 2.0
        model = fit_derivation(u, t, KernelConfig(ls, sf, sn))

        K = sf * np.exp(-0.5 * ((u[:, None] - u[None, :]) / ls) ** 2)
        K += (sn + 1e-8 * sf) * np.eye(50)
        Kinv = np.linalg.inv(K)
        resid = t - t.mean()
        probes = np.linspace(-2.0, 32.0, 20)
        kv = sf * np.exp(-0.5 * ((probes[:, None] - u[None, :]) / ls) ** 2)
        mean_ref = t.mean() + kv @ (Kinv @ resid)
        var_ref = sf + sn - np.einsum("ij,jk,ik->i", kv, Kinv, kv)
        std_ref = np.sqrt(np.maximum(var_ref, 0.0))
        np.testing.assert_allclose(model.mean(probes), mean_ref, atol=1e-6)
        np.testing.assert_allclose(model.std(probes), std_ref, atol=1e-6)

        probe = 12.5
        mu, sigma = model.mean(probe), model.std(probe)
        n = 100_000
        draw_rng = np.random.default_rng(9)
        draws = np.fromiter(
            (sample_virtual(model, probe, draw_rng).raw_sample for _ in range(n)),
            dtype=np.float64, count=n,
        )
        assert abs(draws.mean() - mu) <= 3 * sigma / np.sqrt(n)
        assert abs(draws.std() - sigma) <= 3 * sigma / np.sqrt(2 * n)


def test_profile_fidelity():
    """Replaying labeled transmissions through predict -> sample -> clip gives
    ECDF similarity >= 0.95 against the true labels and >= 0.90 against a
    held-out noise re-draw, in under 10 s."""
    with criterion("Profile fidelity: ECDF similarity >= 0.95/0.90, < 10 s"):
        forest, deriv, _ = _noisy_models()
        spec, records, sigma = _noisy_scenario()
        X, y = trace.records_to_arrays(records)
        started = time.perf_counter()
        profile = synthesize_profile(forest, deriv, records,
                                     np.random.default_rng(10))
        elapsed = time.perf_counter() - started
        synthesized = np.array([v for _, v in profile])
        assert ecdf_similarity(synthesized, y) >= 0.95
        truth = trace.RATE_MODELS[spec.rate_model](X)
        redraw = np.maximum(
            truth + np.random.default_rng(11).normal(0.0, sigma, len(y)), 1e-3
        )
        assert ecdf_similarity(synthesized, redraw) >= 0.90
        assert elapsed < 10.0


def _mann_kendall_one_sided_p(values):
    """One-sided (increasing) Mann-Kendall trend test, normal approximation."""
    n = len(values)
    s = sum(
        np.sign(values[j] - values[i]) for i in range(n) for j in range(i + 1, n)
    )
    var = n * (n - 1) * (2 * n + 5) / 18.0
    z = (s - 1) / math.sqrt(var) if s > 0 else (s + 1) / math.sqrt(var)
    return float(stats.norm.sf(z))


def test_sweep_behavior():
    """Mean buffering delay increases with phi_max (Mann-Kendall p < 0.01),
    approaches the timeout-driven bound at large phi_max, and CAT beats the
    periodic baseline by >= 10% in mean data rate at the swept optimum."""
    with criterion("Sweep behavior: monotone delay, timeout convergence, "
                   ">= 10% rate gain over periodic"):
        forest, deriv, _ = _noisy_models()
        traces = [
            trace.generate_synthetic_scenario(
                trace.SyntheticSpec(n_samples=601, noise_sigma=0.0,
                                    trace_id=f"sweep-{i}"),
                seed=2000 + i,
            )[0]
            for i in range(5)
        ]
        grid = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0]
        base = engine.RunConfig(scheme=default_config("CAT"), seed=42,
                                forest=forest, derivation=deriv)
        table = engine.sweep(base, grid, traces, seeds_per_point=100, jobs=2)
        delays = [p.mean_delay for p in table.points]
        rates = [p.mean_rate for p in table.points]
        assert all(p.n_runs == 500 for p in table.points)

        assert _mann_kendall_one_sided_p(delays) < 0.01

        scheme = base.scheme
        tick = 1.0 / scheme.evaluation_rate
        timeout_delay = (scheme.t_max + tick) / 2.0
        assert delays[-1] >= 0.75 * timeout_delay
        assert delays[-1] <= timeout_delay * 1.02
        assert delays[-1] == max(delays)

        periodic = engine.RunConfig(scheme=default_config("periodic"), seed=42,
                                    forest=forest, derivation=deriv)
        periodic_table = engine.sweep(periodic, [30.0], traces,
                                      seeds_per_point=100, jobs=2)
        periodic_rate = periodic_table.points[0].mean_rate
        assert max(rates) >= 1.10 * periodic_rate


def test_transmission_probability_branch_coverage():
    """Empirical transmit frequency at theta=0.5, alpha=6, z=1 over 1e6
    Bernoulli ticks lies in [0.0150, 0.0163]."""
    with criterion("Eq branch coverage: 1e6 ticks at theta=0.5 -> freq in "
                   "[0.0150, 0.0163]"):
        config = default_config("CAT")
        metric = MetricSample(phi=15.0, phi_future=None, theta=0.5)
        state = SchemeState(dt=60.0)
        rng = np.random.default_rng(12)
        n = 1_000_000
        hits = sum(decide(config, state, metric, rng) for _ in range(n))
        freq = hits / n
        assert 0.0150 <= freq <= 0.0163


def test_pipeline_determinism(tmp_path, capsys):
    """Any pipeline command repeated with identical config and seed produces
    byte-identical output artifacts."""
    with criterion("Determinism: byte-identical artifacts on rerun"):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"base_seed": 11}), encoding="utf-8")
        commands = [
            ["synth", "--config", str(config), "--traces", "2", "--samples",
             "300", "--noise", "1.0", "--scenario", "det"],
            ["train", "--config", str(config), "--mno", "A", "--direction",
             "uplink", "--trees", "10", "--depth", "12", "--folds", "5"],
            ["map", "--config", str(config), "--mno", "A", "--direction",
             "uplink", "--payload", "2.0", "--csv"],
            ["replay", "--config", str(config), "--trace", "synth-det-000",
             "--scheme", "ML-CAT"],
            ["sweep", "--config", str(config), "--scheme", "CAT", "--phi-max",
             "15,30", "--mno", "A", "--direction", "uplink",
             "--seeds-per-point", "2", "--jobs", "2"],
        ]

        def run_all():
            for argv in commands:
                assert cli_main(argv) == 0
            capsys.readouterr()
            out = {}
            for sub in ("traces", "models", "out"):
                for path in sorted((tmp_path / sub).glob("*")):
                    out[path.name] = path.read_bytes()
            return out

        first = run_all()
        second = run_all()
        assert first.keys() == second.keys()
        for name in first:
            assert first[name] == second[name], f"artifact {name} differs"


def test_replay_performance():
    """Single 1000-simulated-second ML-CAT replay completes in under 1 s."""
    with criterion("Performance: 1000 s ML-CAT replay < 1 s"):
        forest, deriv, _ = _noisy_models()
        t = trace.generate_synthetic_scenario(
            trace.SyntheticSpec(n_samples=1001, noise_sigma=0.0), seed=3001
        )[0]
        config = engine.RunConfig(scheme=default_config("ML-CAT"), seed=5,
                                  forest=forest, derivation=deriv)
        engine.replay(config, t)  # warm caches
        started = time.perf_counter()
        result = engine.replay(config, t)
        elapsed = time.perf_counter() - started
        assert result.n_transmissions > 0
        assert elapsed < 1.0


def test_sweep_performance():
    """A 50000-run sweep finishes within 30 minutes. The stated budget assumes
    4 cores; this host has fewer, so passing here is conservative."""
    with criterion("Performance: 50000-run sweep < 30 min"):
        forest, deriv, _ = _noisy_models()
        traces = [
            trace.generate_synthetic_scenario(
                trace.SyntheticSpec(n_samples=201, noise_sigma=0.0,
                                    trace_id=f"perf-{i}"),
                seed=4000 + i,
            )[0]
            for i in range(20)
        ]
        base = engine.RunConfig(scheme=default_config("CAT"), seed=7,
                                forest=forest, derivation=deriv)
        grid = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0]
        jobs = min(4, os.cpu_count() or 1)
        started = time.perf_counter()
        table = engine.sweep(base, grid, traces, seeds_per_point=250, jobs=jobs)
        elapsed = time.perf_counter() - started
        assert len(table.runs) == 50_000
        assert elapsed < 1800.0


@pytest.mark.skipif(
    "RATESIM_OPEN_DATASET" not in os.environ,
    reason="stretch criterion: set RATESIM_OPEN_DATASET to a directory of "
    "canonical trace CSVs from the public drive-test dataset",
)
def test_stretch_open_dataset_cv():
    """Optional: 10-fold CV R^2 for operator A uplink on the public drive-test
    dataset falls in [0.70, 0.90]. Not gating; preprocessing of the raw data
    is not fully specified, so this only runs when the dataset is provided."""
    with criterion("Stretch: open-dataset CV R^2 in [0.70, 0.90]"):
        dataset_dir = Path(os.environ["RATESIM_OPEN_DATASET"])
        records = []
        for path in sorted(dataset_dir.glob("*.csv")):
            t, recs = trace.ingest_trace(path)
            if t.mno == "A" and t.direction == "uplink":
                records.extend(recs)
        assert records, "no operator-A uplink records found"
        X, y = trace.records_to_arrays(records)
        report = regression.cross_validate(
            X, y, 10, regression.forest_trainer(100, 20), seed=1
        )
        assert 0.70 <= report.r_squared <= 0.90
