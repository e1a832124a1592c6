import pytest

from ratesim import regression, trace
from ratesim.derivation import fit_derivation


@pytest.fixture(scope="session", autouse=True)
def numba_warmup():
    # Compile (or load from cache) the tree kernels once so timing-sensitive
    # tests measure algorithm time, not JIT time.
    regression.warm_up()


@pytest.fixture(scope="session")
def small_scenario():
    """800-sample noisy synthetic scenario shared by model-consuming tests."""
    spec = trace.SyntheticSpec(n_samples=800, noise_sigma=1.0)
    return trace.generate_synthetic_scenario(spec, seed=101)


@pytest.fixture(scope="session")
def small_models(small_scenario):
    """A forest + derivation model trained on the small scenario."""
    _, records = small_scenario
    X, y = trace.records_to_arrays(records)
    report = regression.cross_validate(
        X, y, k=5, trainer=regression.forest_trainer(n_trees=30, max_depth=15), seed=5
    )
    forest = regression.train_forest(
        X, y, n_trees=30, max_depth=15, seed=5, mno="A", direction="uplink"
    )
    deriv = fit_derivation(report.predictions, report.measurements)
    return forest, deriv


def make_flat_sinr_trace(n_seconds: int, sinr: float, seed: int = 0):
    """A synthetic trace whose SINR (and thus CAT metric) is constant."""
    import dataclasses

    spec = trace.SyntheticSpec(n_samples=n_seconds + 1, noise_sigma=0.0)
    t, _ = trace.generate_synthetic_scenario(spec, seed=seed)
    samples = tuple(dataclasses.replace(s, sinr=sinr) for s in t.samples)
    return dataclasses.replace(t, samples=samples)
