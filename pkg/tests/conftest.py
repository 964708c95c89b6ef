import numpy as np
import pytest

from mtvae import data, models


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


TINY = dict(dim=3, hidden=8, latent=4, observed_range=(4, 4), future=5)


def tiny_config(variant=models.MTVAE_ADD, **kw):
    return models.ModelConfig(variant=variant, **{**TINY, **kw})


def randomize(params, rng, scale=0.5):
    """Perturb every array so no gain is exactly 1 and no bias exactly 0."""
    return {k: v + scale * rng.standard_normal(v.shape) for k, v in params.items()}


@pytest.fixture(scope="session")
def small_splits():
    spec = data.SyntheticSpec(n_train=40, n_val=10, n_test=10, seed=3)
    return spec, data.gen_synthetic(spec)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[name])
