import time
from pathlib import Path

import numpy as np
import pytest

from tokenforge import grad as G
from tokenforge.pipeline import RunConfig, run_pipeline


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_op_grad(build, inputs, h=1e-6):
    """Compare autodiff gradients of ``sum(w * build(*inputs))`` with finite differences.

    A fixed random weighting ``w`` makes every output entry matter.
    Returns the worst relative error over all inputs.
    """
    leaves = [G.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*leaves)
    weights = np.random.default_rng(99).uniform(0.5, 1.5, size=out.shape)
    loss = G.sum_all(G.scale(out, weights)) if out.data.ndim else out
    grads = G.backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):

        def f(xk, k=k):
            args = [G.Tensor(x) for x in inputs]
            args[k] = G.Tensor(xk)
            o = build(*args).data
            return float(np.sum(o * weights)) if o.ndim else float(o)

        worst = max(worst, max_rel_err(grads[leaf], numeric_grad(f, inputs[k], h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def load_config(name: str, **overrides) -> RunConfig:
    return RunConfig.load(CONFIGS / f"{name}.json").with_overrides(**overrides)


@pytest.fixture(scope="session")
def ambiguity_run():
    """Factory for full ambiguity pipelines, cached per seed across the session."""
    cache = {}

    def get(seed: int):
        if seed not in cache:
            t0 = time.perf_counter()
            cache[seed] = run_pipeline(load_config("ambiguity", seed=seed))
            get.seconds[seed] = time.perf_counter() - t0
        return cache[seed]

    get.seconds = {}
    return get


# --- acceptance verdicts ------------------------------------------------------

VERDICTS = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    """Record one acceptance line, then fail the calling test if ``ok`` is false."""
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, VERDICTS[n]


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
