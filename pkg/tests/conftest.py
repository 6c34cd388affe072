import numpy as np
import pytest

from tce import netcore as nc


def architectures():
    """The network shapes used across the package, shrunk for cheap checks."""
    return {
        "affine": nc.MlpSpec(3, 4, 0, 2),
        "residual": nc.MlpSpec(3, 5, 2, 2),
        "time-score": nc.MlpSpec(2, 6, 2, 2, (nc.EmbedSpec("time", 1, (4, 4)),)),
        "cond-score": nc.MlpSpec(
            4, 6, 1, 4, (nc.EmbedSpec("time", 1, (3, 3)), nc.EmbedSpec("cond", 4, (5,)))
        ),
    }


def fd_grad(spec, params, batch, kind, h=1e-5):
    flat = nc.flatten(params)
    out = np.empty_like(flat)
    for j in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[j] += h
        dn[j] -= h
        lu, _ = nc.loss_and_grad(spec, nc.unflatten(spec, up), batch, kind)
        ld, _ = nc.loss_and_grad(spec, nc.unflatten(spec, dn), batch, kind)
        out[j] = (lu - ld) / (2 * h)
    return out


def random_batch(spec, rng, kind, n=5):
    x = rng.normal(size=(n, spec.total_input_dim))
    if kind == "mse":
        return {"inputs": x, "targets": rng.normal(size=(n, spec.output_dim))}
    sig = rng.uniform(0.1, 1.0, size=(n, 1))
    return {"inputs": x, "noise": rng.normal(size=(n, spec.output_dim)), "sigma": sig, "scale": 1.0 / sig}


def grad_rel_error(spec, params, batch, kind):
    _, g = nc.loss_and_grad(spec, params, batch, kind)
    a = nc.flatten(g)
    b = fd_grad(spec, params, batch, kind)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_dataset(rng, n, ds=2, da=1, origin="target", shift=0.0):
    from tce.datasets import ORIGIN_CODE, TransitionDataset

    s = rng.normal(size=(n, ds)) + shift
    return TransitionDataset(s, rng.normal(size=(n, da)), rng.uniform(size=n), s + 0.1 * rng.normal(size=(n, ds)),
                             np.zeros(n, bool), np.full(n, ORIGIN_CODE[origin], np.int8))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Call as ``criterion(n, ok, detail)``; the line is printed immediately and
    repeated in the terminal summary.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
