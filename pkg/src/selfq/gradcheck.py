"""Central finite-difference checks for the autodiff ops.

A vector-valued op ``y = f(x1, ..., xn)`` is reduced to the scalar
``sum(R * y)`` with a fixed random ``R``; the analytic side seeds backward with
``R`` directly.  The error reported per check is the norm-wise relative error
``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-12)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor

TOLERANCE = 1e-4
STEP = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator,
          wrt: Sequence[int] | None = None, h: float = STEP) -> float:
    """Max relative error over the inputs listed in ``wrt`` (default: all)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    inputs = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    with Graph() as g:
        out = fn(*inputs)
    R = rng.standard_normal(out.shape)
    g.backward(out, seed=R)

    def scalar() -> float:
        return float((R * fn(*inputs).data).sum())

    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, inputs[i].data, h)
        worst = max(worst, relative_error(inputs[i].grad, num))
    return worst


def _causal_attention(q, k, v):
    n = q.shape[0]
    mask = Tensor(np.where(np.tri(n, dtype=bool), 0.0, -np.inf))
    s = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), 0.5), mask)
    return ad.matmul(ad.softmax(s, axis=1), v)


def _cases(rng: np.random.Generator) -> dict[str, list[tuple[Callable, list[np.ndarray]]]]:
    def r(*shape):
        return rng.standard_normal(shape)

    def shapes2(n=5):
        return [(int(rng.integers(1, 6)), int(rng.integers(1, 6))) for _ in range(n)]

    cases: dict[str, list] = {}
    cases["matmul"] = [(ad.matmul, [r(4, 5), r(5, 3)])] + [
        (ad.matmul, [r(m, k), r(k, n)]) for (m, k), n in zip(shapes2(), rng.integers(1, 6, 5))]
    cases["add"] = [(ad.add, [r(*s), r(*s)]) for s in shapes2()] + [(ad.add, [r(3, 4), r(4)])]
    cases["scale"] = [(lambda x, c=float(rng.normal()): ad.scale(x, c), [r(*s)]) for s in shapes2()]
    cases["transpose"] = [(ad.transpose, [r(*s)]) for s in shapes2()]
    cases["softmax"] = [(lambda x: ad.softmax(x, axis=1), [r(3, 4)])] + [
        (lambda x, a=int(rng.integers(0, 2)): ad.softmax(x, axis=a), [r(*s)]) for s in shapes2()]
    cases["layer_norm"] = [(ad.layer_norm, [r(m, d), r(d), r(d)])
                           for m, d in ((1, 3), (2, 4), (4, 5), (3, 8), (5, 6))]
    cases["gelu"] = [(ad.gelu, [r(17)])] + [(ad.gelu, [3 * r(*s)]) for s in shapes2()]
    cases["embedding_lookup"] = [
        (lambda t, ids=list(rng.integers(0, v, n)): ad.embedding_lookup(t, ids), [r(v, d)])
        for v, d, n in ((4, 3, 5), (6, 2, 6), (3, 5, 2), (7, 4, 9), (2, 2, 3))]
    cases["concat_rows"] = [(lambda a, b: ad.concat_rows([a, b]), [r(m1, d), r(m2, d)])
                            for m1, m2, d in ((1, 2, 3), (3, 1, 2), (2, 2, 5), (4, 3, 1), (1, 1, 4))]
    cases["concat_cols"] = [(lambda a, b: ad.concat_cols([a, b]), [r(m, d1), r(m, d2)])
                            for m, d1, d2 in ((1, 2, 3), (3, 1, 2), (2, 2, 5), (4, 3, 1), (1, 1, 4))]
    cases["slice_cols"] = [(lambda x, a=a, b=b: ad.slice_cols(x, a, b), [r(3, 6)])
                           for a, b in ((0, 2), (1, 4), (2, 6), (0, 6), (5, 6))]
    cases["cosine_rows"] = [(ad.cosine_rows, [r(m, d), r(n, d)])
                            for m, n, d in ((1, 1, 2), (3, 2, 4), (2, 5, 3), (4, 4, 6), (6, 1, 5))]
    cases["mean_rows"] = [(ad.mean_rows, [r(*s)]) for s in shapes2()]

    def ce(mask):
        return lambda x, t=list(rng.integers(0, x_v, len(mask))): ad.cross_entropy(x, t, mask)

    ce_cases = []
    for L, x_v in ((4, 3), (6, 5), (3, 7), (8, 4), (5, 6)):
        mask = [bool(i % 2 == 0) for i in range(L)]
        ce_cases.append((ce(mask), [r(L, x_v)]))
    cases["cross_entropy"] = ce_cases
    cases["causal_attention"] = [(_causal_attention, [r(n, d), r(n, d), r(n, d)])
                                 for n, d in ((1, 2), (3, 4), (5, 3), (4, 8), (6, 2))]
    return cases


@dataclass
class OpResult:
    op: str
    max_error: float
    checks: int

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(seed: int = 0) -> list[OpResult]:
    rng = np.random.default_rng(seed)
    results = []
    for op, cases in _cases(rng).items():
        worst = max(check(fn, arrays, rng) for fn, arrays in cases)
        results.append(OpResult(op, worst, len(cases)))
    return results


def main(seed: int = 0, echo: Callable[[str], None] = print) -> bool:
    t0 = time.perf_counter()
    results = run_suite(seed)
    for res in results:
        status = "ok  " if res.ok else "FAIL"
        echo(f"{status} {res.op:<18} max_rel_err={res.max_error:.3e} over {res.checks} shapes")
    echo(f"gradcheck finished in {time.perf_counter() - t0:.2f}s")
    return all(r.ok for r in results)
