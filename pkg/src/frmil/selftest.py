"""Built-in verification: finite-difference gradient checks for every
differentiable operation plus oracle-equivalence checks against naive
reference implementations. All gradient checks run in float64 with
h = 1e-5 against a 1e-4 relative-error budget."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .bagdata import SyntheticSpec, generate_synthetic, make_bag
from .baseline import baseline_classify
from .model import bag_forward, init_params
from .objectives import LossWeights, total_loss
from .training import auc

GRAD_TOL = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<38s} max err {self.max_err:.3e} (tol {self.tol:.0e})"


def _t(rng, shape, shift=0.0):
    return Tensor(rng.normal(size=shape) + shift, requires_grad=True,
                  dtype=np.float64)


def _scalarize(x: Tensor) -> Tensor:
    flat = ad.reshape(x, (x.data.size,))
    return ad.masked_reduce("sum", ad.mul(flat, flat), np.ones(x.data.size, bool))


def _check(name: str, builder: Callable[[np.random.Generator], tuple],
           seeds=range(4)) -> CheckResult:
    """builder returns (f, params); worst error over the seeds is reported."""
    worst = 0.0
    for seed in seeds:
        f, params = builder(np.random.default_rng(seed))
        worst = max(worst, grad_check(f, params, h=STEP))
    return CheckResult(name, worst, GRAD_TOL)


def gradient_checks() -> List[CheckResult]:
    """Per-operation finite-difference suite."""
    results = []

    def dims(rng):
        return int(rng.integers(2, 6)), int(rng.integers(2, 6))

    def b_matmul(rng):
        n, d = dims(rng)
        a, b = _t(rng, (n, d)), _t(rng, (d, n))
        return lambda: _scalarize(ad.matmul(a, b)), [a, b]
    results.append(_check("matmul", b_matmul))

    def b_elementwise(rng):
        n, d = dims(rng)
        a, b, row = _t(rng, (n, d)), _t(rng, (n, d)), _t(rng, (1, d))
        def f():
            out = ad.mul(ad.add(a, row), ad.sub(b, 0.25))
            return _scalarize(ad.scale(out, 1.7))
        return f, [a, b, row]
    results.append(_check("elementwise add/sub/mul/scale", b_elementwise))

    def b_relu(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d), shift=0.3)  # stay clear of the kink
        return lambda: _scalarize(ad.relu(a)), [a]
    results.append(_check("relu", b_relu))

    def b_sigmoid(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d))
        return lambda: _scalarize(ad.sigmoid(a)), [a]
    results.append(_check("sigmoid", b_sigmoid))

    def b_log_clamp(rng):
        n, d = dims(rng)
        a = Tensor(rng.uniform(0.3, 0.7, size=(n, d)), requires_grad=True,
                   dtype=np.float64)
        return lambda: _scalarize(ad.log(ad.clamp(a, 1e-7, 1 - 1e-7))), [a]
    results.append(_check("log/clamp", b_log_clamp))

    def b_softmax(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d + 1))
        mask = rng.random(d + 1) < 0.7
        mask[0] = True
        return lambda: _scalarize(ad.softmax_lastdim(a, mask=mask)), [a]
    results.append(_check("softmax_lastdim (masked)", b_softmax))

    def b_layer_norm(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d + 1))
        gain = _t(rng, (d + 1,), shift=1.0)
        bias = _t(rng, (d + 1,))
        return lambda: _scalarize(ad.layer_norm(a, gain, bias)), [a, gain, bias]
    results.append(_check("layer_norm", b_layer_norm))

    def b_conv(rng):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(1, 4))
        a = _t(rng, (1, c, h, h))
        w = _t(rng, (c, 3, 3))
        b = _t(rng, (c,))
        def f():
            out = ad.depthwise_conv2d_3x3(a, w, b)
            return _scalarize(ad.reshape(out, (c, h * h)))
        return f, [a, w, b]
    results.append(_check("depthwise_conv2d_3x3", b_conv))

    def b_masked_reduce(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d))
        mask = rng.random(n) < 0.6
        mask[0] = True
        def f():
            s = ad.masked_reduce("mean", a, mask)
            v = ad.masked_reduce("sum", ad.l2_norm_rows(a, squared=True), mask)
            return ad.add(_scalarize(s), v)
        return f, [a]
    results.append(_check("masked_reduce sum/mean", b_masked_reduce))

    def b_norms(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d), shift=0.5)
        def f():
            u = ad.masked_reduce("sum", ad.l2_norm_rows(a), np.ones(n, bool))
            s = ad.masked_reduce("sum", ad.l2_norm_rows(a, squared=True),
                                 np.ones(n, bool))
            return ad.add(u, s)
        return f, [a]
    results.append(_check("l2_norm_rows", b_norms))

    def b_structural(rng):
        n, d = dims(rng)
        a, b = _t(rng, (n, d)), _t(rng, (n, d))
        idx = rng.integers(0, 2 * n, size=n + 1)
        def f():
            cat = ad.concat_rows([a, b])
            picked = ad.take_rows(cat, idx)
            wide = ad.concat_cols([picked, ad.scale(picked, 0.5)])
            cols = ad.slice_cols(wide, 1, d + 1)
            back = ad.transpose2d(ad.reshape(cols, (d, n + 1)))
            return _scalarize(back)
        return f, [a, b]
    results.append(_check("concat/reshape/transpose/gather", b_structural))

    def b_dropout(rng):
        n, d = dims(rng)
        a = _t(rng, (n, d))
        fixed = int(rng.integers(0, 1000))
        def f():
            out = ad.dropout(a, 0.3, training=True,
                             rng=np.random.default_rng(fixed))
            return _scalarize(out)
        return f, [a]
    results.append(_check("dropout (training)", b_dropout))

    def b_total_loss(rng):
        params = init_params(8, 2, seed=int(rng.integers(0, 1000)))
        for t in params.named().values():
            t.data = t.data.astype(np.float64)
        pos = make_bag("p", 1, rng.normal(size=(int(rng.integers(3, 7)), 8)))
        neg = make_bag("n", 0, rng.normal(size=(int(rng.integers(2, 7)), 8)))
        weights = LossWeights(0.33, 0.33, 0.33, tau=2.0)
        def f():
            tp = bag_forward(pos, params)
            tn = bag_forward(neg, params)
            return total_loss(tp, tn, (1, 0), weights)[0]
        return f, list(params.named().values())
    results.append(_check("total_loss end-to-end (D=8, k=2)", b_total_loss,
                          seeds=range(2)))
    return results


def _naive_conv(x, w, b):
    B, C, H, W = x.shape
    out = np.zeros_like(x)
    for bi in range(B):
        for c in range(C):
            for y in range(H):
                for xx in range(W):
                    acc = b[c]
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xc = y + dy, xx + dx
                            if 0 <= yy < H and 0 <= xc < W:
                                acc += w[c, dy + 1, dx + 1] * x[bi, c, yy, xc]
                    out[bi, c, y, xx] = acc
    return out


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def _brute_force_baseline(bags, tau, recalibrate):
    preds = []
    for bag in bags:
        h = bag.features[bag.mask].astype(np.float64)
        if recalibrate:
            norms = [float(sum(v * v for v in row)) for row in h]
            h = h - h[norms.index(max(norms))].copy()
        mu = sum(float(sum(v * v for v in row)) for row in h) / len(h)
        preds.append(1 if min(tau, mu) / tau >= 0.5 else 0)
    return preds


def oracle_checks() -> List[CheckResult]:
    """Fast paths against naive reference implementations."""
    results = []

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(6):
        B = int(rng.integers(1, 3))
        C = int(rng.integers(1, 9))
        H = int(rng.integers(1, 8))
        W = int(rng.integers(1, 8))
        x = rng.normal(size=(B, C, H, W))
        w = rng.normal(size=(C, 3, 3))
        b = rng.normal(size=C)
        fast = ad.depthwise_conv2d_3x3(
            Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
            Tensor(b, dtype=np.float64)).data
        worst = max(worst, float(np.abs(fast - _naive_conv(x, w, b)).max()))
    results.append(CheckResult("conv vs naive 9-term loop (exact)", worst, 0.0))

    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 40))
        scores = np.round(rng.random(n), 2)
        labels = (rng.random(n) < 0.5).astype(int)
        labels[0], labels[-1] = 1, 0
        worst = max(worst, abs(auc(scores, labels)
                               - _pairwise_auc(scores, labels)))
    results.append(CheckResult("auc vs pairwise statistic (exact)", worst, 0.0))

    bags = generate_synthetic(SyntheticSpec(n_bags=50, dim=12, bag_min=2,
                                            bag_max=9, seed=3))
    mism = 0
    for recal in (False, True):
        report = baseline_classify(bags, tau=80.0, recalibrate=recal)
        got = [row[4] for row in report.rows]
        mism += sum(int(a != b) for a, b
                    in zip(got, _brute_force_baseline(bags, 80.0, recal)))
    results.append(CheckResult("baseline vs brute-force script (exact)",
                               float(mism), 0.0))

    x = np.array([1.0, 2.0, 3.0])
    closed = np.exp(x) / np.exp(x).sum()
    got = ad.softmax_lastdim(Tensor(x.astype(np.float32))).data
    results.append(CheckResult("softmax vs 64-bit closed form",
                               float(np.abs(got - closed).max()), 1e-7))

    with np.errstate(over="raise"):
        lo = ad.sigmoid(Tensor(np.array([-1000.0]))).item()
        hi = ad.sigmoid(Tensor(np.array([500.0]))).item()
    results.append(CheckResult("sigmoid extreme-input stability",
                               abs(lo - 0.0) + abs(hi - 1.0), 1e-12))
    return results


def run_selftest(printer=print) -> bool:
    """Run both suites; one line per check; True iff everything passed."""
    t0 = time.time()
    results = gradient_checks() + oracle_checks()
    ok = True
    for res in results:
        printer(res.line())
        ok = ok and res.passed
    printer(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in results)}"
            f"/{len(results)} checks in {time.time() - t0:.1f}s")
    return ok
