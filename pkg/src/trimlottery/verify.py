"""Exact property suites with independent oracles.

Each suite returns a SuiteResult; ``run_suites`` runs a selection of them. The
oracles here deliberately avoid the code paths they check: naive loops instead
of im2col, Python sorting instead of lexsort, hand-derived cost tables.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import lottery as L
from . import model as M
from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-3
FD_TOL = 1e-3
EQUIV_TOL = 1e-5
CRITERION_TOL = 1e-6


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    cases: int = 0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail} ({self.cases} cases, {self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# 1. gradients


def numeric_grad(f, arrays, step=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            hi = f(*arrays)
            flat[j] = old - step
            lo = f(*arrays)
            flat[j] = old
            gflat[j] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check_gradient(op, arrays, seed=0):
    """Max relative error between reverse-mode and finite-difference gradients.

    ``op`` maps Tensors to a Tensor; it is reduced to a scalar through a fixed
    random projection so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = None

    def scalar(*arrs):
        nonlocal proj
        with T.no_grad():
            out = op(*[Tensor(a) for a in arrs]).data
        if proj is None:
            proj = np.random.default_rng(seed).standard_normal(out.shape)
        return float((out * proj).sum())

    scalar(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    loss = T.sum_all(T.mul(out, Tensor(proj)))
    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(scalar, arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _spaced(rng, shape, gap=0.05):
    """Values whose pairwise gaps exceed the finite-difference step (no kinks crossed)."""
    n = int(np.prod(shape))
    # offset by gap/3 so no value sits on a kink at zero
    vals = (rng.permutation(n) - n // 2) * gap + gap / 3
    return vals.reshape(shape)


def gradient_cases(seed=0, per_op=3):
    """(name, op, arrays) triples over random small shapes."""
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(per_op):
        b, n_in, n_out = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 5)
        cases.append(("affine", T.affine, [rng.standard_normal((b, n_in)), rng.standard_normal((n_out, n_in)),
                                            rng.standard_normal(n_out)]))

        c_in, c_out, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        stride, dil, pad = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
        length = int(dil * (k - 1) + 1 + rng.integers(0, 6))
        cases.append((
            f"conv1d(s={stride},d={dil},p={pad})",
            lambda x, W, bb, s=stride, d=dil, p=pad: T.conv1d(x, W, bb, s, d, p),
            [rng.standard_normal((2, c_in, length)), rng.standard_normal((c_out, c_in, k)),
             rng.standard_normal(c_out)],
        ))

        c = int(rng.integers(1, 4))
        shape = (int(rng.integers(3, 6)), c) if rng.random() < 0.5 else (int(rng.integers(2, 4)), c,
                                                                         int(rng.integers(2, 5)))
        cases.append((
            f"batchnorm1d{len(shape)}d",
            lambda x, g, bb, c=c: T.batchnorm1d(x, g, bb, T.BatchNormState(c, np.float64), True),
            [rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)],
        ))
        cases.append((
            "batchnorm1d-eval",
            lambda x, g, bb, c=c: T.batchnorm1d(x, g, bb, _random_state(c, seed), False),
            [rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)],
        ))

        shape = tuple(int(d) for d in rng.integers(1, 5, size=2))
        cases.append(("relu", T.relu, [_spaced(rng, shape)]))
        cases.append(("sigmoid", T.sigmoid, [rng.standard_normal(shape) * 3]))
        cases.append(("softmax", T.softmax, [rng.standard_normal(shape)]))
        cases.append(("add", T.add, [rng.standard_normal(shape), rng.standard_normal(shape)]))
        cases.append(("mul", T.mul, [rng.standard_normal(shape), rng.standard_normal(shape)]))
        cases.append(("sum_all", T.sum_all, [rng.standard_normal(shape)]))

        w = int(rng.integers(1, 4))
        pool_shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(w * rng.integers(1, 4) + rng.integers(0, w)))
        cases.append((f"maxpool1d(w={w})", lambda x, w=w: T.maxpool1d(x, w), [_spaced(rng, pool_shape)]))

        dseed = int(rng.integers(1 << 30))
        cases.append((
            "dropout",
            lambda x, s=dseed: T.dropout(x, 0.3, True, np.random.default_rng(s)),
            [rng.standard_normal(shape)],
        ))
        cases.append(("flatten", T.flatten, [rng.standard_normal((2, 3, int(rng.integers(1, 4))))]))

        k = int(rng.integers(2, 6))
        target = rng.integers(0, k, size=int(rng.integers(1, 5)))
        cases.append(("cross_entropy", lambda z, t=target: T.cross_entropy(z, t),
                      [rng.standard_normal((len(target), k))]))
        bce_t = rng.integers(0, 2, size=shape)
        cases.append(("binary_cross_entropy", lambda p, t=bce_t: T.binary_cross_entropy(p, t),
                      [rng.uniform(0.05, 0.95, shape)]))
    return cases


def _random_state(c, seed):
    rng = np.random.default_rng(seed + c)
    st = T.BatchNormState(c, np.float64)
    st.running_mean[:] = rng.standard_normal(c)
    st.running_var[:] = rng.uniform(0.5, 2.0, c)
    return st


def suite_gradients(seed=0, per_op=3) -> SuiteResult:
    start = time.perf_counter()
    worst, worst_name, failures = 0.0, "", []
    cases = gradient_cases(seed, per_op)
    for name, op, arrays in cases:
        err = check_gradient(op, arrays, seed)
        if err > worst:
            worst, worst_name = err, name
        if not err < FD_TOL:
            failures.append(f"{name}: {err:.2e}")
    detail = f"max relative error {worst:.2e} ({worst_name})"
    if failures:
        detail += "; failing: " + ", ".join(failures[:5])
    return SuiteResult("gradient correctness", not failures, detail, time.perf_counter() - start, len(cases))


# ---------------------------------------------------------------------------
# 2. trim / zeroing equivalence


def random_chain(rng):
    """A random chain mixing conv, batch-norm, pooling, flatten and dense layers."""
    specs = []
    if rng.random() < 0.7:
        c, length = int(rng.integers(1, 4)), int(rng.integers(12, 30))
        input_shape = (c, length)
        for _ in range(int(rng.integers(1, 4))):
            k = int(rng.integers(1, 4))
            dil = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            if T.conv_output_length(length, k, 1, dil, pad) < 1:
                k, dil = 1, 1
            specs.append(M.conv1d(int(rng.integers(2, 7)), k, stride=1, dilation=dil, padding=pad))
            length = T.conv_output_length(length, k, 1, dil, pad)
            if rng.random() < 0.6:
                specs.append(M.batchnorm())
            specs.append(M.relu())
            if rng.random() < 0.4 and length >= 4:
                specs.append(M.maxpool(2))
                length //= 2
            if rng.random() < 0.3:
                specs.append(M.dropout(0.2))
        specs.append(M.flatten())
    else:
        input_shape = (int(rng.integers(2, 9)),)
    for _ in range(int(rng.integers(0, 3))):
        specs.append(M.dense(int(rng.integers(2, 9))))
        if rng.random() < 0.6:
            specs.append(M.batchnorm())
        specs.append(M.relu())
        if rng.random() < 0.3:
            specs.append(M.dropout(0.1))
    specs.append(M.output_dense(int(rng.integers(1, 5))))
    return specs, input_shape


def randomize_state(model, rng):
    """Non-trivial batch-norm parameters and running statistics."""
    for layer in model.layers:
        if layer.kind == "batchnorm":
            c = layer.in_shape[0]
            layer.params["gamma"].data[:] = rng.uniform(0.5, 1.5, c)
            layer.params["beta"].data[:] = rng.uniform(-0.5, 0.5, c)
            layer.bn_state.running_mean[:] = rng.uniform(-0.2, 0.2, c)
            layer.bn_state.running_var[:] = rng.uniform(0.5, 1.5, c)
    return model


def random_plan(model, rng):
    keep = {}
    for i in model.prunable_layers():
        n = model.layers[i].width
        size = int(rng.integers(1, n + 1))
        keep[i] = np.sort(rng.choice(n, size=size, replace=False))
    return L.TrimPlan(keep)


def zeroed_equivalent(model, plan):
    """Same-shape copy with removed units' incoming, outgoing and batch-norm parameters zeroed."""
    z = model.clone()
    removed_out = None  # boolean over the current layer's input features
    for i, layer in enumerate(z.layers):
        if layer.is_weight:
            W, b = layer.params["W"].data, layer.params["b"].data
            if removed_out is not None:
                W[:, removed_out] = 0
            if i in plan.keep:
                gone = np.ones(layer.width, dtype=bool)
                gone[plan.keep[i]] = False
                W[gone] = 0
                b[gone] = 0
                removed_out = gone
            else:
                removed_out = None
        elif layer.kind == "batchnorm" and removed_out is not None:
            layer.params["gamma"].data[removed_out] = 0
            layer.params["beta"].data[removed_out] = 0
        elif layer.kind == "flatten" and removed_out is not None:
            removed_out = np.repeat(removed_out, layer.in_shape[1])
    return z


def suite_trim_equivalence(n_cases=100, seed=0) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for case in range(n_cases):
        specs, input_shape = random_chain(rng)
        model = randomize_state(M.build_model(specs, input_shape, seed=case), rng)
        plan = random_plan(model, rng)
        x = rng.standard_normal((4,) + input_shape).astype(np.float32)
        trimmed = L.trim(model, plan).predict(x)
        zeroed = zeroed_equivalent(model, plan).predict(x)
        diff = float(np.abs(trimmed - zeroed).max())
        worst = max(worst, diff)
        failures += not diff < EQUIV_TOL
    return SuiteResult("trim/zeroing equivalence", failures == 0,
                       f"max |trimmed - zeroed| = {worst:.2e}, {failures} failing",
                       time.perf_counter() - start, n_cases)


# ---------------------------------------------------------------------------
# 3. schedule arithmetic


def composed_floor(n, rate=0.3, iterations=15):
    """Survivor counts after each masking round, by integer arithmetic only."""
    # (1 - rate) as an exact ratio of integers, e.g. 0.3 -> 7/10
    num, den = (1 - Fraction(str(rate))).as_integer_ratio()
    counts = [n]
    for _ in range(iterations):
        counts.append(counts[-1] * num // den)
    return counts


def suite_schedule(seed=0, iterations=15, rate=0.3) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = M.build_model([M.conv1d(24, 5), M.relu(), M.flatten(), M.dense(40), M.relu(), M.output_dense(7)],
                          (3, 20), seed)
    mask = L.init_mask(model)
    expected = {i: composed_floor(m.size, rate, iterations) for i, m in mask.arrays.items()}
    problems = []
    for it in range(1, iterations + 1):
        for layer in model.layers:
            if "W" in layer.params:
                layer.params["W"].data[:] = rng.standard_normal(layer.params["W"].shape)
        mask = L.mask_update(model, mask, rate, "local")
        for i, m in mask.arrays.items():
            if int(m.sum()) != expected[i][it]:
                problems.append(f"layer {i} iter {it}: {int(m.sum())} != {expected[i][it]}")
    total = mask.size()
    remaining = mask.count()
    frac = remaining / total
    if not frac <= 0.005:
        problems.append(f"remaining fraction {frac:.5f} > 0.005")
    # the pure arithmetic claim on a round number
    if composed_floor(100, rate, 1)[-1] != 70:
        problems.append("100 weights at 0.3 do not leave 70")
    detail = f"{remaining}/{total} weights left after {iterations} rounds ({100 * frac:.3f}%)"
    if problems:
        detail += "; " + "; ".join(problems[:3])
    return SuiteResult("schedule arithmetic", not problems, detail, time.perf_counter() - start, iterations)


# ---------------------------------------------------------------------------
# 4. rewind exactness


def _expected_columns(model, plan):
    """For each weight layer, the original input columns that should survive."""
    cols, prev = {}, None
    for i, layer in enumerate(model.layers):
        if layer.is_weight:
            cols[i] = prev
            prev = np.asarray(plan.keep[i]) if i in plan.keep else None
        elif layer.kind == "flatten" and prev is not None:
            length = layer.in_shape[1]
            prev = np.array([c * length + t for c in prev for t in range(length)], dtype=np.int64)
    return cols


def suite_rewind(n_cases=10, seed=0) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad = []
    for case in range(n_cases):
        specs, input_shape = random_chain(rng)
        w_k = randomize_state(M.build_model(specs, input_shape, seed=case), rng)
        trained = w_k.clone()
        for t in trained.parameters():
            t.data += rng.standard_normal(t.shape).astype(t.dtype)
        snap = L.RewindSnapshot(w_k, epoch=5, seed=case)

        # trim
        plan = random_plan(trained, rng)
        rewound = L.rewind(L.trim(trained, plan), snap, plan)
        cols = _expected_columns(w_k, plan)
        for i in w_k.weight_layers():
            W = w_k.layers[i].params["W"].data
            rows = plan.keep.get(i, np.arange(W.shape[0]))
            want = W[rows]
            if cols[i] is not None:
                want = want[:, cols[i]]
            if not np.array_equal(rewound.layers[i].params["W"].data, want):
                bad.append(f"trim case {case} layer {i}")
            if not np.array_equal(rewound.layers[i].params["b"].data, w_k.layers[i].params["b"].data[rows]):
                bad.append(f"trim case {case} bias {i}")

        # mask
        mask = L.Mask({i: rng.random(w_k.layers[i].params["W"].shape) < 0.6 for i in w_k.weight_layers()})
        rewound = L.rewind(trained.clone(), snap, mask)
        for i in w_k.weight_layers():
            W = w_k.layers[i].params["W"].data
            got = rewound.layers[i].params["W"].data
            m = mask.arrays[i]
            if not (np.array_equal(got[m], W[m]) and not got[~m].any()):
                bad.append(f"mask case {case} layer {i}")
    return SuiteResult("rewind exactness", not bad, "all survivors bitwise equal W_k" if not bad else
                       "mismatch: " + ", ".join(bad[:4]), time.perf_counter() - start, 2 * n_cases)


# ---------------------------------------------------------------------------
# 5. criteria and ranking


def to_float64(model):
    """Copy of ``model`` computing in double precision."""
    m = model.clone()
    for layer in m.layers:
        for name, t in layer.params.items():
            layer.params[name] = Tensor(t.data.astype(np.float64), requires_grad=True)
        if layer.bn_state is not None:
            layer.bn_state.running_mean = layer.bn_state.running_mean.astype(np.float64)
            layer.bn_state.running_var = layer.bn_state.running_var.astype(np.float64)
    return m


def naive_forward(model, x):
    """Eval-mode forward for one example with explicit loops; returns every layer's output."""
    outs = []
    a = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        s, p = layer.spec, layer.params
        if s.kind == "conv1d":
            W, b = p["W"].data.astype(np.float64), p["b"].data.astype(np.float64)
            if layer.mask is not None:
                W = W * layer.mask
            xp = np.pad(a, ((0, 0), (s.padding, s.padding)))
            l_out = (xp.shape[1] - s.dilation * (s.kernel - 1) - 1) // s.stride + 1
            y = np.zeros((W.shape[0], l_out))
            for o in range(W.shape[0]):
                for t in range(l_out):
                    acc = b[o]
                    for c in range(W.shape[1]):
                        for j in range(s.kernel):
                            acc += W[o, c, j] * xp[c, t * s.stride + j * s.dilation]
                    y[o, t] = acc
            a = y
        elif s.kind in ("dense", "output-dense"):
            W, b = p["W"].data.astype(np.float64), p["b"].data.astype(np.float64)
            if layer.mask is not None:
                W = W * layer.mask
            a = np.array([b[o] + sum(W[o, i] * a[i] for i in range(len(a))) for o in range(W.shape[0])])
        elif s.kind == "batchnorm":
            st = layer.bn_state
            shape = (-1, 1) if a.ndim == 2 else (-1,)
            a = ((a - st.running_mean.reshape(shape)) / np.sqrt(st.running_var.reshape(shape) + T.BN_EPS)
                 * p["gamma"].data.reshape(shape) + p["beta"].data.reshape(shape))
        elif s.kind == "relu":
            a = np.maximum(a, 0)
        elif s.kind == "maxpool":
            n = a.shape[1] // s.window
            a = np.array([[max(a[c, t * s.window : (t + 1) * s.window]) for t in range(n)] for c in range(len(a))])
        elif s.kind == "flatten":
            a = a.reshape(-1)
        outs.append(a)
    return outs


def activation_oracle(model, inputs):
    """Per prunable layer: sum over examples and time of |output after its ReLU|."""
    scores = {}
    for x in inputs:
        outs = naive_forward(model, x)
        for i in model.prunable_layers():
            j = i
            for k in range(i + 1, len(model.layers)):
                kind = model.layers[k].kind
                if kind == "relu":
                    j = k
                    break
                if kind in M.WEIGHT_KINDS or kind == "flatten":
                    break
            a = np.abs(outs[j])
            s = a.sum(axis=1) if a.ndim == 2 else a
            scores[i] = scores.get(i, 0) + s
    return scores


def magnitude_oracle(layer):
    W = layer.params["W"].data.astype(np.float64)
    if layer.mask is not None:
        W = W * layer.mask
    return np.array([sum(abs(v) for v in np.nditer(W[o])) for o in range(W.shape[0])])


def rank_oracle(scores, scope, rate):
    """Kept units by a full Python sort of every candidate."""
    keep_frac = 1 - Fraction(str(rate))
    layers = sorted(scores)
    if scope == "local":
        out = {}
        for i in layers:
            s = [float(v) for v in scores[i]]
            order = sorted(range(len(s)), key=lambda u: (-s[u], u))
            out[i] = sorted(order[: math.ceil(keep_frac * len(s))])
        return out
    units = []
    for p, i in enumerate(layers):
        s = [float(v) for v in scores[i]]
        total = sum(np.asarray(scores[i], dtype=np.float64))
        for u, v in enumerate(s):
            units.append((float(np.float64(v) / total) if total > 0 else v, -u, -p, p, u))
    units.sort()
    n_drop = len(units) - math.ceil(keep_frac * len(units))
    left = {p: len(scores[i]) for p, i in enumerate(layers)}
    dropped = set()
    for *_, p, u in units:
        if len(dropped) == n_drop:
            break
        if left[p] > 1:
            dropped.add((p, u))
            left[p] -= 1
    return {i: [u for u in range(len(scores[i])) if (p, u) not in dropped] for p, i in enumerate(layers)}


def _close(a, b, tol=CRITERION_TOL):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return a.shape == b.shape and bool(np.all(np.abs(a - b) <= tol * np.maximum(1.0, np.abs(b))))


def suite_criteria(n_cases=10, seed=0) -> SuiteResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    bad, checks = [], 0
    for case in range(n_cases):
        specs, input_shape = random_chain(rng)
        model = to_float64(randomize_state(M.build_model(specs, input_shape, seed=case), rng))
        inputs = rng.standard_normal((5,) + input_shape)
        act = L.criterion_activation(model, inputs)
        want_act = activation_oracle(model, inputs)
        for i in model.prunable_layers():
            checks += 2
            if not _close(L.criterion_magnitude(model.layers[i]), magnitude_oracle(model.layers[i])):
                bad.append(f"magnitude case {case} layer {i}")
            if not _close(act[i], want_act[i]):
                bad.append(f"activation case {case} layer {i}")
            j = model.batchnorm_after(i)
            if j is not None:
                checks += 1
                want = np.array([abs(float(g)) for g in model.layers[j].params["gamma"].data])
                if not _close(L.criterion_batchnorm(model, i), want):
                    bad.append(f"batchnorm case {case} layer {i}")

    for case in range(60):
        n_layers = int(rng.integers(1, 4))
        # small integer scores force ties within and across layers
        scores = {2 * k: rng.integers(0, 4, size=int(rng.integers(1, 12))).astype(np.float64)
                  for k in range(n_layers)}
        if case % 3 == 0:
            scores = {k: rng.random(int(rng.integers(1, 12))) for k in range(n_layers)}
        for scope in ("local", "global"):
            rate = float(rng.choice([0.3, 0.5, 0.1, 0.75]))
            checks += 1
            got = L.rank_units(scores, scope, rate).keep
            want = rank_oracle(scores, scope, rate)
            if any(list(got[i]) != want[i] for i in scores):
                bad.append(f"rank case {case} {scope} rate {rate}")
    return SuiteResult("criterion oracles", not bad, f"{checks} checks" + ("" if not bad else
                       "; mismatch: " + ", ".join(bad[:4])), time.perf_counter() - start, checks)


# ---------------------------------------------------------------------------
# 6. determinism


def determinism_config(out):
    from .harness import ExperimentConfig

    return ExperimentConfig(task="pitch", iterations=2, repetitions=1, epochs=2, dataset_size=1000,
                            out=str(out), timing=False)


def suite_determinism(workdir=None) -> SuiteResult:
    from .harness import run_sweep

    start = time.perf_counter()
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        blobs = []
        for name in ("a", "b"):
            cfg = determinism_config(Path(tmp) / name)
            run_sweep(cfg)
            blobs.append((Path(cfg.out) / "curves.csv").read_bytes())
    same = blobs[0] == blobs[1]
    detail = f"curves.csv {len(blobs[0])} bytes, " + ("identical" if same else "differs")
    return SuiteResult("determinism", same, detail, time.perf_counter() - start, 2)


# ---------------------------------------------------------------------------
# 7. cost accounting

# (name, layer specs, input shape, hand-derived params, hand-derived FLOPS)
COST_FIXTURES = (
    # 3*2 + 2 = 8 params; 2*3*2 + 2 = 14 FLOPS
    ("dense 3->2", (M.output_dense(2),), (3,), 8, 14),
    # (50 + 5) + (10 + 2); (2*10*5 + 5) + (2*5*2 + 2)
    ("dense 10->5->2", (M.dense(5), M.output_dense(2)), (10,), 67, 127),
    # conv 1->2 k3 on L=6 gives L_out=4: 6 + 2 params, 4*(2*3*1+1)*2 = 56 FLOPS;
    # dense 8->1: 9 params, 17 FLOPS
    ("conv k3 + dense", (M.conv1d(2, 3), M.flatten(), M.output_dense(1)), (1, 6), 17, 73),
    # conv 2->3 k5 on L=10: 33 params, 6*(2*5*2+1)*3 = 378; bn 6 params, 2*18 = 36;
    # relu 18; pool 2 -> 9 outputs, 9 compares; dense 9->4: 40 params, 76
    ("conv-bn-relu-pool + dense",
     (M.conv1d(3, 5), M.batchnorm(), M.relu(), M.maxpool(2), M.flatten(), M.output_dense(4)),
     (2, 10), 79, 517),
    # dense 4->6: 30 params, 54; bn 12 params, 12; relu 6; dropout 0; dense 6->3: 21 params, 39
    ("dense-bn-relu-dropout",
     (M.dense(6), M.batchnorm(), M.relu(), M.dropout(0.5), M.output_dense(3)), (4,), 63, 111),
    # conv 1->4 k3 stride 2 dilation 2 padding 1 on L=9: L_out = (9+2-4-1)//2+1 = 4;
    # 12 + 4 params, 4*(2*3+1)*4 = 112
    ("strided dilated conv", (M.conv1d(4, 3, stride=2, dilation=2, padding=1),), (1, 9), 16, 112),
)


def suite_costs() -> SuiteResult:
    start = time.perf_counter()
    bad = []
    for name, specs, shape, params, flops in COST_FIXTURES:
        model = M.build_model(specs, shape)
        got_p, got_f = M.count_params(model), M.count_flops(model)
        if (got_p, got_f) != (params, flops):
            bad.append(f"{name}: params {got_p} (want {params}), flops {got_f} (want {flops})")
    return SuiteResult("cost accounting", not bad, "all fixtures exact" if not bad else "; ".join(bad),
                       time.perf_counter() - start, len(COST_FIXTURES))


SUITES = {
    "gradients": suite_gradients,
    "trim-equivalence": suite_trim_equivalence,
    "schedule": suite_schedule,
    "rewind": suite_rewind,
    "criteria": suite_criteria,
    "determinism": suite_determinism,
    "costs": suite_costs,
}


def run_suites(names=None, echo=print):
    results = []
    for name in names or SUITES:
        res = SUITES[name]()
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
