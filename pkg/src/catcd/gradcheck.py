"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, no_grad


@dataclass
class ParamReport:
    name: str
    shape: tuple
    checked: int
    max_rel_error: float
    max_abs_error: float
    zero_grad: bool = False
    kinks: int = 0  # probes dropped because the stencil crossed a non-smooth point


@dataclass
class GradCheckReport:
    params: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def failures(self):
        return [p for p in self.params if p.max_rel_error > self.tol]

    def lines(self):
        for p in self.params:
            flag = "ok" if p.max_rel_error <= self.tol else "FAIL"
            note = " (disconnected, zero grad)" if p.zero_grad else ""
            if p.kinks:
                note += f" ({p.kinks} probes straddled a kink)"
            yield (
                f"{p.name:48s} {str(p.shape):18s} n={p.checked:<5d} "
                f"rel={p.max_rel_error:.3e} abs={p.max_abs_error:.3e} {flag}{note}"
            )


def _traced(f):
    """Evaluate ``f`` and return its value plus the kink sides of every non-smooth op."""
    from . import ops

    ops.KINK_TRACE = []
    try:
        value = f().item()
        return value, ops.KINK_TRACE
    finally:
        ops.KINK_TRACE = None


def _same_side(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, params, h=1e-3, tol=1e-4, max_entries=None, seed=0, names=None):
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``params`` are tensors whose ``data`` is perturbed in place; they should be
    float64.  With ``max_entries`` only that many entries per tensor are probed:
    the entry with the largest analytic gradient plus a seeded random sample.
    The relative error normalizes by the full analytic gradient's largest
    magnitude, so subsampling does not shrink the denominator.

    A probe whose +h and -h evaluations put some ``abs`` input on different
    sides of zero measures the average of two one-sided slopes, not the
    derivative; such probes are dropped (and replaced when sampling).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            queue = list(range(flat.size))
            want = flat.size
        else:
            top = int(np.argmax(np.abs(gflat)))
            rest = [int(i) for i in rng.permutation(flat.size) if i != top]
            queue = [top] + rest
            want = max_entries
        entries, numeric = [], []
        kinks = 0
        with no_grad():
            for i in queue:
                if len(entries) >= want:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp, side_p = _traced(f)
                flat[i] = orig - h
                fm, side_m = _traced(f)
                flat[i] = orig
                if not _same_side(side_p, side_m):
                    kinks += 1
                    continue
                entries.append(i)
                numeric.append((fp - fm) / (2 * h))
        numeric = np.asarray(numeric)
        diff = float(np.max(np.abs(gflat[entries] - numeric))) if entries else 0.0
        scale_ = max(np.max(np.abs(gflat), initial=0.0), np.max(np.abs(numeric), initial=0.0))
        zero = scale_ == 0.0
        rel = 0.0 if zero else float(diff / scale_)
        name = names[idx] if names else getattr(p, "name", "") or f"param{idx}"
        report.params.append(
            ParamReport(name, p.shape, len(entries), rel, diff, zero_grad=bool(zero and diff == 0.0), kinks=kinks)
        )
    return report


# ----------------------------------------------------------------------------
# suites used by ``catcd gradcheck``
# ----------------------------------------------------------------------------

SCOPES = ("op", "block", "model")


@dataclass
class Case:
    name: str
    f: object  # zero-argument callable returning a scalar Tensor
    params: list
    max_entries: object = None


def _weighted(out, rng):
    """Scalar probe ``sum(out * R)`` with a fixed random ``R``; plain sums hide some errors."""
    from . import ops
    from .autograd import Tensor

    r = Tensor(rng.standard_normal(out.shape))
    return ops.sum(ops.mul(out, r))


def op_cases(seed=0):
    """One case per differentiable op, float64, shapes of a few dozen entries."""
    from . import ops
    from .autograd import Parameter

    rng = np.random.default_rng(seed)

    def P(*shape, name="x", positive=False):
        data = rng.standard_normal(shape)
        if positive:
            data = np.abs(data) + 0.5
        return Parameter(data, name=name)

    cases = []

    def add_case(name, fn, params):
        probe = np.random.default_rng([seed, len(cases)])
        with no_grad():
            shape = fn(*params).shape
        r = probe.standard_normal(shape)

        def f():
            from .autograd import Tensor
            return ops.sum(ops.mul(fn(*params), Tensor(r)))

        cases.append(Case(name, f, params))

    a, b = P(3, 4, name="a"), P(3, 4, name="b")
    add_case("add", ops.add, [a, b])
    add_case("sub", ops.sub, [P(3, 4, name="a"), P(3, 4, name="b")])
    add_case("mul", ops.mul, [P(3, 4, name="a"), P(3, 4, name="b")])
    add_case("scale", lambda x: ops.scale(x, 0.7), [P(3, 4)])
    add_case("abs", ops.abs, [P(3, 4, positive=True)])
    add_case("add_bias", lambda x, bb: ops.add_bias(x, bb, axis=1), [P(2, 3, 2, 2), P(3, name="b")])
    add_case("expand", lambda x: ops.expand(x, (2, 3, 4)), [P(2, 1, 4)])
    add_case("gelu", ops.gelu, [P(4, 5)])
    add_case("softmax", lambda x: ops.softmax(x, axis=-1), [P(3, 5)])
    add_case("log_softmax", lambda x: ops.log_softmax(x, axis=1), [P(2, 3, 4)])
    add_case("sum", lambda x: ops.sum(x, axis=1, keepdims=True), [P(3, 4)])
    add_case("mean", lambda x: ops.mean(x, axis=0), [P(3, 4)])
    add_case("reshape", lambda x: ops.reshape(x, (4, 3)), [P(3, 4)])
    add_case("transpose", lambda x: ops.transpose(x, (2, 0, 1)), [P(2, 3, 4)])
    add_case("concat", lambda x, y: ops.concat([x, y], axis=1), [P(2, 3, name="a"), P(2, 2, name="b")])
    add_case("getitem", lambda x: ops.getitem(x, (slice(None), slice(1, 3))), [P(3, 4)])
    add_case("matmul", ops.matmul, [P(2, 3, 4, name="a"), P(2, 4, 5, name="b")])
    add_case("linear", ops.linear, [P(2, 3, 4), P(4, 5, name="W"), P(5, name="b")])
    add_case("conv2d_3x3", ops.conv2d, [P(2, 3, 5, 4), P(4, 3, 3, 3, name="W"), P(4, name="b")])
    add_case("conv2d_1x1", ops.conv2d, [P(2, 3, 4, 4), P(2, 3, 1, 1, name="W"), P(2, name="b")])
    add_case("avg_pool2d", lambda x: ops.avg_pool2d(x, 2), [P(2, 3, 4, 6)])
    add_case("global_avg_pool", ops.global_avg_pool, [P(2, 3, 4, 4)])
    add_case("pixel_shuffle", lambda x: ops.pixel_shuffle(x, 2), [P(1, 8, 2, 3)])
    add_case("pixel_unshuffle", lambda x: ops.pixel_unshuffle(x, 2), [P(1, 2, 4, 6)])
    add_case("layer_norm", ops.layer_norm, [P(3, 5), P(5, name="gamma"), P(5, name="beta")])
    state = ops.BatchNormState(3, dtype=np.float64)
    add_case(
        "batch_norm2d_train",
        lambda x, g, bb: ops.batch_norm2d(x, g, bb, state, True),
        [P(2, 3, 3, 3), P(3, name="gamma"), P(3, name="beta")],
    )
    frozen = ops.BatchNormState(3, dtype=np.float64)
    frozen.running_mean = rng.standard_normal(3)
    frozen.running_var = rng.random(3) + 0.5
    add_case(
        "batch_norm2d_eval",
        lambda x, g, bb: ops.batch_norm2d(x, g, bb, frozen, False),
        [P(2, 3, 3, 3), P(3, name="gamma"), P(3, name="beta")],
    )
    add_case("cosine_similarity", ops.cosine_similarity, [P(2, 5, 4, name="q"), P(2, 4, name="k")])
    labels = rng.integers(0, 3, size=(2, 4))
    add_case("cross_entropy", lambda x: ops.cross_entropy(x, labels, axis=1), [P(2, 3, 4)])
    return cases


JITTER_FLOOR = 0.2


def move_off_init(module, rng, floor=JITTER_FLOOR):
    """Perturb every parameter and randomize batch-norm running statistics.

    Each tensor gets N(0, max(rms, floor)) noise.  At initialization several
    biases are exactly zero and the attention projections are tiny, so cosine
    attention sits where its curvature scales like 1/|q|^2 and h = 1e-3
    central differences measure truncation error rather than gradient bugs.
    A generic nearby point avoids that without changing any code path.
    """
    for p in module.parameters():
        rms = float(np.sqrt(np.mean(p.data ** 2)))
        p.data += rng.standard_normal(p.shape) * max(rms, floor)
    for _, bn, attr in module.named_buffers():
        if attr == "running_mean":
            bn.running_mean = rng.standard_normal(bn.channels) * 0.1
        else:
            bn.running_var = rng.uniform(0.5, 1.5, bn.channels)
    return module


def _module_case(name, module, forward, max_entries, rng):
    module.assign_names()
    move_off_init(module, rng)
    return Case(name, forward, module.parameters(), max_entries)


def block_cases(seed=0, max_entries=12):
    """Module-level cases (CAT block variants, encoder, decoder, classifier) at tiny sizes."""
    from .attention import CATBlock, CATBlockConfig
    from .autograd import Tensor, default_dtype
    from .decoder import Classifier, DenseUpsampleDecoder
    from .encoder import SiameseEncoder

    rng = np.random.default_rng(seed)
    cases = []
    with default_dtype(np.float64):
        for label, kw in (
            ("cat_block", {}),
            ("cat_block_no_gc", {"use_gc_cross": False}),
            ("cat_block_no_sa", {"use_self_attn": False}),
        ):
            block = CATBlock(rng, 8, CATBlockConfig(window_size=2, heads=2, **kw))
            x = Tensor(rng.standard_normal((2, 8, 4, 4)))
            r1 = Tensor(rng.standard_normal((2, 8, 4, 4)))
            r2 = Tensor(rng.standard_normal((2, 2, 4, 4)))

            def f(block=block, x=x, r1=r1, r2=r2):
                from . import ops
                out, mask = block(x)
                return ops.add(ops.sum(ops.mul(out, r1)), ops.sum(ops.mul(mask, r2)))

            cases.append(_module_case(label, block, f, max_entries, rng))

        enc = SiameseEncoder(rng, (4, 4, 4), (1, 1, 1), stem_channels=4)
        img = Tensor(rng.random((2, 3, 64, 64)))
        probes = [Tensor(rng.standard_normal((2, 4, s, s))) for s in (16, 8, 4)]

        def f_enc():
            from . import ops
            total = None
            for feat, r in zip(enc(img), probes):
                term = ops.sum(ops.mul(feat, r))
                total = term if total is None else ops.add(total, term)
            return total

        cases.append(_module_case("encoder", enc, f_enc, max_entries, rng))

        dud = DenseUpsampleDecoder(rng, (4, 4, 4))
        ds = [Tensor(rng.standard_normal((2, 4, s, s))) for s in (8, 4, 2)]
        r_dud = Tensor(rng.standard_normal((2, 4, 8, 8)))

        def f_dud():
            from . import ops
            return ops.sum(ops.mul(dud(*ds), r_dud))

        cases.append(_module_case("dud", dud, f_dud, max_entries, rng))

        head = Classifier(rng, 4, 4)
        xc = Tensor(rng.standard_normal((2, 4, 4, 4)))
        r_head = Tensor(rng.standard_normal((2, 2, 16, 16)))

        def f_head():
            from . import ops
            return ops.sum(ops.mul(head(xc), r_head))

        cases.append(_module_case("classifier", head, f_head, max_entries, rng))
    return cases


TINY_MODEL = dict(image_size=16, channels=(8, 8, 8), encoder_blocks=(1, 1, 1), heads=(2, 2, 2))


def model_case(seed=0, max_entries=6, cfg=None, training=False):
    """Full detector plus deep-supervision loss on one 1 x 3 x 16 x 16 pair, float64.

    Batch norm runs on running statistics by default: at batch 1 the coarse
    maps are 2x2 and 1x1, where batch statistics make the loss too curved for
    h = 1e-3 (and degenerate at 1x1).  Train-mode batch norm is covered by the
    op and block suites.
    """
    from .autograd import Tensor
    from .model import CATChangeDetector, ModelConfig
    from .training import full_loss

    cfg = cfg or ModelConfig(**TINY_MODEL)
    model = CATChangeDetector(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    move_off_init(model, rng)
    model.train(training)
    size = cfg.image_size
    x1 = Tensor(rng.random((1, 3, size, size)))
    x2 = Tensor(rng.random((1, 3, size, size)))
    label = np.zeros((1, size, size), np.uint8)
    label[:, size // 4:size // 2 + 2, size // 4:3 * size // 4] = 1

    def f():
        logits, masks = model(x1, x2)
        return full_loss(logits, masks, label)

    return Case("model", f, model.parameters(), max_entries)


def run_scope(scope, seed=0, h=1e-3, tol=1e-4, max_entries=None):
    """Run a whole suite; returns ``[(case_name, GradCheckReport)]``."""
    if scope == "op":
        cases = op_cases(seed)
    elif scope == "block":
        cases = block_cases(seed, max_entries or 12)
    elif scope == "model":
        cases = [model_case(seed, max_entries or 6)]
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {', '.join(SCOPES)}")
    out = []
    for case in cases:
        names = [f"{case.name}.{getattr(p, 'name', '') or i}" for i, p in enumerate(case.params)]
        rep = grad_check(case.f, case.params, h=h, tol=tol, max_entries=case.max_entries, seed=seed, names=names)
        out.append((case.name, rep))
    return out
