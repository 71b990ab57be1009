"""Finite-difference gradient checks for every differentiable op.

Each configuration builds a small 64-bit graph, reduces it to a scalar through
a fixed random projection, and compares every analytic input gradient against
central finite differences (h = 1e-5).  Kinked ops (relu, elu, maxpool) get
inputs nudged away from their non-smooth points so the differences are valid.

The suite is deliberately importable: the unit tests assert per-op results and
the acceptance test re-runs the whole list under a stopwatch.
"""

from dataclasses import dataclass

import numpy as np

from epgstage import autodiff as ad

H = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    config: str
    rel_err: float

    @property
    def passed(self) -> bool:
        return self.rel_err < TOLERANCE


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-10)
    return float(np.abs(analytic - numeric).max() / denom)


def _away_from(x: np.ndarray, gap: float = 1e-2) -> np.ndarray:
    """Push values out of (-gap, gap) so a kink at zero is never straddled."""
    return np.where(np.abs(x) < gap, np.sign(x) * gap + (x == 0) * gap, x)


def _spread(win_shape_x: np.ndarray) -> np.ndarray:
    """Deterministic jitter making all values pairwise distinct (argmax-safe)."""
    flat = win_shape_x.reshape(-1)
    return (win_shape_x + np.arange(flat.size).reshape(win_shape_x.shape) * 1e-3)


def _check(op, config, build, arrays, results):
    """`build(tensors) -> scalar loss Tensor`; FD-checks every input slot."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(tensors)
    ad.backward(loss)
    worst = 0.0
    for i, (t, a) in enumerate(zip(tensors, arrays)):
        assert t.grad is not None, f"{op} {config}: input {i} received no gradient"

        def f(x, i=i):
            slots = [ad.Tensor(b.copy(), requires_grad=False) for b in arrays]
            slots[i] = ad.Tensor(x, requires_grad=False)
            return float(build(slots).data)

        numeric = ad.numeric_gradient(f, a, h=H)
        worst = max(worst, _rel_err(t.grad, numeric))
    results.append(CheckResult(op, config, worst))


def _projector(rng, t: "ad.Tensor"):
    """Scalar reduction with dense random weights, fixed per configuration."""
    if t.data.ndim == 3:
        t = ad.flatten(t)
    r = ad.Tensor(rng.standard_normal((t.shape[1], 1)), requires_grad=False)

    def reduce(node):
        if node.data.ndim == 3:
            node = ad.flatten(node)
        return ad.l2_penalty([ad.dense(node, r)], 0.5)

    return reduce


def run_suite(seed: int = 2024) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    # conv1d: strides x paddings x bias
    for stride in (1, 2, 3):
        for padding in ("same", "valid"):
            for rep in range(4):
                with_bias = rep % 2 == 0
                bs = int(rng.integers(1, 4))
                c_in = int(rng.integers(1, 4))
                c_out = int(rng.integers(1, 4))
                width = int(rng.integers(2, 6))
                length = int(rng.integers(width, width + 14))
                x = rng.standard_normal((bs, c_in, length))
                w = rng.standard_normal((c_out, c_in, width))
                arrays = [x, w] + ([rng.standard_normal(c_out)] if with_bias else [])
                probe = ad.conv1d(
                    ad.Tensor(x), ad.Tensor(w), stride=stride, padding=padding
                )
                reduce = _projector(rng, probe)

                def build(ts, stride=stride, padding=padding, with_bias=with_bias, reduce=reduce):
                    b = ts[2] if with_bias else None
                    return reduce(ad.conv1d(ts[0], ts[1], b, stride=stride, padding=padding))

                _check(
                    "conv1d",
                    f"stride={stride} padding={padding} bias={with_bias} "
                    f"x={x.shape} w={w.shape}",
                    build,
                    arrays,
                    results,
                )

    # dense: with and without bias
    for with_bias in (True, False):
        for _ in range(4):
            bs, d, m = (int(rng.integers(1, 6)) for _ in range(3))
            x = rng.standard_normal((bs, d))
            w = rng.standard_normal((d, m))
            arrays = [x, w] + ([rng.standard_normal(m)] if with_bias else [])
            reduce = _projector(rng, ad.dense(ad.Tensor(x), ad.Tensor(w)))

            def build(ts, with_bias=with_bias, reduce=reduce):
                return reduce(ad.dense(ts[0], ts[1], ts[2] if with_bias else None))

            _check("dense", f"bias={with_bias} x={x.shape} w={w.shape}", build, arrays, results)

    # batchnorm: training/eval x 2D/3D inputs
    for training in (True, False):
        for ndim in (2, 3):
            for _ in range(3):
                c = int(rng.integers(1, 4))
                # training mode normalizes by batch statistics; with fewer
                # than ~4 reduced samples xhat is pinned near +/-1 and the
                # true input gradient collapses to eps-level noise, which no
                # finite-difference scheme can resolve relatively
                min_b = 4 if training and ndim == 2 else 2
                shape = (int(rng.integers(min_b, min_b + 3)), c) + (
                    (int(rng.integers(4, 9)),) if ndim == 3 else ()
                )
                x = rng.standard_normal(shape)
                gamma = rng.standard_normal(c) + 1.5
                beta = rng.standard_normal(c)
                running = ad.BatchNormState(
                    rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2.0, c)
                )
                reduce = _projector(rng, ad.Tensor(x))

                def build(ts, training=training, running=running, reduce=reduce):
                    state = running.copy()  # FD evals must not drift the stats
                    return reduce(ad.batchnorm(ts[0], ts[1], ts[2], state, training))

                _check(
                    "batchnorm",
                    f"training={training} x={shape}",
                    build,
                    [x, gamma, beta],
                    results,
                )

    # relu / elu, inputs pushed off the kink at zero
    for name, op in (("relu", ad.relu), ("elu", ad.elu)):
        for _ in range(6):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)))
            x = _away_from(rng.standard_normal(shape))
            reduce = _projector(rng, ad.Tensor(x))

            def build(ts, op=op, reduce=reduce):
                return reduce(op(ts[0]))

            _check(name, f"x={shape}", build, [x], results)

    # pools: width/stride grid; maxpool gets argmax-stable inputs
    for name, op in (("maxpool1d", ad.maxpool1d), ("avgpool1d", ad.avgpool1d)):
        for width, stride in ((2, 2), (3, 1), (2, 1), (4, 2), (3, 2), (5, 3)):
            b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            length = int(rng.integers(width + 2, width + 10))
            x = rng.standard_normal((b, c, length))
            if name == "maxpool1d":
                x = _spread(x)
            reduce = _projector(rng, op(ad.Tensor(x), width, stride))

            def build(ts, op=op, width=width, stride=stride, reduce=reduce):
                return reduce(op(ts[0], width, stride))

            _check(name, f"width={width} stride={stride} x={x.shape}", build, [x], results)

    # gap and flatten
    for name, op in (("gap", ad.gap), ("flatten", ad.flatten)):
        for _ in range(4):
            shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 8)))
            x = rng.standard_normal(shape)
            reduce = _projector(rng, op(ad.Tensor(x)))

            def build(ts, op=op, reduce=reduce):
                return reduce(op(ts[0]))

            _check(name, f"x={shape}", build, [x], results)

    # dropout: the counter-based stream replays the same mask every FD call
    for rate in (0.2, 0.35, 0.5):
        for step in (0, 7):
            for _ in range(2):
                shape = (int(rng.integers(2, 4)), int(rng.integers(3, 9)))
                x = rng.standard_normal(shape)
                seed_key = int(rng.integers(0, 1 << 30))
                reduce = _projector(rng, ad.Tensor(x))

                def build(ts, rate=rate, step=step, seed_key=seed_key, reduce=reduce):
                    stream = ad.dropout_rng(seed_key, 3, step)
                    return reduce(ad.dropout(ts[0], rate, training=True, rng=stream))

                _check("dropout", f"rate={rate} step={step} x={shape}", build, [x], results)

    # add (residual join)
    for _ in range(6):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
        x, y = rng.standard_normal(shape), rng.standard_normal(shape)
        reduce = _projector(rng, ad.Tensor(x))

        def build(ts, reduce=reduce):
            return reduce(ad.add(ts[0], ts[1]))

        _check("add", f"x={shape}", build, [x, y], results)

    # softmax cross-entropy straight to the scalar loss
    for _ in range(8):
        bs, k = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        logits = rng.standard_normal((bs, k)) * 2
        labels = rng.integers(0, k, bs)

        def build(ts, labels=labels):
            loss, _ = ad.softmax_xent(ts[0], labels)
            return loss

        _check("softmax_xent", f"B={bs} K={k}", build, [logits], results)

    # l2 penalty over a couple of tensors
    for factor in (0.01, 0.1, 0.5):
        for _ in range(2):
            a = rng.standard_normal((int(rng.integers(2, 5)), 3))
            b = rng.standard_normal(4)

            def build(ts, factor=factor):
                return ad.l2_penalty(ts, factor)

            _check("l2_penalty", f"factor={factor}", build, [a, b], results)

    return results
