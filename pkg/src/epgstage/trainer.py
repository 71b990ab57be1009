"""Leave-one-subject-out training on stored segments.

Each fold holds one implanted subject out entirely; the remaining subjects
contribute a per-phase budget of windows drawn as whole contiguous blocks from
each phase's designated span (the start of the early phase, the tail of
baseline and of the late phase).  Blocks, not windows, are what the 8:2
train/validation split shuffles, so neighbouring five-second windows never
straddle the split.
"""

from __future__ import annotations

import contextlib
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import zoo
from .metrics import PredictionTrace
from .signal_io import CLASS_PHASES, Phase, Segment

DAY_S = 86400.0


class TrainingDivergedError(ArithmeticError):
    """The loss left the representable range; training was aborted."""


@dataclass(frozen=True)
class FoldPlan:
    held_out: str
    train_subjects: tuple[str, ...]


def make_folds(subject_ids: list[str]) -> list[FoldPlan]:
    """One fold per subject, training on all the others."""
    ids = list(dict.fromkeys(subject_ids))
    if len(ids) < 2:
        raise ValueError(
            f"leave-one-subject-out needs at least 2 subjects, got {len(ids)}"
        )
    return [
        FoldPlan(held_out=sid, train_subjects=tuple(s for s in ids if s != sid))
        for sid in ids
    ]


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 10
    val_fraction: float = 0.2
    budget_s_per_phase: float = 90000.0  # 25 h
    window_days: float = 3.0
    block_s: float = 3600.0
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.block_s <= 0 or self.budget_s_per_phase <= 0:
            raise ValueError("block_s and budget_s_per_phase must be positive")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: zoo.Model
    curve: list[EpochRow]
    best_epoch: int
    n_train: int
    n_val: int
    elapsed_s: float
    fold: FoldPlan


def _subject_stream(seed: int, *parts) -> np.random.Generator:
    key = zlib.crc32("/".join(str(p) for p in parts).encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, key))))


def sample_training_window(
    segments: list[Segment],
    phase: Phase,
    budget_s: float,
    window_days: float = 3.0,
    block_s: float = 3600.0,
    seed: int = 0,
) -> list[list[Segment]]:
    """Select up to `budget_s` worth of one subject's windows for one phase.

    The candidate span is the first `window_days` of the phase for early
    epileptogenesis and the last `window_days` for baseline and the late
    phase.  Candidates are bucketed into contiguous `block_s` blocks; whole
    blocks are drawn in seeded random order until the budget is filled (the
    last block may contribute only part of itself).  Returns the chosen
    blocks, each a chronological list of segments; short phases simply
    saturate the budget.
    """
    pool = sorted(
        (s for s in segments if s.label == phase), key=lambda s: s.start_time_s
    )
    if not pool:
        return []
    span_lo = pool[0].start_time_s
    span_hi = pool[-1].start_time_s + 5.0
    window_s = window_days * DAY_S
    if span_hi - span_lo > window_s:
        if phase == Phase.EARLY_EPG:
            span_hi = span_lo + window_s
        else:
            span_lo = span_hi - window_s
        pool = [s for s in pool if span_lo <= s.start_time_s < span_hi]
        if not pool:
            return []

    blocks: dict[int, list[Segment]] = {}
    t0 = pool[0].start_time_s
    for s in pool:
        blocks.setdefault(int((s.start_time_s - t0) // block_s), []).append(s)
    order = sorted(blocks)
    rng = _subject_stream(seed, "sample", pool[0].subject_id, int(phase))
    rng.shuffle(order)

    target = int(budget_s // 5.0)
    chosen: list[list[Segment]] = []
    total = 0
    for b in order:
        if total >= target:
            break
        take = blocks[b][: target - total]
        chosen.append(take)
        total += len(take)
    return chosen


def _split_blocks(
    blocks: list[list[Segment]], val_fraction: float, rng: np.random.Generator
) -> tuple[list[Segment], list[Segment]]:
    """Block-level train/validation split (stratification happens per call)."""
    if not blocks:
        return [], []
    idx = rng.permutation(len(blocks))
    n_val = int(round(len(blocks) * val_fraction)) if len(blocks) >= 2 else 0
    n_val = min(n_val, len(blocks) - 1)
    val_ids = set(idx[:n_val].tolist())
    train, val = [], []
    for i, blk in enumerate(blocks):
        (val if i in val_ids else train).extend(blk)
    return train, val


def assemble_fold_data(
    segments_by_subject: dict[str, list[Segment]],
    fold: FoldPlan,
    cfg: TrainConfig,
) -> tuple[list[Segment], list[Segment]]:
    """Budgeted, block-split training and validation sets for one fold."""
    train: list[Segment] = []
    val: list[Segment] = []
    for sid in fold.train_subjects:
        subject_segments = segments_by_subject[sid]
        for phase in CLASS_PHASES:
            blocks = sample_training_window(
                subject_segments,
                phase,
                cfg.budget_s_per_phase,
                cfg.window_days,
                cfg.block_s,
                cfg.seed,
            )
            rng = _subject_stream(cfg.seed, "split", sid, int(phase))
            tr, va = _split_blocks(blocks, cfg.val_fraction, rng)
            train.extend(tr)
            val.extend(va)
    held = {fold.held_out}
    leaked = [s.subject_id for s in train + val if s.subject_id in held]
    if leaked:
        raise AssertionError(f"held-out subject leaked into fold data: {leaked[:3]}")
    return train, val


def _as_arrays(segments: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.values for s in segments]).astype(np.float32)
    y = np.array([int(s.label) for s in segments], dtype=np.int64)
    return x[:, None, :], y


def _eval_loss_acc(
    model: zoo.Model, x: np.ndarray, y: np.ndarray, batch_size: int
) -> tuple[float, float]:
    losses, correct = [], 0
    with ad.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            xb, yb = x[lo : lo + batch_size], y[lo : lo + batch_size]
            logits, _ = model.apply(xb, training=False)
            probs = ad.softmax(logits.data.astype(np.float64))
            losses.append(-np.log(np.maximum(probs[np.arange(yb.size), yb], 1e-12)))
            correct += int((probs.argmax(axis=1) == yb).sum())
    loss = float(np.concatenate(losses).mean()) if losses else float("nan")
    return loss, correct / max(1, x.shape[0])


def thread_limit():
    """Honor the EPG_THREADS cap for the numeric backend, if set."""
    n = os.environ.get("EPG_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def train_fold(
    segments_by_subject: dict[str, list[Segment]],
    fold: FoldPlan,
    model_name: str = "Proposed4",
    model_overrides: dict | None = None,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train one fold to early-stopping convergence; returns the best model.

    "Best" is lowest validation loss; the returned model carries the weights
    and batch-norm statistics from that epoch.
    """
    t_start = time.perf_counter()
    train_segs, val_segs = assemble_fold_data(segments_by_subject, fold, cfg)
    if not train_segs or not val_segs:
        raise ValueError(
            f"fold {fold.held_out}: empty split "
            f"(train={len(train_segs)}, val={len(val_segs)}); "
            "lower block_s or raise the budget"
        )
    x_train, y_train = _as_arrays(train_segs)
    x_val, y_val = _as_arrays(val_segs)

    fold_key = zlib.crc32(fold.held_out.encode())
    model = zoo.build(model_name, model_overrides, seed=cfg.seed ^ fold_key)
    model.input_mean = float(x_train.mean())
    model.input_std = float(x_train.std()) or 1.0
    dropout_seed = (cfg.seed << 1) ^ fold_key

    params = model.trainable_list()
    opt = ad.AdamState.for_params(params)
    rng = _subject_stream(cfg.seed, "epochs", fold.held_out)

    best_loss = np.inf
    best_epoch = -1
    best_state: tuple | None = None
    curve: list[EpochRow] = []
    stale = 0
    step = 0
    with thread_limit():
        for epoch in range(cfg.max_epochs):
            perm = rng.permutation(x_train.shape[0])
            epoch_losses = []
            for lo in range(0, perm.size, cfg.batch_size):
                batch = perm[lo : lo + cfg.batch_size]
                logits, _ = model.apply(
                    x_train[batch], training=True, dropout_seed=dropout_seed, step=step
                )
                loss, _probs = ad.softmax_xent(logits, y_train[batch])
                if model.spec.l2_factor > 0:
                    loss = ad.add(
                        loss, ad.l2_penalty(model.l2_params(), model.spec.l2_factor)
                    )
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"fold {fold.held_out}: non-finite loss {loss_val} at "
                        f"epoch {epoch}, step {step}"
                    )
                ad.backward(loss)
                ad.adam_step(
                    params,
                    opt,
                    lr=cfg.learning_rate,
                    beta1=cfg.beta1,
                    beta2=cfg.beta2,
                    eps=cfg.adam_eps,
                )
                ad.zero_grad(params)
                epoch_losses.append(loss_val)
                step += 1
            val_loss, val_acc = _eval_loss_acc(model, x_val, y_val, cfg.batch_size)
            curve.append(
                EpochRow(epoch, float(np.mean(epoch_losses)), val_loss, val_acc)
            )
            if val_loss < best_loss - 1e-6:
                best_loss = val_loss
                best_epoch = epoch
                best_state = (
                    {n: p.data.copy() for n, p in model.params.items()},
                    {n: st.copy() for n, st in model.bn.items()},
                )
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if best_state is not None:
        weights, bn = best_state
        for name, arr in weights.items():
            model.params[name].data = arr
        for name, st in bn.items():
            model.bn[name] = st
    return TrainResult(
        model=model,
        curve=curve,
        best_epoch=best_epoch,
        n_train=len(train_segs),
        n_val=len(val_segs),
        elapsed_s=time.perf_counter() - t_start,
        fold=fold,
    )


def predict(
    model: zoo.Model, segments: list[Segment], batch_size: int = 256
) -> PredictionTrace:
    """Eval-mode trace over chronological segments of one subject."""
    if not segments:
        raise ValueError("predict needs at least one segment")
    subject = segments[0].subject_id
    if any(s.subject_id != subject for s in segments):
        raise ValueError("predict expects segments from a single subject")
    ordered = sorted(segments, key=lambda s: s.start_time_s)
    x, y = _as_arrays(ordered)
    probs = []
    with thread_limit(), ad.no_grad():
        for lo in range(0, x.shape[0], batch_size):
            logits, _ = model.apply(x[lo : lo + batch_size], training=False)
            probs.append(ad.softmax(logits.data.astype(np.float64)))
    return PredictionTrace(
        times_s=np.array([s.start_time_s for s in ordered]),
        probs=np.vstack(probs),
        labels=y,
        subject_id=subject,
    )
