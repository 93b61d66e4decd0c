"""Huber loss, Adam, the training loop and clip-level mAP evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .audio import AudioClip, stack_examples
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NonFiniteError, TrainingError
from .model import AudioTransformer, forward, save_checkpoint

logger = logging.getLogger(__name__)


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean elementwise Huber loss of ``pred - target``."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise DimensionError(f"huber_loss: pred {pred.shape} vs target {t.shape}")
    r = pred.data - t
    a = np.abs(r)
    quadratic = a <= delta
    per = np.where(quadratic, 0.5 * r * r, delta * (a - 0.5 * delta))
    n = r.size
    out = np.asarray(per.mean(), dtype=pred.dtype)

    def bw(g):
        return (g * np.clip(r, -delta, delta) / n,)

    return ad.make_op(out, (pred,), "huber", bw)


@dataclass
class AdamState:
    """Adam moments for a fixed, named list of parameters."""

    params: list[tuple[str, Tensor]]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for _, p in self.params]
            self.v = [np.zeros_like(p.data) for _, p in self.params]


def adam_step(state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place from the params' ``.grad``."""
    for name, p in state.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise TrainingError(f"non-finite gradient in {name} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.t
    corr2 = 1.0 - b2 ** state.t
    for i, (_, p) in enumerate(state.params):
        if p.grad is None:
            continue
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


# -- metrics ------------------------------------------------------------------------


def average_precision(scores, positives) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Ranking is by descending score with ties broken by ascending original
    index.  Returns NaN when there is no positive.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise DimensionError(f"average_precision: scores {s.shape} vs positives {pos.shape}")
    n_pos = int(pos.sum())
    if n_pos == 0:
        return math.nan
    order = np.lexsort((np.arange(s.size), -s))
    hits = pos[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class EvalReport:
    ap: np.ndarray  # NaN for classes without positives
    mAP: float
    positives: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.ap)


def report_from_scores(scores: np.ndarray, targets: np.ndarray) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets) > 0.5
    if scores.shape != targets.shape:
        raise DimensionError(f"scores {scores.shape} vs targets {targets.shape}")
    ap = np.array([average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1])])
    valid = ~np.isnan(ap)
    mAP = float(ap[valid].mean()) if valid.any() else math.nan
    return EvalReport(ap, mAP, targets.sum(axis=0).astype(int))


def predict_clips(model: AudioTransformer, clips: Sequence[AudioClip], batch_size: int = 64) -> np.ndarray:
    """Clip-level scores: the mean of the sigmoid scores of each clip's chunks."""
    frames, _, owner = stack_examples(clips)
    chunk_scores = []
    for lo in range(0, len(frames), batch_size):
        chunk_scores.append(forward(model, frames[lo:lo + batch_size]).data.astype(np.float64))
    chunk_scores = np.concatenate(chunk_scores)
    out = np.zeros((len(clips), chunk_scores.shape[1]))
    counts = np.bincount(owner, minlength=len(clips))
    np.add.at(out, owner, chunk_scores)
    return out / counts[:, None]


def evaluate(model: AudioTransformer, clips: Sequence[AudioClip], batch_size: int = 64) -> EvalReport:
    scores = predict_clips(model, clips, batch_size)
    targets = np.stack([c.labels for c in clips])
    return report_from_scores(scores, targets)


def write_report_csv(report: EvalReport, path, class_names: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_index", "class_name", "ap", "num_positives"])
        for c, ap in enumerate(report.ap):
            if np.isnan(ap):
                continue
            name = class_names[c] if class_names is not None else str(c)
            w.writerow([c, name, repr(float(ap)), int(report.positives[c])])
        w.writerow(["mAP", "", repr(report.mAP), int(report.positives.sum())])


# -- training loop ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRunConfig:
    batch_size: int = 32
    max_steps: int = 2000
    learning_rate: float = 1e-4
    seed: int = 0
    eval_interval: int = 100
    huber_delta: float = 1.0
    # stop at the first evaluation reaching this clip-level mAP
    target_map: Optional[float] = None

    def validate(self) -> None:
        for name in ("batch_size", "max_steps", "learning_rate", "eval_interval", "huber_delta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be non-negative, got {self.seed}")


@dataclass
class LogRow:
    step: int
    loss: float
    val_mAP: Optional[float] = None


@dataclass
class TrainResult:
    log: list[LogRow]
    model: AudioTransformer
    final_report: Optional[EvalReport] = None

    @property
    def reached_map(self) -> Optional[float]:
        vals = [r.val_mAP for r in self.log if r.val_mAP is not None]
        return max(vals) if vals else None


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = np.empty(0, dtype=int)
    while True:
        while order.size < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch_size]
        order = order[batch_size:]


def train(
    model: AudioTransformer,
    clips: Sequence[AudioClip],
    run: TrainRunConfig,
    val_clips: Sequence[AudioClip] | None = None,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Mini-batch Adam training on 1 s chunks with a Huber loss on sigmoid scores."""
    run.validate()
    if not clips:
        raise TrainingError("training set is empty")
    frames, targets, owner = stack_examples(clips)
    frames = frames.astype(model.dtype)
    targets = targets.astype(model.dtype)
    rng = np.random.default_rng(run.seed)
    state = AdamState(list(model.named_parameters()), lr=run.learning_rate)
    log: list[LogRow] = []
    report = None
    batches = _batches(len(frames), min(run.batch_size, len(frames)), rng)
    model.zero_grad()
    for step in range(1, run.max_steps + 1):
        idx = next(batches)
        try:
            scores = forward(model, frames[idx])
            loss = huber_loss(scores, targets[idx], run.huber_delta)
        except NonFiniteError as exc:
            ids = sorted({clips[owner[i]].source_id for i in idx})
            raise TrainingError(f"step {step}: non-finite forward pass ({exc}); batch clips: {ids}") from exc
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            ids = sorted({clips[owner[i]].source_id for i in idx})
            raise TrainingError(f"step {step}: non-finite loss; batch clips: {ids}")
        ad.backward(loss)
        adam_step(state)
        model.zero_grad()
        row = LogRow(step, loss_value)
        if val_clips and step % run.eval_interval == 0:
            report = evaluate(model, val_clips)
            row.val_mAP = report.mAP
            logger.info("step %d loss %.6f val mAP %.4f", step, loss_value, report.mAP)
        log.append(row)
        if run.target_map is not None and row.val_mAP is not None and row.val_mAP >= run.target_map:
            logger.info("target mAP %.3f reached at step %d", run.target_map, step)
            break
    if log_path is not None:
        write_log_csv(log, log_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(log, model, report)


def write_log_csv(log: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "val_mAP"])
        for r in log:
            w.writerow([r.step, repr(r.loss), "" if r.val_mAP is None else repr(r.val_mAP)])


def read_log_csv(path) -> list[LogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        LogRow(int(r["step"]), float(r["loss"]), float(r["val_mAP"]) if r["val_mAP"] else None)
        for r in rows
    ]


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.empty(0)
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window

