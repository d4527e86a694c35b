"""Does teacher entropy predict teacher error?

Per-token normalized entropy is paired with a 0/1 error indicator, then we
report the Pearson correlation, error rates over entropy quantile bins, and
the R² of a straight-line fit through the bin means.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..distill import teacher_gates
from ..errors import DomainError
from .data import ToyBatch
from .model import ToyModel


@dataclass(frozen=True)
class BinRow:
    bin: int
    count: int
    entropy_lo: float
    entropy_hi: float
    mean_entropy: float
    error_rate: float


@dataclass(frozen=True)
class EntropyErrorResult:
    pearson_r: float
    binned_r2: float
    bins: tuple  # of BinRow
    n_samples: int

    @property
    def error_rates(self) -> np.ndarray:
        return np.array([b.error_rate for b in self.bins])

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.error_rates) >= 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "count", "entropy_lo", "entropy_hi", "mean_entropy", "error_rate"])
        for b in self.bins:
            w.writerow([b.bin, b.count, repr(b.entropy_lo), repr(b.entropy_hi),
                        repr(b.mean_entropy), repr(b.error_rate)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        return ("pearson_r,binned_r2,n_samples,monotone\n"
                f"{self.pearson_r!r},{self.binned_r2!r},{self.n_samples},{int(self.monotone)}\n")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def _r2(x: np.ndarray, y: np.ndarray) -> float:
    if y.var() == 0 or x.var() == 0:
        return 0.0
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return float(1.0 - resid.var() / y.var())


def entropy_error(entropy, error, bins: int = 10) -> EntropyErrorResult:
    """Correlate per-sample entropy with an error indicator.

    Samples are sorted by entropy and split into ``bins`` equal-count groups
    (ties broken by input order, so the result is deterministic).
    """
    h = np.asarray(entropy, dtype=float).reshape(-1)
    e = np.asarray(error, dtype=float).reshape(-1)
    if h.shape != e.shape:
        raise DomainError("entropy and error must have the same length")
    if bins < 5:
        raise DomainError(f"need at least 5 bins, got {bins}")
    if h.size < bins:
        raise DomainError(f"{h.size} samples cannot fill {bins} bins")
    order = np.argsort(h, kind="stable")
    rows = []
    for i, idx in enumerate(np.array_split(order, bins)):
        hb = h[idx]
        rows.append(BinRow(i, int(idx.size), float(hb.min()), float(hb.max()),
                           float(hb.mean()), float(e[idx].mean())))
    centers = np.array([r.mean_entropy for r in rows])
    rates = np.array([r.error_rate for r in rows])
    return EntropyErrorResult(_pearson(h, e), _r2(centers, rates), tuple(rows), int(h.size))


def self_sampling_teacher(seed: int, n: int = 20000, vocab: int = 32,
                          log_scale_range: tuple = (-0.5, 2.5)):
    """Synthetic teacher outputs whose labels are drawn from the teacher itself.

    Logits are ``scale * z`` with ``z`` standard normal and ``log(scale)``
    uniform on ``log_scale_range``, which spreads entropies across almost the
    whole ``[0, ln V]`` range. Each label is sampled from the teacher's own
    distribution, so the argmax prediction errs with probability
    ``1 - max p``. Returns ``(logits, labels)``.
    """
    rng = np.random.default_rng([seed, 9001])
    scale = np.exp(rng.uniform(*log_scale_range, size=(n, 1)))
    logits = scale * rng.normal(size=(n, vocab))
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random((n, 1))
    labels = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), vocab - 1)
    return logits, labels


def from_logits(logits, labels, bins: int = 10) -> EntropyErrorResult:
    _, h_norm, _ = teacher_gates(np.asarray(logits, dtype=float))
    wrong = np.argmax(logits, axis=-1) != np.asarray(labels)
    return entropy_error(h_norm, wrong, bins)


def entropy_error_experiment(teacher: ToyModel, batch: ToyBatch, bins: int = 10) -> EntropyErrorResult:
    """Entropy against argmax error for ``teacher`` on the valid tokens of ``batch``."""
    logits = np.concatenate([teacher.forward(batch.subset(slice(i, i + 250))).logits
                             for i in range(0, len(batch), 250)])
    valid = batch.flat_valid
    return from_logits(logits[valid], batch.flat_targets[valid], bins)
