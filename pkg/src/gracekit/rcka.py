"""Relational centred kernel alignment over visual-token representations.

Functions accept a single ``(n, d)`` feature matrix or a stack ``(B, n, d)``;
stacks are handled sample by sample along the leading axis. Inputs may be
plain arrays or tracked :class:`~gracekit.numkit.Var` objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import DomainError, ShapeError

DEGENERATE_HSIC = 1e-14


def check_features(v) -> None:
    """Validate token features: at least two tokens and no zero rows."""
    val = nk.value_of(v)
    if val.ndim < 2:
        raise ShapeError(f"token features need shape (n, d), got {val.shape}")
    if val.shape[-2] < 2:
        raise ShapeError("at least two tokens are required")
    norms = np.linalg.norm(val, axis=-1)
    bad = np.argwhere(norms <= 0)
    if bad.size:
        raise DomainError(f"token row {tuple(int(i) for i in bad[0])} has zero norm")


def gram(v):
    """Cosine-similarity Gram matrix of row-normalised features."""
    check_features(v)
    norms = nk.sqrt(nk.sum(nk.square(v), axis=-1, keepdims=True))
    unit = v / norms
    return unit @ nk.transpose(unit)


def center(k):
    """Double-centre a kernel matrix: H K H with H = I - 11^T / n."""
    kv = nk.value_of(k)
    if kv.ndim < 2 or kv.shape[-1] != kv.shape[-2]:
        raise ShapeError(f"centering needs a square matrix, got {kv.shape}")
    row = nk.mean(k, axis=-1, keepdims=True)
    col = nk.mean(k, axis=-2, keepdims=True)
    grand = nk.mean(row, axis=-2, keepdims=True)
    return k - row - col + grand


def hsic(ka, kb, centered: bool = False):
    """Tr(K~a K~b) / (n - 1)^2, centring the inputs first unless told they are."""
    sa, sb = nk.value_of(ka).shape, nk.value_of(kb).shape
    if sa != sb:
        raise ShapeError(f"kernel shapes differ: {sa} vs {sb}")
    n = sa[-1]
    if n < 2:
        raise ShapeError("HSIC needs n >= 2")
    if not centered:
        ka, kb = center(ka), center(kb)
    tr = nk.sum(ka * nk.transpose(kb), axis=(-2, -1))
    return tr * (1.0 / (n - 1) ** 2)


@dataclass(frozen=True)
class GramPair:
    k_teacher: object
    k_student: object
    centered: bool = False

    @classmethod
    def from_features(cls, vt, vs) -> "GramPair":
        nt, ns = nk.value_of(vt).shape[-2], nk.value_of(vs).shape[-2]
        if nt != ns:
            raise ShapeError(f"token counts differ: {nt} vs {ns}")
        return cls(center(gram(vt)), center(gram(vs)), centered=True)


def cka(pair: GramPair):
    """HSIC(K_T, K_S) / sqrt(HSIC(K_T, K_T) HSIC(K_S, K_S))."""
    kt, ks = pair.k_teacher, pair.k_student
    if not pair.centered:
        kt, ks = center(kt), center(ks)
    cross = hsic(kt, ks, centered=True)
    self_t = hsic(kt, kt, centered=True)
    self_s = hsic(ks, ks, centered=True)
    if np.min(nk.value_of(self_t)) < DEGENERATE_HSIC or np.min(nk.value_of(self_s)) < DEGENERATE_HSIC:
        raise DomainError("degenerate representation: self-HSIC is zero")
    return cross / nk.sqrt(self_t * self_s)


def rcka_loss(vt, vs, pooling: str = "per_sample"):
    """1 - CKA between teacher and student token Grams.

    For stacked inputs ``(B, n, d)``, ``pooling="per_sample"`` averages the
    per-sample losses; ``pooling="concat"`` treats all ``B * n`` tokens as a
    single set.
    """
    vt_val, vs_val = nk.value_of(vt), nk.value_of(vs)
    if vt_val.shape[:-1] != vs_val.shape[:-1]:
        raise ShapeError(f"token layouts differ: {vt_val.shape} vs {vs_val.shape}")
    if pooling == "concat" and vt_val.ndim == 3:
        b, n = vt_val.shape[:2]
        vt = nk.reshape(vt, (b * n, vt_val.shape[-1]))
        vs = nk.reshape(vs, (b * n, vs_val.shape[-1]))
    elif pooling not in ("per_sample", "concat"):
        raise ValueError(f"unknown pooling {pooling!r}")
    loss = 1.0 - cka(GramPair.from_features(vt, vs))
    if nk.value_of(loss).ndim:
        loss = nk.mean(loss)
    return loss


def similarity_gap(features, labels) -> float:
    """Mean within-cluster minus mean between-cluster cosine similarity.

    Diagonal entries are excluded. Stacks are averaged over samples.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim == 2:
        feats, labels = feats[None], labels[None]
    k = gram(feats)
    same = labels[:, :, None] == labels[:, None, :]
    off = ~np.eye(feats.shape[1], dtype=bool)[None]
    within = (k * (same & off)).sum(axis=(1, 2)) / (same & off).sum(axis=(1, 2))
    between = (k * ~same).sum(axis=(1, 2)) / np.maximum((~same).sum(axis=(1, 2)), 1)
    return float(np.mean(within - between))
