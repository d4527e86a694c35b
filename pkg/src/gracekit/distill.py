"""Confidence-gated decoupled knowledge distillation.

Two layers live here. The distribution-level functions (``entropy``, ``tckd``,
``nckd``, ``gdkd`` ...) take explicit probability vectors and are used for the
exact identities. The logits-level functions (``gdkd_from_logits``,
``kd_from_logits``) are written with :mod:`gracekit.numkit` primitives so the
student side is differentiable; teacher logits are always constants.

All logarithms are natural, so entropies are in nats.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import numkit as nk
from .errors import ContractError, DomainError, ShapeError

NCKD_SKIP_MASS = 1e-12


@dataclass(frozen=True)
class TokenDistribution:
    """A probability vector over the vocabulary plus the ground-truth index."""

    probs: np.ndarray
    target_index: int

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise DomainError(f"distribution needs a 1-d vector with |V| >= 2, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise DomainError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"probabilities sum to {p.sum():.12g}, not 1")
        if not 0 <= int(self.target_index) < p.size:
            raise DomainError(f"target index {self.target_index} outside vocabulary of {p.size}")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "target_index", int(self.target_index))

    @property
    def vocab_size(self) -> int:
        return self.probs.size

    @property
    def target_prob(self) -> float:
        return float(self.probs[self.target_index])

    @classmethod
    def from_logits(cls, logits, target_index: int, temperature: float = 1.0) -> "TokenDistribution":
        logp = nk.log_softmax(np.asarray(logits, dtype=np.float64), temperature)
        p = np.exp(logp)
        return cls(p / p.sum(), target_index)


@dataclass(frozen=True)
class DkdWeights:
    alpha: float = 1.0
    beta_dkd: float = 4.0
    temperature: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta_dkd < 0:
            raise DomainError("DKD weights must be non-negative")
        if self.temperature <= 0:
            raise DomainError("temperature must be positive")
        if self.beta_dkd <= self.alpha:
            warnings.warn("beta_dkd <= alpha: non-target knowledge is not emphasised", stacklevel=3)


def _xlogx_ratio(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with 0 ln(0/q) = 0; raises if q vanishes where p does not."""
    support = p > 0
    if np.any(q[support] <= 0):
        raise DomainError("infinite KL: student assigns zero probability where the teacher does not")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def _check_pair(pt: TokenDistribution, ps: TokenDistribution):
    if pt.vocab_size != ps.vocab_size:
        raise ShapeError(f"vocabulary mismatch: {pt.vocab_size} vs {ps.vocab_size}")
    if pt.target_index != ps.target_index:
        raise DomainError("teacher and student disagree on the target index")


def entropy(p: TokenDistribution) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    probs = p.probs
    nz = probs[probs > 0]
    return float(-np.sum(nz * np.log(nz)))


def normalized_entropy(p: TokenDistribution) -> float:
    return entropy(p) / math.log(p.vocab_size)


def confidence_gate(p: TokenDistribution) -> float:
    """exp(-H(p) / ln|V|), which lies in [1/e, 1]."""
    if p.vocab_size < 2:
        raise DomainError("gate needs |V| >= 2")
    return math.exp(-normalized_entropy(p))


def tckd(pt: TokenDistribution, ps: TokenDistribution) -> float:
    """KL between the binary target / non-target splits."""
    _check_pair(pt, ps)
    t, s = pt.target_prob, ps.target_prob
    p = np.array([t, 1.0 - t])
    q = np.array([s, 1.0 - s])
    return _xlogx_ratio(p, q)


def _nontarget(p: TokenDistribution) -> np.ndarray:
    keep = np.ones(p.vocab_size, dtype=bool)
    keep[p.target_index] = False
    return p.probs[keep]


def nckd(pt: TokenDistribution, ps: TokenDistribution) -> float:
    """KL between the renormalised non-target distributions."""
    _check_pair(pt, ps)
    a, b = _nontarget(pt), _nontarget(ps)
    ma, mb = a.sum(), b.sum()
    if ma < NCKD_SKIP_MASS or mb < NCKD_SKIP_MASS:
        raise DomainError("NCKD undefined: zero non-target mass")
    return _xlogx_ratio(a / ma, b / mb)


def dkd_per_token(pt: TokenDistribution, ps: TokenDistribution, w: DkdWeights = DkdWeights()) -> float:
    return w.alpha * tckd(pt, ps) + w.beta_dkd * nckd(pt, ps)


@dataclass(frozen=True)
class GatedBatch:
    """Per-token DKD losses with their confidence gates and normalised weights."""

    losses: np.ndarray
    gates: np.ndarray
    entropies: np.ndarray | None = None
    normalized_entropies: np.ndarray | None = None
    skipped_nckd: int = 0
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        losses = np.asarray(self.losses, dtype=np.float64)
        gates = np.asarray(self.gates, dtype=np.float64)
        if losses.ndim != 1 or losses.shape != gates.shape or losses.size == 0:
            raise ShapeError("losses and gates must be equal-length non-empty vectors")
        if np.any(gates <= 0) or np.any(gates > 1):
            raise DomainError("gates must lie in (0, 1]")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "gates", gates)
        object.__setattr__(self, "weights", gates / gates.sum())

    @property
    def token_count(self) -> int:
        return self.losses.size

    @property
    def loss(self) -> float:
        return float(np.dot(self.weights, self.losses))


def gdkd(pairs: Sequence[tuple[TokenDistribution, TokenDistribution]],
         w: DkdWeights = DkdWeights(), valid: Iterable[bool] | None = None) -> tuple[float, GatedBatch]:
    """Gate-weighted average of per-token DKD losses over the valid tokens.

    Tokens whose teacher puts (numerically) all its mass on the target keep
    their TCKD term but drop NCKD; the count is reported on the batch.
    """
    pairs = list(pairs)
    mask = [True] * len(pairs) if valid is None else list(valid)
    if len(mask) != len(pairs):
        raise ShapeError("validity mask length differs from batch size")
    losses, gates, ents, norm = [], [], [], []
    skipped = 0
    for (pt, ps), ok in zip(pairs, mask):
        if not ok:
            continue
        _check_pair(pt, ps)
        loss = w.alpha * tckd(pt, ps)
        if min(_nontarget(pt).sum(), _nontarget(ps).sum()) < NCKD_SKIP_MASS:
            skipped += 1
        else:
            loss += w.beta_dkd * nckd(pt, ps)
        h = entropy(pt)
        losses.append(loss)
        ents.append(h)
        norm.append(h / math.log(pt.vocab_size))
        gates.append(math.exp(-norm[-1]))
    if not losses:
        raise DomainError("gdkd needs at least one valid token")
    batch = GatedBatch(np.array(losses), np.array(gates), np.array(ents), np.array(norm), skipped)
    return batch.loss, batch


def gated_average(losses, gates) -> float:
    """sum(g L) / sum(g) for explicit losses and gates."""
    return GatedBatch(np.asarray(losses), np.asarray(gates)).loss


@dataclass(frozen=True)
class GateDecomposition:
    mean: float
    covariance: float
    covariance_pairwise: float
    reconstructed: float
    gated: float


def gate_decompose(batch: GatedBatch, tol: float = 1e-10) -> GateDecomposition:
    """Split the gated loss into the plain mean plus N times Cov(w, L).

    Covariance uses the population (1/N) convention. It is computed both from
    its definition and from the pairwise double sum; both routes, and the
    reconstruction of the gated loss, are checked against ``tol``.
    """
    L, w = batch.losses, batch.weights
    n = L.size
    mean = float(L.mean())
    cov = float(np.mean((w - 1.0 / n) * (L - mean)))
    dw = w[:, None] - w[None, :]
    dL = L[:, None] - L[None, :]
    cov_pair = float(np.sum(dw * dL) / (2.0 * n * n))
    recon = mean + n * cov
    gated = batch.loss
    scale = max(1.0, abs(mean))
    if abs(recon - gated) > tol * scale:
        raise ContractError(f"gating identity violated: {recon!r} vs {gated!r}")
    if abs(cov - cov_pair) > tol * scale:
        raise ContractError(f"covariance forms disagree: {cov!r} vs {cov_pair!r}")
    return GateDecomposition(mean, cov, cov_pair, recon, gated)


# -- information-theoretic checks -----------------------------------------------------

def _check_stochastic(rows: np.ndarray, name: str):
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError(f"{name} rows must be probability vectors")


def _h(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def mutual_information(joint: np.ndarray) -> float:
    """I(A;B) in nats from a 2-d joint probability table."""
    joint = np.asarray(joint, dtype=np.float64)
    return _h(joint.sum(axis=1)) + _h(joint.sum(axis=0)) - _h(joint.ravel())


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    slack: float
    mi_input: float
    expected_kl: float


def information_bound_check(px, teacher, encoder, decoder) -> BoundCheck:
    """Exact check of I(Z;Y_T) >= I(X;Y_T) - E_X[KL(P_T || P_S)].

    ``px`` is the input distribution, ``teacher[x]`` the teacher channel,
    ``encoder[x]`` the integer code z = f(x), and ``decoder[z]`` the student's
    predictive distribution. The student therefore sees x only through z.
    """
    px = np.asarray(px, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    decoder = np.asarray(decoder, dtype=np.float64)
    encoder = np.asarray(encoder, dtype=np.int64)
    nx, nv = teacher.shape
    nz = decoder.shape[0]
    if nx > 64 or nv > 16 or nz > 64:
        raise DomainError("instance too large for exact enumeration")
    if px.shape != (nx,) or encoder.shape != (nx,) or decoder.shape[1] != nv:
        raise ShapeError("inconsistent table shapes")
    if np.any(encoder < 0) or np.any(encoder >= nz):
        raise DomainError("encoder maps outside the code alphabet")
    _check_stochastic(px[None, :], "input distribution")
    _check_stochastic(teacher, "teacher channel")
    _check_stochastic(decoder, "decoder")

    joint_xy = px[:, None] * teacher
    joint_zy = np.zeros((nz, nv))
    np.add.at(joint_zy, encoder, joint_xy)
    lhs = mutual_information(joint_zy)
    mi_x = mutual_information(joint_xy)

    ps = decoder[encoder]
    kl = 0.0
    for x in range(nx):
        if px[x] == 0:
            continue
        support = teacher[x] > 0
        if np.any(ps[x][support] == 0):
            kl = math.inf
            break
        kl += px[x] * float(np.sum(teacher[x][support] * np.log(teacher[x][support] / ps[x][support])))
    rhs = mi_x - kl
    return BoundCheck(lhs, rhs, lhs - rhs, mi_x, kl)


def fano_error_lower_bound(conditional_entropy: float, k: int) -> float:
    """max(0, (H - 1) / ln k), the rearranged Fano bound taken literally in nats."""
    if k < 2:
        raise DomainError("Fano bound needs at least two classes")
    ln_k = math.log(k)
    if not -1e-12 <= conditional_entropy <= ln_k + 1e-12:
        raise DomainError(f"conditional entropy {conditional_entropy} outside [0, ln {k}]")
    return max(0.0, (conditional_entropy - 1.0) / ln_k)


# -- logits-level, differentiable --------------------------------------------------------

def teacher_gates(teacher_logits, temperature: float = 1.0):
    """(entropy, normalised entropy, gate) per row of constant teacher logits."""
    zt = np.asarray(teacher_logits, dtype=np.float64)
    logp = nk.log_softmax(zt, temperature)
    h = -np.sum(np.exp(logp) * logp, axis=-1)
    h_norm = h / math.log(zt.shape[-1])
    return h, h_norm, np.exp(-h_norm)


def dkd_from_logits(student_logits, teacher_logits, targets, w: DkdWeights = DkdWeights()):
    """Per-token DKD losses from logits at the distillation temperature.

    Returns ``(losses, skip)`` where ``losses`` is a length-N vector (a Var when
    the student logits are tracked) and ``skip`` marks tokens whose NCKD term
    was dropped for lack of teacher non-target mass.
    """
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zt.ndim != 2 or nk.value_of(student_logits).shape != zt.shape:
        raise ShapeError("student and teacher logits must both be (N, V)")
    n, v = zt.shape
    rows = np.arange(n)
    targets = np.asarray(targets, dtype=np.int64)
    T = w.temperature
    nontarget = np.ones((n, v), dtype=bool)
    nontarget[rows, targets] = False

    t_lse = nk.logsumexp(zt, T)
    log_pt_t = zt[rows, targets] / T - t_lse
    log_pt_nt = nk.logsumexp(zt, T, mask=nontarget) - t_lse
    pt_t = np.exp(log_pt_t)
    pt_nt = np.exp(log_pt_nt)

    s_lse = nk.logsumexp(student_logits, T)
    log_ps_t = nk.getitem(student_logits, (rows, targets)) * (1.0 / T) - s_lse
    log_ps_nt = nk.logsumexp(student_logits, T, mask=nontarget) - s_lse
    tckd_vec = pt_t * (log_pt_t - log_ps_t) + pt_nt * (log_pt_nt - log_ps_nt)

    log_pt_hat = nk.log_softmax(zt, T, mask=nontarget)
    pt_hat = np.exp(log_pt_hat) * nontarget
    log_ps_hat = nk.log_softmax(student_logits, T, mask=nontarget)
    nckd_vec = nk.sum(pt_hat * (log_pt_hat - log_ps_hat), axis=-1)

    skip = pt_nt < NCKD_SKIP_MASS
    keep = (~skip).astype(np.float64)
    losses = tckd_vec * w.alpha + nckd_vec * (w.beta_dkd * keep)
    return losses, skip


def gdkd_from_logits(student_logits, teacher_logits, targets, w: DkdWeights = DkdWeights(),
                     valid=None, gated: bool = True, gate_temperature: float = 1.0):
    """Confidence-gated DKD loss over valid tokens.

    With ``gated=False`` every gate is 1 and the loss is the plain mean.
    Returns ``(loss, batch)``; ``batch`` is the numeric :class:`GatedBatch`.
    """
    losses, skip = dkd_from_logits(student_logits, teacher_logits, targets, w)
    n = skip.size
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise DomainError("gdkd needs at least one valid token")
    h, h_norm, g = teacher_gates(teacher_logits, gate_temperature)
    if not gated:
        g = np.ones(n)
    coeff = np.where(valid, g, 0.0)
    coeff = coeff / coeff.sum()
    loss = nk.sum(losses * coeff)
    batch = GatedBatch(nk.value_of(losses)[valid], g[valid], h[valid], h_norm[valid],
                       int(np.sum(skip & valid)))
    return loss, batch


def kd_from_logits(student_logits, teacher_logits, temperature: float = 2.0, valid=None):
    """Plain temperature-softened KL(P_T || P_S), averaged over valid tokens."""
    zt = np.asarray(teacher_logits, dtype=np.float64)
    log_pt = nk.log_softmax(zt, temperature)
    log_ps = nk.log_softmax(student_logits, temperature)
    per_token = nk.sum(np.exp(log_pt) * (log_pt - log_ps), axis=-1)
    n = zt.shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    return nk.sum(per_token * (valid / valid.sum()))
