"""Synthetic multimodal-ish task with planted visual clusters.

Each sample has ``n_visual`` visual tokens drawn around ``n_clusters`` random
centres. A token's input is ``[centre + noise, nuisance]``: the first
``signal_dim`` coordinates carry the cluster, the rest is pure distraction.
Each text position points at one anchor token and carries a context vector;
its class is decided by the anchor cluster's centre together with the
context, so recovering the cluster mean from the tokens is what the model
has to get right.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 32
    n_visual: int = 64
    n_clusters: int = 4
    n_positions: int = 4
    signal_dim: int = 8
    nuisance_dim: int = 8
    context_dim: int = 8
    signal_noise: float = 0.5
    nuisance_scale: float = 1.5
    rule_scale: float = 3.0

    @property
    def input_dim(self) -> int:
        return self.signal_dim + self.nuisance_dim


@dataclass
class ToyBatch:
    visual: np.ndarray  # (B, n, d_in)
    cluster_labels: np.ndarray  # (B, n)
    anchors: np.ndarray  # (B, P) index of the anchor visual token
    contexts: np.ndarray  # (B, P, d_ctx)
    targets: np.ndarray  # (B, P)
    valid: np.ndarray  # (B, P) bool
    centers: np.ndarray  # (B, K, signal_dim), kept for analysis only

    def __len__(self) -> int:
        return self.visual.shape[0]

    def subset(self, idx) -> "ToyBatch":
        return ToyBatch(self.visual[idx], self.cluster_labels[idx], self.anchors[idx],
                        self.contexts[idx], self.targets[idx], self.valid[idx], self.centers[idx])

    @property
    def flat_targets(self) -> np.ndarray:
        return self.targets.reshape(-1)

    @property
    def flat_valid(self) -> np.ndarray:
        return self.valid.reshape(-1)


@dataclass
class Task:
    """The ground-truth labelling rule plus a sampler for batches."""

    spec: TaskSpec
    rule_visual: np.ndarray  # (V, signal_dim)
    rule_context: np.ndarray  # (V, d_ctx)

    @classmethod
    def create(cls, seed: int, spec: TaskSpec = TaskSpec()) -> "Task":
        rng = np.random.default_rng([seed, 7001])
        a = rng.normal(size=(spec.vocab_size, spec.signal_dim)) / np.sqrt(spec.signal_dim)
        b = rng.normal(size=(spec.vocab_size, spec.context_dim)) / np.sqrt(spec.context_dim)
        return cls(spec, a, b)

    def rule_logits(self, centers: np.ndarray, contexts: np.ndarray) -> np.ndarray:
        """Ground-truth logits for given anchor-cluster centres and contexts."""
        return self.spec.rule_scale * (centers @ self.rule_visual.T + contexts @ self.rule_context.T)

    def sample(self, count: int, rng: np.random.Generator, answer_only: bool = False) -> ToyBatch:
        """Draw ``count`` samples; labels are the argmax of the rule logits.

        With ``answer_only`` the first text position of every sample is marked
        invalid, emulating prompt tokens that carry no supervision.
        """
        sp = self.spec
        k, n, p = sp.n_clusters, sp.n_visual, sp.n_positions
        centers = rng.normal(size=(count, k, sp.signal_dim))
        labels = np.stack([rng.permutation(np.arange(n) % k) for _ in range(count)])
        signal = np.take_along_axis(centers, labels[:, :, None], axis=1)
        signal = signal + sp.signal_noise * rng.normal(size=signal.shape)
        nuisance = sp.nuisance_scale * rng.normal(size=(count, n, sp.nuisance_dim))
        visual = np.concatenate([signal, nuisance], axis=-1)

        chosen = rng.integers(0, k, size=(count, p))
        anchors = np.empty((count, p), dtype=np.int64)
        for i in range(count):
            for j in range(p):
                members = np.flatnonzero(labels[i] == chosen[i, j])
                anchors[i, j] = members[rng.integers(0, members.size)]
        contexts = rng.normal(size=(count, p, sp.context_dim))
        anchor_centers = np.take_along_axis(centers, chosen[:, :, None], axis=1)
        targets = np.argmax(self.rule_logits(anchor_centers, contexts), axis=-1)
        valid = np.ones((count, p), dtype=bool)
        if answer_only:
            valid[:, 0] = False
        return ToyBatch(visual, labels, anchors, contexts, targets, valid, centers)
