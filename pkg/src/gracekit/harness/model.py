"""Toy teacher and student networks.

Both share one architecture: a stack of per-token ``tanh`` layers over the
visual tokens, cosine-similarity attention from each text position's anchor
token, and a linear head over ``[pooled, context]``. Only the sizes differ.
With a :class:`~gracekit.quant.QuantConfig` every linear weight (token layers
and head) goes through group-wise fake quantization; biases stay in float.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numkit as nk
from ..errors import ConfigError
from ..quant import QuantConfig, init_scales, quantized_linear
from .data import Task, TaskSpec, ToyBatch

ATTENTION_SHARPNESS = 12.0


@dataclass
class ModelOutput:
    logits: object  # (B*P, V)
    layer_outputs: list  # per token layer, each (B, n, width)
    tap: object  # the representation fed to relational alignment


@dataclass
class ToyModel:
    params: dict
    widths: tuple
    quant: QuantConfig | None = None
    hidden_tap: int = -2
    frozen: bool = False
    sharpness: float = ATTENTION_SHARPNESS
    names: list = field(init=False)

    def __post_init__(self):
        self.names = list(self.params)
        n_layers = len(self.widths) + 1
        if not -n_layers <= self.hidden_tap < n_layers or self.hidden_tap % n_layers == n_layers - 1:
            raise ConfigError(f"hidden_tap {self.hidden_tap} must select a token layer, not the head")

    @property
    def layer_names(self) -> list[str]:
        return [f"layer{i}" for i in range(len(self.widths))] + ["head"]

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.widths, self.quant,
                        self.hidden_tap, self.frozen, self.sharpness)

    def _linear(self, x, p, name):
        w, b = p[f"{name}.weight"], p[f"{name}.bias"]
        if self.quant is not None:
            y = quantized_linear(x, w, p[f"{name}.theta"], self.quant)
        else:
            y = x @ nk.transpose(w)
        return y + b

    def forward(self, batch: ToyBatch, params: dict | None = None) -> ModelOutput:
        """Run the network; ``params`` may map names to tape variables."""
        p = self.params if params is None else params
        h = batch.visual
        outputs = []
        for i in range(len(self.widths)):
            h = nk.tanh(self._linear(h, p, f"layer{i}"))
            outputs.append(h)
        bsz, n_pos = batch.anchors.shape
        rows = np.repeat(np.arange(bsz)[:, None], n_pos, axis=1)
        unit = h / nk.sqrt(nk.sum(nk.square(h), axis=-1, keepdims=True) + 1e-12)
        query = nk.getitem(unit, (rows, batch.anchors))
        attn = nk.softmax(query @ nk.transpose(unit) * self.sharpness)
        pooled = attn @ h
        z = nk.concat([pooled, batch.contexts], axis=-1)
        logits = self._linear(z, p, "head")
        logits = nk.reshape(logits, (bsz * n_pos, logits.shape[-1]))
        tap = outputs[self.hidden_tap % (len(self.widths) + 1)]
        return ModelOutput(logits, outputs, tap)

    def logits(self, batch: ToyBatch) -> np.ndarray:
        return self.forward(batch).logits


def _init_layer(params, name, rng, d_out, d_in, quant, gain=1.0):
    w = rng.normal(scale=gain / np.sqrt(d_in), size=(d_out, d_in))
    params[f"{name}.weight"] = w
    params[f"{name}.bias"] = np.zeros(d_out)
    if quant is not None:
        params[f"{name}.theta"] = init_scales(w, quant)


def make_student(seed: int, spec: TaskSpec = TaskSpec(), widths=(24, 24),
                 quant: QuantConfig | None = None, hidden_tap: int = -2) -> ToyModel:
    """A randomly initialised student; deterministic per seed."""
    rng = np.random.default_rng([seed, 3001])
    params: dict = {}
    d_in = spec.input_dim
    for i, width in enumerate(widths):
        _init_layer(params, f"layer{i}", rng, width, d_in, quant)
        d_in = width
    _init_layer(params, "head", rng, spec.vocab_size, d_in + spec.context_dim, quant)
    return ToyModel(params, tuple(widths), quant, hidden_tap)


def make_teacher(seed: int, task: Task | None = None, width: int = 64, depth: int = 4,
                 fit_samples: int = 2000, ridge: float = 1e-3) -> tuple[ToyModel, Task]:
    """An analytically constructed full-precision teacher for ``task``.

    The first layer keeps only the signal coordinates, embedding them with a
    random orthonormal map; deeper layers are random rotations. The head is a
    ridge-regression fit of the task's true logits on the teacher's own pooled
    features, drawn from a private fitting sample. Everything is seeded, so a
    given seed always yields the same teacher.
    """
    task = task or Task.create(seed)
    spec = task.spec
    rng = np.random.default_rng([seed, 5003])
    params: dict = {}
    q, _ = np.linalg.qr(rng.normal(size=(width, spec.signal_dim)))
    w0 = np.zeros((width, spec.input_dim))
    w0[:, :spec.signal_dim] = q
    params["layer0.weight"] = w0
    params["layer0.bias"] = np.zeros(width)
    for i in range(1, depth):
        rot, _ = np.linalg.qr(rng.normal(size=(width, width)))
        params[f"layer{i}.weight"] = rot
        params[f"layer{i}.bias"] = np.zeros(width)
    params["head.weight"] = np.zeros((spec.vocab_size, width + spec.context_dim))
    params["head.bias"] = np.zeros(spec.vocab_size)
    teacher = ToyModel(params, (width,) * depth, None, -2, frozen=True)

    fit = task.sample(fit_samples, np.random.default_rng([seed, 5004]))
    out = teacher.forward(fit)
    bsz, n_pos = fit.anchors.shape
    h = out.layer_outputs[-1]
    unit = h / np.linalg.norm(h, axis=-1, keepdims=True)
    rows = np.repeat(np.arange(bsz)[:, None], n_pos, axis=1)
    scores = unit[rows, fit.anchors] @ np.swapaxes(unit, -1, -2) * teacher.sharpness
    attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn /= attn.sum(axis=-1, keepdims=True)
    z = np.concatenate([attn @ h, fit.contexts], axis=-1).reshape(bsz * n_pos, -1)
    chosen = fit.cluster_labels[rows, fit.anchors]
    centers = np.take_along_axis(fit.centers, chosen[:, :, None], axis=1)
    target = task.rule_logits(centers, fit.contexts).reshape(bsz * n_pos, -1)
    design = np.hstack([z, np.ones((z.shape[0], 1))])
    gram = design.T @ design + ridge * design.shape[0] * np.eye(design.shape[1])
    coef = np.linalg.solve(gram, design.T @ target)
    params["head.weight"] = coef[:-1].T.copy()
    params["head.bias"] = coef[-1].copy()
    return teacher, task
