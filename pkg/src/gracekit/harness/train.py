"""Training loop, ablation variants and run reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .. import numkit as nk
from ..controller import ControllerConfig, ControllerState, total_loss, update
from ..distill import DkdWeights, gdkd_from_logits, kd_from_logits
from ..errors import ConfigError, NumericalError
from ..quant import QuantConfig
from ..rcka import rcka_loss
from .data import Task, TaskSpec, ToyBatch
from .model import ToyModel, make_student, make_teacher

VARIANTS = ("ce_only", "naive_kd", "grace", "grace_no_gate", "grace_no_rcka", "grace_fixed_beta")
REPORT_HEADER = ("epoch", "variant", "train_loss", "eval_ce", "eval_acc", "beta", "ema_gdkd")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a toy run. Field names double as config-file keys."""

    seed: int = 0
    epochs: int = 12
    batch_size: int = 32
    lr_w: float = 0.01
    lr_s: float = 0.01
    momentum: float = 0.0
    bits: str = "4"
    group_size: int = 128
    alpha: float = 1.0
    beta_dkd: float = 4.0
    temperature: float = 2.0
    gate_temperature: float = 1.0
    tau: float = 0.35
    eta: float = 0.0015
    beta_init: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 5.0
    ema_decay: float = 0.99
    omega: float = 1.0
    kd_weight: float = 1.0
    rcka_pooling: str = "per_sample"
    vocab_size: int = 32
    n_visual: int = 64
    n_train: int = 2000
    n_eval: int = 500
    student_width: int = 24
    student_depth: int = 2
    teacher_width: int = 64
    teacher_depth: int = 4
    hidden_tap: int = -2
    noise_fraction: float = 0.0
    answer_only: bool = False

    def __post_init__(self):
        if self.lr_w <= 0 or self.lr_s <= 0:
            raise ConfigError("learning rates must be positive")
        if self.bits not in ("4", "8", "fp"):
            raise ConfigError(f"bits must be 4, 8 or fp, got {self.bits!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if not 0 <= self.noise_fraction <= 1:
            raise ConfigError("noise_fraction must lie in [0, 1]")

    @property
    def quant(self) -> QuantConfig | None:
        return None if self.bits == "fp" else QuantConfig(bits=int(self.bits), group_size=self.group_size)

    @property
    def dkd(self) -> DkdWeights:
        return DkdWeights(self.alpha, self.beta_dkd, self.temperature)

    @property
    def controller(self) -> ControllerConfig:
        return ControllerConfig(self.tau, self.eta, self.beta_init, self.beta_min, self.beta_max,
                                self.ema_decay, self.omega)

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec(vocab_size=self.vocab_size, n_visual=self.n_visual)


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines into typed :class:`RunConfig` overrides.

    Blank lines and ``#`` comments are ignored; unknown keys are an error.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = coerce(key, value)
    return out


def coerce(key: str, value: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[key]
    if kind == "bool":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        return {"int": int, "float": float}.get(kind, str)(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


@dataclass
class EpochRow:
    epoch: int
    variant: str
    train_loss: float
    eval_ce: float
    eval_acc: float
    beta: float | None = None
    ema_gdkd: float | None = None


@dataclass
class RunReport:
    variant: str
    config: RunConfig
    rows: list = field(default_factory=list)
    beta_trajectory: list = field(default_factory=list)
    gdkd_trajectory: list = field(default_factory=list)
    failed_step: int | None = None
    student: ToyModel | None = None

    @property
    def failed(self) -> bool:
        return self.failed_step is not None

    @property
    def final(self) -> EpochRow | None:
        return self.rows[-1] if self.rows else None


def cross_entropy(logits, targets, valid=None):
    """Mean negative log-likelihood of ``targets`` over valid rows."""
    n = nk.value_of(logits).shape[0]
    valid = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    logp = nk.log_softmax(logits)
    picked = nk.getitem(logp, (np.arange(n), np.asarray(targets)))
    return -nk.sum(picked * (valid / valid.sum()))


def corrupt_logits(rng: np.random.Generator, targets: np.ndarray, vocab: int) -> np.ndarray:
    """High-entropy teacher logits that lean towards a wrong class."""
    wrong = (targets + rng.integers(1, vocab, size=targets.shape)) % vocab
    logits = 0.5 * rng.normal(size=targets.shape + (vocab,))
    np.put_along_axis(logits, wrong[..., None], 1.5, axis=-1)
    return logits


@dataclass
class Experiment:
    """Everything shared by the variants of one seed: task, teacher and data."""

    cfg: RunConfig
    task: Task
    teacher: ToyModel
    train_set: ToyBatch
    eval_set: ToyBatch
    teacher_logits: np.ndarray  # (n_train * P, V), after noise injection
    noisy: np.ndarray  # (n_train * P,) bool

    @classmethod
    def build(cls, cfg: RunConfig) -> "Experiment":
        task = Task.create(cfg.seed, cfg.task_spec)
        teacher, task = make_teacher(cfg.seed, task, cfg.teacher_width, cfg.teacher_depth)
        train_set = task.sample(cfg.n_train, np.random.default_rng([cfg.seed, 11]), cfg.answer_only)
        eval_set = task.sample(cfg.n_eval, np.random.default_rng([cfg.seed, 13]), cfg.answer_only)
        t_logits = predict_logits(teacher, train_set)
        rng = np.random.default_rng([cfg.seed, 19])
        noisy = rng.random(t_logits.shape[0]) < cfg.noise_fraction
        if noisy.any():
            t_logits = t_logits.copy()
            t_logits[noisy] = corrupt_logits(rng, train_set.flat_targets[noisy], cfg.vocab_size)
        return cls(cfg, task, teacher, train_set, eval_set, t_logits, noisy)


def predict_logits(model: ToyModel, batch: ToyBatch, chunk: int = 250) -> np.ndarray:
    parts = [model.forward(batch.subset(slice(i, i + chunk))).logits for i in range(0, len(batch), chunk)]
    return np.concatenate(parts, axis=0)


def evaluate(model: ToyModel, batch: ToyBatch) -> tuple[float, float]:
    """(held-out cross-entropy, accuracy) over valid positions."""
    logits = predict_logits(model, batch)
    valid = batch.flat_valid
    targets = batch.flat_targets
    ce = float(cross_entropy(logits, targets, valid))
    acc = float(np.mean(np.argmax(logits, axis=-1)[valid] == targets[valid]))
    return ce, acc


def train(cfg: RunConfig, variant: str = "grace", experiment: Experiment | None = None) -> RunReport:
    """Train a fresh student under one loss variant.

    Variants: ``ce_only``; ``naive_kd`` (CE plus a fixed-weight temperature KL);
    ``grace`` (CE + beta GDKD + omega RCKA with the adaptive controller) and its
    ablations ``grace_no_gate``, ``grace_no_rcka`` and ``grace_fixed_beta``.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    exp = experiment or Experiment.build(cfg)
    student = make_student(cfg.seed, cfg.task_spec, (cfg.student_width,) * cfg.student_depth,
                           cfg.quant, cfg.hidden_tap)
    report = RunReport(variant, cfg, student=student)
    ctrl_cfg = cfg.controller
    if variant == "grace_no_rcka":
        ctrl_cfg = replace(ctrl_cfg, omega=0.0)
    state = ControllerState.initial(ctrl_cfg)
    uses_gdkd = variant.startswith("grace")
    velocity = {k: np.zeros_like(v) for k, v in student.params.items()}
    order_rng = np.random.default_rng([cfg.seed, 17])
    n_pos = exp.train_set.anchors.shape[1]
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(exp.train_set))
        losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            mb = exp.train_set.subset(idx)
            flat = (idx[:, None] * n_pos + np.arange(n_pos)).reshape(-1)
            step += 1
            try:
                # overflow surfaces as NumericalError from the tape, not as warnings
                with np.errstate(all="ignore"):
                    loss, gd_value = _step_loss(student, exp, mb, flat, variant, state, ctrl_cfg, cfg)
                    grads = nk.backward(loss.var)
                    _sgd(student, loss.leaves, grads, velocity, cfg)
            except NumericalError:
                report.failed_step = step
                return report
            losses.append(float(loss.var.value))
            if uses_gdkd:
                nxt = update(state, gd_value, ctrl_cfg)
                state = replace(nxt, beta=state.beta) if variant == "grace_fixed_beta" else nxt
                report.beta_trajectory.append(state.beta)
                report.gdkd_trajectory.append(gd_value)
        with np.errstate(all="ignore"):
            ce, acc = evaluate(student, exp.eval_set)
        if not (math.isfinite(ce) and all(math.isfinite(x) for x in losses)):
            report.failed_step = step
            return report
        report.rows.append(EpochRow(epoch, variant, float(np.mean(losses)), ce, acc,
                                    state.beta if uses_gdkd else None,
                                    state.ema_loss if uses_gdkd else None))
    return report


@dataclass
class _Loss:
    var: nk.Var
    leaves: dict


def _step_loss(student, exp, mb, flat, variant, state, ctrl_cfg, cfg):
    tape = nk.Tape()
    leaves = {k: tape.leaf(v) for k, v in student.params.items()}
    loss, gd_value = objective(student, leaves, exp, mb, flat, variant, state, ctrl_cfg, cfg)
    return _Loss(loss, leaves), gd_value


def objective(student, params, exp, mb, flat, variant, state, ctrl_cfg, cfg):
    """Training loss of ``variant`` on one minibatch at ``params``.

    ``flat`` indexes the minibatch's rows in the precomputed teacher logits.
    Returns ``(loss, gdkd_value)``; the second item is None for variants
    without the gated term.
    """
    out = student.forward(mb, params)
    targets, valid = mb.flat_targets, mb.flat_valid
    ce = cross_entropy(out.logits, targets, valid)
    t_logits = exp.teacher_logits[flat]
    if variant == "ce_only":
        return ce, None
    if variant == "naive_kd":
        return ce + kd_from_logits(out.logits, t_logits, cfg.temperature, valid) * cfg.kd_weight, None
    gd, _batch = gdkd_from_logits(out.logits, t_logits, targets, cfg.dkd, valid,
                                  gated=variant != "grace_no_gate",
                                  gate_temperature=cfg.gate_temperature)
    rk = 0.0
    if ctrl_cfg.omega > 0:
        rk = rcka_loss(exp.teacher.forward(mb).tap, out.tap, cfg.rcka_pooling)
    return total_loss(ce, gd, rk, state, ctrl_cfg), float(nk.value_of(gd))


def _sgd(model: ToyModel, leaves, grads, velocity, cfg: RunConfig):
    for name, leaf in leaves.items():
        g = grads[leaf]
        lr = cfg.lr_s if name.endswith(".theta") else cfg.lr_w
        if cfg.momentum:
            velocity[name] = cfg.momentum * velocity[name] + g
            g = velocity[name]
        model.params[name] = model.params[name] - lr * g


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if not isinstance(x, (int, str)) else str(x)


def report_csv(report: RunReport | None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for row in (report.rows if report else []):
        writer.writerow([_fmt(getattr(row, name)) for name in REPORT_HEADER])
    return buf.getvalue()


def run_report_write(report: RunReport | None, path: str | Path) -> Path:
    """Write the per-epoch CSV; I/O failures are re-raised naming the path."""
    path = Path(path)
    try:
        path.write_text(report_csv(report), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write run report to {path}: {exc}") from exc
    return path


def config_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
