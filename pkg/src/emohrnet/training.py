"""Adam training loop, best-validation selection, evaluation and checkpoints."""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from . import tensorio
from .augment import AugmentPolicy, augment
from .data import SpectrogramSet, batch_iter
from .model import HRNetConfig, HRNetModel, build, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0001
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ValueError("batch_size >= 1, epochs >= 0 and eval_every >= 1 are required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class NumericalAbort(RuntimeError):
    pass


class ConfigMismatch(tensorio.ContainerError):
    pass


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, ad.Tensor]) -> "AdamState":
        return cls({k: np.zeros(p.shape) for k, p in params.items()}, {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with the L2 term folded into the gradient."""
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ad.ShapeError(f"adam: {k} param {p.shape}, grad {grads[k].shape}, state {state.m[k].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k] + cfg.weight_decay * p.data
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)


# ------------------------------------------------------------ evaluation


@dataclass
class EvalReport:
    unweighted_accuracy: float
    overall_accuracy: float
    confusion: np.ndarray  # rows = true class, cols = predicted
    per_class_recall: list[float | None]

    def to_dict(self, labels=None) -> dict:
        d = {
            "unweighted_accuracy": self.unweighted_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "per_class_recall": self.per_class_recall,
            "confusion": self.confusion.astype(int).tolist(),
        }
        if labels is not None:
            d["labels"] = list(labels)
        return d


def report_from_predictions(y_true, y_pred, n_classes: int) -> EvalReport:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    support = cm.sum(axis=1)
    recall = [float(cm[c, c] / support[c]) if support[c] else None for c in range(n_classes)]
    present = [r for r in recall if r is not None]
    return EvalReport(
        unweighted_accuracy=float(sum(present) / len(present)),
        overall_accuracy=float(np.trace(cm) / y_true.size),
        confusion=cm,
        per_class_recall=recall,
    )


_evaluating = False


@contextlib.contextmanager
def _eval_mode():
    global _evaluating
    prev, _evaluating = _evaluating, True
    try:
        yield
    finally:
        _evaluating = prev


def is_evaluating() -> bool:
    return _evaluating


def predict(model: HRNetModel, values: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for (N, n_mels, n_frames) inputs, no augmentation."""
    out = []
    with _eval_mode():
        for s in range(0, len(values), batch_size):
            out.append(forward(values[s : s + batch_size][:, None], model).data)
    return np.concatenate(out)


def evaluate(model: HRNetModel, dataset: SpectrogramSet, batch_size: int = 64) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    probs = predict(model, dataset.values, batch_size)
    return report_from_predictions(dataset.labels, probs.argmax(axis=1), model.config.n_classes)


# ----------------------------------------------------------- checkpoints


def config_hash(section: dict) -> str:
    return hashlib.sha256(tensorio.canonical_json(section)).hexdigest()


# fields allowed to change between a run and its resumption: the epoch
# budget may grow, and corpus paths may move between machines
_UNHASHED = {"train": ("epochs",), "data": ("manifest", "audio_root")}


def section_hash(name: str, section: dict) -> str:
    skip = _UNHASHED.get(name, ())
    return config_hash({k: v for k, v in section.items() if k not in skip})


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    configs: dict[str, dict]  # model / train / dsp / augment sections
    epoch: int
    validation_metric: float | None
    rng_state: dict
    history: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None

    @property
    def hashes(self) -> dict[str, str]:
        return {k: section_hash(k, v) for k, v in self.configs.items()}

    def model(self) -> HRNetModel:
        cfg = HRNetConfig(**self.configs["model"])
        m = HRNetModel(cfg, {k: ad.Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()})
        return m


def _header(ckpt: Checkpoint) -> dict:
    return {
        "format": "checkpoint",
        "configs": ckpt.configs,
        "hashes": ckpt.hashes,
        "epoch": ckpt.epoch,
        "validation_metric": ckpt.validation_metric,
        "rng_state": ckpt.rng_state,
        "adam_t": ckpt.adam.t,
        "history": [list(h) for h in ckpt.history],
        "best_epoch": ckpt.best_epoch,
        "best_metric": ckpt.best_metric,
        "param_names": list(ckpt.params),
    }


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = dict(ckpt.params)
    for k in ckpt.params:
        tensors[f"adam.m/{k}"] = ckpt.adam.m[k]
    for k in ckpt.params:
        tensors[f"adam.v/{k}"] = ckpt.adam.v[k]
    tensorio.save(path, _header(ckpt), tensors)


def load_checkpoint(path, expect: dict[str, dict] | None = None) -> Checkpoint:
    """Read a checkpoint; ``expect`` config sections must hash-match the stored ones."""
    header, tensors = tensorio.load(path)
    if header.get("format") != "checkpoint":
        raise tensorio.ContainerError(f"{path} is not a checkpoint (format={header.get('format')!r})")
    names = header["param_names"]
    ckpt = Checkpoint(
        params={k: tensors[k] for k in names},
        adam=AdamState(
            {k: tensors[f"adam.m/{k}"] for k in names}, {k: tensors[f"adam.v/{k}"] for k in names}, header["adam_t"]
        ),
        configs=header["configs"],
        epoch=header["epoch"],
        validation_metric=header["validation_metric"],
        rng_state=header["rng_state"],
        history=[tuple(h) for h in header["history"]],
        best_epoch=header["best_epoch"],
        best_metric=header["best_metric"],
    )
    if ckpt.hashes != header["hashes"]:
        raise ConfigMismatch(f"{path}: stored config hashes do not match the stored configs")
    if expect is not None:
        check_configs(ckpt, expect)
    return ckpt


def check_configs(ckpt: Checkpoint, expect: dict[str, dict]) -> None:
    have = ckpt.hashes
    for k, section in expect.items():
        if have.get(k) != section_hash(k, section):
            raise ConfigMismatch(f"config section {k!r} differs from the checkpoint's")


def write_history_csv(history, path) -> None:
    lines = ["epoch,train_loss,val_unweighted_acc"]
    for epoch, loss, metric in history:
        lines.append(f"{epoch},{loss!r},{'' if metric is None else repr(metric)}")
    Path(path).write_text("\n".join(lines) + "\n")


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[tuple[int, float, float | None]]


def _snapshot(model, adam, configs, epoch, metric, seed, history, best_epoch, best_metric) -> Checkpoint:
    return Checkpoint(
        params={k: p.data.copy() for k, p in model.params.items()},
        adam=AdamState({k: a.copy() for k, a in adam.m.items()}, {k: a.copy() for k, a in adam.v.items()}, adam.t),
        configs=configs,
        epoch=epoch,
        validation_metric=metric,
        rng_state={"seed": seed, "next_epoch": epoch},
        history=list(history),
        best_epoch=best_epoch,
        best_metric=best_metric,
    )


def augment_batch(values: np.ndarray, indices, policy: AugmentPolicy, seed: int, epoch: int) -> np.ndarray:
    """Per-sample augmentation keyed by (epoch, dataset index) so batching never changes draws."""
    if _evaluating:
        raise RuntimeError("augmentation requested during evaluation")
    if not policy.enabled:
        return values
    out = np.empty_like(values)
    for k, idx in enumerate(indices):
        gen = rngmod.make_rng(seed, rngmod.stream_id(rngmod.AUGMENT, epoch, int(idx)))
        out[k, 0] = augment(values[k, 0], policy, gen)
    return out


def train_step(model: HRNetModel, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    with ad.Graph() as g:
        loss = ad.cross_entropy(forward(inputs, model), labels)
    g.backward(loss)
    return loss.item(), {k: p.grad for k, p in model.params.items()}


def train(
    model: HRNetModel,
    train_set: SpectrogramSet,
    val_set: SpectrogramSet | None,
    cfg: TrainConfig,
    policy: AugmentPolicy | None = None,
    extra_configs: dict[str, dict] | None = None,
    resume: Checkpoint | None = None,
    best: Checkpoint | None = None,
    on_epoch: Callable[[int, float, float | None], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` total epochs, keeping the best validation checkpoint.

    ``extra_configs`` (e.g. dsp) are echoed into checkpoints and hashed.
    With ``resume``, model parameters, Adam state, history and epoch counter
    are restored and training continues up to ``cfg.epochs``.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if val_set is not None and len(val_set) == 0:
        raise ValueError("validation set is empty")
    K = model.config.n_classes
    for name, ds in (("train", train_set), ("val", val_set)):
        if ds is not None and len(ds) and ds.labels.max() >= K:
            raise ValueError(f"{name} labels exceed the model's {K} classes")
    policy = policy or AugmentPolicy(enabled=False)
    configs = {"model": model.config.to_dict(), "train": cfg.to_dict(), "augment": policy.to_dict()}
    configs.update(extra_configs or {})

    adam = AdamState.zeros_like(model.params)
    history: list[tuple[int, float, float | None]] = []
    start = 0
    best_ckpt: Checkpoint | None = None
    if resume is not None:
        check_configs(resume, configs)
        model.load_state(resume.params)
        adam = AdamState(
            {k: a.copy() for k, a in resume.adam.m.items()}, {k: a.copy() for k, a in resume.adam.v.items()}, resume.adam.t
        )
        history = list(resume.history)
        start = resume.epoch
        if resume.best_epoch is not None:
            if best is not None and best.epoch == resume.best_epoch:
                best_ckpt = best
            else:
                log.warning("best checkpoint of epoch %s not supplied; restarting best tracking", resume.best_epoch)
    seed = cfg.seed

    if best_ckpt is None:
        best_ckpt = _snapshot(model, adam, configs, start, None, seed, history, None, None)
    best_metric = best_ckpt.validation_metric
    best_epoch = best_ckpt.epoch if best_metric is not None else None

    for epoch in range(start, cfg.epochs):
        total, seen = 0.0, 0
        for b, batch in enumerate(batch_iter(train_set, cfg.batch_size, K, seed=seed, epoch=epoch)):
            x = augment_batch(batch.inputs, batch.indices, policy, seed, epoch)
            loss, grads = train_step(model, x, batch.labels)
            if not math.isfinite(loss):
                raise NumericalAbort(f"non-finite loss {loss} at epoch {epoch + 1}, batch {b}")
            adam_step(model.params, grads, adam, cfg)
            total += loss * len(batch.ids)
            seen += len(batch.ids)
        done = epoch + 1
        metric = None
        if val_set is not None and done % cfg.eval_every == 0:
            metric = evaluate(model, val_set, cfg.batch_size).unweighted_accuracy
        history.append((done, total / seen, metric))
        if metric is not None and (best_metric is None or metric > best_metric):
            best_metric, best_epoch = metric, done
            best_ckpt = _snapshot(model, adam, configs, done, metric, seed, history, best_epoch, best_metric)
        log.info("epoch %d loss %.6f val %s", done, total / seen, metric)
        if on_epoch is not None:
            on_epoch(done, total / seen, metric)

    last = _snapshot(
        model, adam, configs, max(start, cfg.epochs), history[-1][2] if history else None, seed, history, best_epoch, best_metric
    )
    return TrainResult(best_ckpt, last, history)


def init_checkpoint(model: HRNetModel, cfg: TrainConfig, policy: AugmentPolicy | None = None, extra=None) -> Checkpoint:
    policy = policy or AugmentPolicy(enabled=False)
    configs = {"model": model.config.to_dict(), "train": cfg.to_dict(), "augment": policy.to_dict()}
    configs.update(extra or {})
    return _snapshot(model, AdamState.zeros_like(model.params), configs, 0, None, cfg.seed, [], None, None)


def new_model(config: HRNetConfig, seed: int) -> HRNetModel:
    return build(config, rngmod.make_rng(seed, rngmod.stream_id(rngmod.INIT)))
