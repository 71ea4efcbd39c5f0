"""Mini-batch training loop with adaptive moment estimation, validation-based
model selection, checkpoint round-trips and ablation sweeps.

Determinism contract: with a fixed config and seed, two runs produce
bitwise-identical histories and checkpoints. The batch order for epoch e is
a pure function of (seed, e), so a resumed run replays the unbroken one.
"""

from __future__ import annotations

import json
import math
import os
import random
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import evaluate as ev
from . import numcore as nc
from .corpus import DatasetSplit
from .model import ModelConfig, VulnPoolModel
from .encoder import EncoderConfig
from .tokenizer import Vocabulary

LAMBDA_GRID = (0.1, 0.3, 0.01, 0.03)
PROMPT_LEN_GRID = (1, 3, 5, 7, 9)
TOPK_GRID = (1, 2, 3)
MPL_GRID = (1, 2, 3)
MODE_GRID = ("pool_query", "pool_masked", "backbone_only")

SWEEP_AXES = {
    "lambda": LAMBDA_GRID,
    "lp": PROMPT_LEN_GRID,
    "topk": TOPK_GRID,
    "mpl": MPL_GRID,
    "mode": MODE_GRID,
}


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; carries a diagnostic snapshot."""

    def __init__(self, message, epoch=None, batch=None, sample_ids=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.sample_ids = sample_ids or []


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None  # off by default; global-norm clip when set

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_recall: float
    val_precision: float
    val_f1: float
    selection_counts: dict[str, dict[int, int]] = field(default_factory=dict)
    params_touched: int = 0

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_recall": self.val_recall,
            "val_precision": self.val_precision,
            "val_f1": self.val_f1,
            "selection_counts": {
                lang: dict(counts) for lang, counts in self.selection_counts.items()
            },
            "params_touched": self.params_touched,
        }


@dataclass
class TrainHistory:
    initial_train_loss: float | None = None
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def to_records(self) -> list[dict]:
        head = {"initial_train_loss": self.initial_train_loss, "best_epoch": self.best_epoch}
        return [head] + [e.to_record() for e in self.epochs]


# ---------------------------------------------------------------------------
# optimizer

class AdamState:
    def __init__(self):
        self.step = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def slot(self, name: str, like: np.ndarray):
        if name not in self.moments:
            self.moments[name] = (np.zeros_like(like), np.zeros_like(like))
        return self.moments[name]


def adam_step(
    named_params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grad_clip: float | None = None,
):
    """One bias-corrected adaptive-moment update over all gradients present."""
    named_params = list(named_params)
    if grad_clip is not None:
        total = math.sqrt(
            sum(float((p.grad**2).sum()) for _, p in named_params if p.grad is not None)
        )
        if total > grad_clip > 0:
            factor = grad_clip / total
            for _, p in named_params:
                if p.grad is not None:
                    p.grad = p.grad * factor
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        m, v = state.slot(name, p.data)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# training loop

def _epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    order = list(range(n))
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    return order


def _mean_batch_loss(model: VulnPoolModel, batch, collect: Counter | None):
    losses = []
    for s in batch:
        out = model.forward(s, train_mode=True)
        losses.append(model.loss(out.logits, s.label, out.phi))
        if collect is not None and out.selection is not None:
            collect[(s.language.tag, out.selection.i_star)] += 1
    total = losses[0] if len(losses) == 1 else nc.add_n(losses)
    return nc.scale(total, 1.0 / len(losses))


def train(
    model: VulnPoolModel,
    split: DatasetSplit,
    config: TrainConfig,
    run_dir=None,
    start_epoch: int = 0,
    adam_state: AdamState | None = None,
    log=None,
):
    """Run the mini-batch loop and return (best model, history).

    The best model is the validation-F1 argmax over epoch-end checkpoints,
    ties resolving to the earlier epoch.
    """
    if not split.train:
        raise ValueError("training split is empty")
    state = adam_state if adam_state is not None else AdamState()
    history = TrainHistory()
    reinit_rng = np.random.default_rng([config.seed, 0xF00D])
    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        history_path = os.path.join(run_dir, "history.jsonl")
        if start_epoch == 0 and os.path.exists(history_path):
            os.remove(history_path)  # fresh run; append only makes sense on resume

    best_f1 = -1.0
    best_epoch = None
    best_params = None

    for epoch in range(start_epoch, config.epochs):
        order = _epoch_order(len(split.train), config.seed, epoch)
        selections: Counter = Counter()
        touched: set[str] = set()
        losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [split.train[i] for i in order[lo : lo + config.batch_size]]
            loss = _mean_batch_loss(model, batch, selections)
            value = loss.item()
            if not math.isfinite(value):
                if run_dir is not None:
                    save_checkpoint(model, state, os.path.join(run_dir, "diverged.ckpt"),
                                    epochs_done=epoch)
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch} batch {lo // config.batch_size}",
                    epoch=epoch,
                    batch=lo // config.batch_size,
                    sample_ids=[s.id for s in batch],
                )
            if history.initial_train_loss is None:
                history.initial_train_loss = value
            losses.append(value)
            nc.backward(loss)
            for name, p in model.parameters():
                if p.grad is not None:
                    touched.add(name)
            adam_step(model.parameters(), state, config.lr, config.beta1, config.beta2,
                      config.eps, config.grad_clip)
            model.zero_grad()
            model.keys.reinit_zero_keys(reinit_rng)

        val_report, _ = ev.evaluate_model(model, split.val) if split.val else (None, None)
        record = EpochRecord(
            epoch=epoch,
            train_loss=sum(losses) / len(losses),
            val_recall=val_report.recall if val_report else 0.0,
            val_precision=val_report.precision if val_report else 0.0,
            val_f1=val_report.f1 if val_report else 0.0,
            selection_counts=_nest_selections(selections),
            params_touched=len(touched),
        )
        history.epochs.append(record)
        if log:
            log(f"epoch {epoch}: loss={record.train_loss:.4f} val_f1={record.val_f1:.4f}")
        if record.val_f1 > best_f1:
            best_f1 = record.val_f1
            best_epoch = epoch
            best_params = model.snapshot_params()
        if run_dir is not None:
            save_checkpoint(model, state, os.path.join(run_dir, f"epoch_{epoch}.ckpt"),
                            epochs_done=epoch + 1)
            with open(os.path.join(run_dir, "history.jsonl"), "a", encoding="utf-8") as f:
                f.write(json.dumps(record.to_record(), sort_keys=True) + "\n")

    history.best_epoch = best_epoch
    if best_params is not None:
        best_model = model.copy()
        best_model.load_params(best_params)
    else:
        best_model = model.copy()
    if run_dir is not None:
        save_checkpoint(best_model, state, os.path.join(run_dir, "best.ckpt"),
                        epochs_done=config.epochs)
    return best_model, history


def _nest_selections(selections: Counter) -> dict[str, dict[int, int]]:
    nested: dict[str, dict[int, int]] = {}
    for (lang, idx), n in sorted(selections.items()):
        nested.setdefault(lang, {})[idx] = n
    return nested


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: VulnPoolModel, state: AdamState | None, path, epochs_done: int = 0):
    arrays = {name: p.data for name, p in model.parameters()}
    if state is not None:
        for name, (m, v) in state.moments.items():
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = v
    meta = {
        "kind": "train",
        "model": asdict(model.config),
        "encoder": asdict(model.encoder.config),
        "assignment": model.assignment.to_record() if model.assignment else None,
        "vocab_size": model.vocab.size,
        "vocab_hash": vocab_hash(model.vocab),
        "adam_step": state.step if state is not None else 0,
        "epochs_done": epochs_done,
    }
    ckpt.save_arrays(path, arrays, meta)


def load_checkpoint(path, vocab: Vocabulary):
    """Rebuild (model, adam state, meta) from a training checkpoint."""
    arrays, meta = ckpt.load_arrays(path)
    if meta.get("kind") != "train":
        raise ckpt.CheckpointError(f"{path}: not a training checkpoint: {meta.get('kind')!r}")
    if meta["vocab_hash"] != vocab_hash(vocab):
        raise ckpt.CheckpointError(
            f"{path}: vocabulary hash mismatch (checkpoint {meta['vocab_hash'][:12]}..., "
            f"supplied {vocab_hash(vocab)[:12]}...)"
        )
    model_config = ModelConfig(**meta["model"])
    enc_config = EncoderConfig(**meta["encoder"])
    stored_lp = arrays["pool.P.0"].shape[0] if "pool.P.0" in arrays else None
    if stored_lp is not None and stored_lp != model_config.prompt_len:
        raise ckpt.CheckpointError(
            f"{path}: manifest field 'prompt_len' is {model_config.prompt_len} but stored "
            f"pool matrices have {stored_lp} rows"
        )
    model = VulnPoolModel(model_config, enc_config, vocab)
    expected = {name: p.data.shape for name, p in model.parameters()}
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    ckpt.check_shapes(params, expected, where=str(path))
    model.load_params(params)
    state = AdamState()
    state.step = int(meta.get("adam_step", 0))
    for name in expected:
        m = arrays.get(f"adam.m.{name}")
        v = arrays.get(f"adam.v.{name}")
        if m is not None and v is not None:
            state.moments[name] = (m.copy(), v.copy())
    return model, state, meta


def vocab_hash(vocab: Vocabulary) -> str:
    import hashlib

    return hashlib.sha256("\n".join(vocab.id_to_token).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# ablation sweeps

@dataclass
class SweepRow:
    value: object
    mode: str
    recall: float
    precision: float
    f1: float
    initial_loss: float
    final_loss: float


@dataclass
class SweepResult:
    axis: str
    rows: list[SweepRow]

    def render(self) -> str:
        titles = {"lp": "L_p", "lambda": "lambda", "topk": "K", "mpl": "Matrices/lang"}
        if self.axis == "mode":
            header = ["Method", "Recall", "Precision", "F1-score"]
            rows = [
                [r.mode, f"{100 * r.recall:.2f}%", f"{100 * r.precision:.2f}%",
                 f"{100 * r.f1:.2f}%"]
                for r in self.rows
            ]
        else:
            header = ["Method", titles.get(self.axis, self.axis), "Recall", "Precision",
                      "F1-score"]
            rows = [
                [r.mode, r.value, f"{100 * r.recall:.2f}%", f"{100 * r.precision:.2f}%",
                 f"{100 * r.f1:.2f}%"]
                for r in self.rows
            ]
        return ev.render_rows(header, rows)

    def to_records(self) -> list[dict]:
        return [
            {"axis": self.axis, "value": r.value, "mode": r.mode, "recall": r.recall,
             "precision": r.precision, "f1": r.f1, "initial_loss": r.initial_loss,
             "final_loss": r.final_loss}
            for r in self.rows
        ]


def sweep(split: DatasetSplit, vocab: Vocabulary, base_config, axis: str, values=None,
          log=None) -> SweepResult:
    """Train one model per axis value (shared seed) and tabulate test metrics."""
    from .config import build_model, build_train_config

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    values = list(values) if values is not None else list(SWEEP_AXES[axis])
    rows = []
    for value in values:
        run_cfg = base_config.with_axis(axis, value)
        model = build_model(run_cfg, vocab)
        if log:
            log(f"sweep {axis}={value}: training")
        best, history = train(model, split, build_train_config(run_cfg))
        report, _ = ev.evaluate_model(best, split.test)
        rows.append(
            SweepRow(
                value=value,
                mode=run_cfg.mode,
                recall=report.recall,
                precision=report.precision,
                f1=report.f1,
                initial_loss=history.initial_train_loss,
                final_loss=history.epochs[-1].train_loss if history.epochs else float("nan"),
            )
        )
    return SweepResult(axis=axis, rows=rows)
