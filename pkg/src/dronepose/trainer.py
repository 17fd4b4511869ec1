"""Adam training loop for the keypoint model and batch prediction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import keyhead
from .losses import LossConfig, batch_loss, scale_schedule
from .synth import render_frame

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None
    checkpoint_every: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def render_dataset(dataset, patch):
    """Grayscale frames for every record, drawn from its GT keypoints."""
    if not dataset.records:
        return np.zeros((0, 0, 0))
    return np.stack([render_frame(r.kp2d_gt, r.intrinsics, patch).pixels for r in dataset.records])


def hyperparams_for(dataset, overrides=None):
    intr = dataset.records[0].intrinsics
    kw = dict(image_height=intr.height, image_width=intr.width)
    kw.update(overrides or {})
    return keyhead.HyperParams(**kw)


def check_compatible(dataset, model):
    for rec in dataset.records:
        if (rec.intrinsics.height, rec.intrinsics.width) != (model.hp.image_height, model.hp.image_width):
            raise ValueError(
                f"frame {rec.frame_id}: image {rec.intrinsics.width}x{rec.intrinsics.height} does not match "
                f"model input {model.hp.image_width}x{model.hp.image_height}"
            )


def train(dataset, model, cfg, images=None, on_epoch=None):
    """Train ``model`` in place; returns ``(model, log_rows)``.

    Each log row is ``{"epoch", "loss", "scale"}`` where ``loss`` is the
    frame-weighted mean training loss of the epoch and ``scale`` is S(epoch).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    check_compatible(dataset, model)
    if images is None:
        images = render_dataset(dataset, model.hp.patch)
    targets = np.stack([r.kp2d_gt for r in dataset.records])
    n = len(targets)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rows = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            trace = keyhead.forward(model, images[idx])
            loss, dy = batch_loss(targets[idx], trace.y, epoch, cfg.loss)
            if not math.isfinite(loss):
                raise NonFiniteLossError(epoch, b)
            grads = keyhead.backward(trace, model, dy)
            opt.step(model.params, grads)
            model.version += 1
            total += loss * len(idx)
        row = {"epoch": epoch, "loss": total / n, "scale": scale_schedule(epoch, cfg.loss)}
        rows.append(row)
        log.debug("epoch %d loss %.6g scale %.6g", epoch, row["loss"], row["scale"])
        if on_epoch is not None:
            on_epoch(row)
        if cfg.checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            keyhead.save_model(model, cfg.checkpoint_path)
    if cfg.checkpoint_path:
        keyhead.save_model(model, cfg.checkpoint_path)
    if cfg.log_path:
        write_log(rows, cfg.log_path)
    return model, rows


def write_log(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,scale\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['loss']!r},{r['scale']!r}\n")


def predict(dataset, model, images=None):
    """Predicted keypoints ``(n, 4, 2)`` in dataset order."""
    check_compatible(dataset, model)
    if images is None:
        images = render_dataset(dataset, model.hp.patch)
    if len(images) == 0:
        return np.zeros((0, model.hp.keypoints, 2))
    return keyhead.predict_keypoints(model, images)


def write_predictions(dataset, preds, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec, kp in zip(dataset.records, preds):
            row = {"frame_id": rec.frame_id, "sequence_id": rec.sequence_id, "kp2d": np.asarray(kp).tolist()}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_predictions(path):
    """``{frame_id: (4, 2) array}`` from a predictions JSONL file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                kp = np.array(row["kp2d"], dtype=float)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if kp.shape != (4, 2):
                raise ValueError(f"{path}: line {lineno}: expected 4 keypoints, got shape {kp.shape}")
            out[int(row["frame_id"])] = kp
    return out
