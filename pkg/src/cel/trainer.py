"""Two-stage training loop, optimizer, schedule, history and checkpoints.

Per mini-batch the loop runs: forward pass, stage-dependent loss using the
current confidences and prototypes, confidence update from this batch's
predictions, prototype update, then the parameter step. Confidences and
prototypes are refreshed every batch from epoch 1; the prototype loss only
joins after epoch ``tw``.

The trainer takes features and candidate sets only. Accuracy columns in the
history come from an optional ``monitor`` callback supplied by the caller.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import __version__
from .data import check_confidence
from .exceptions import DatasetFormatError, IntegrityError, InvariantViolation, NonFiniteLossError
from .losses import (
    SELECTION_MODES,
    LossWeights,
    PrototypeBank,
    cal_loss,
    cal_similarities,
    cls_loss,
    in_second_stage,
    init_confidence,
    pdl_loss,
    pdl_similarities,
    select_high_confidence,
    total_loss,
    update_confidence,
    update_prototypes,
)
from .network import ModelConfig, build_model, normalize_embeddings

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cel-checkpoint"
CHECKPOINT_VERSION = 1

HISTORY_COLUMNS = (
    "epoch",
    "lr",
    "loss_cls",
    "loss_cal",
    "loss_pdl",
    "train_acc",
    "test_acc",
    "pdl_skipped",
    "conf_hit_rate",
)


def _identity(x, rng):
    return x


AUGMENTATIONS: dict[str, Callable] = {"identity": _identity}


def register_augmentation(name: str, fn: Callable) -> None:
    """Register ``fn(x_batch, rng) -> x_batch`` under ``name`` for TrainConfig.augment."""
    AUGMENTATIONS[name] = fn


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    tw: int = 50
    tmax: int = 100
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    selection_mode: str = "strict"
    augment: str = "identity"
    eval_every: int = 1
    checkpoint_every: int = 0
    serial: bool = True
    check_invariants: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        LossWeights(self.alpha, self.beta, self.gamma1, self.gamma2, self.tw, self.tmax)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma1, self.gamma2, self.tw, self.tmax)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_cls: float
    loss_cal: float
    loss_pdl: float
    train_acc: float = math.nan
    test_acc: float = math.nan
    pdl_skipped: int = 0
    conf_hit_rate: float = 0.0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    first_batch_loss_cls: float | None = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([repr(getattr(r, c)) for c in HISTORY_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(
                    EpochRecord(
                        epoch=int(row["epoch"]),
                        pdl_skipped=int(row["pdl_skipped"]),
                        **{
                            k: float(row[k])
                            for k in HISTORY_COLUMNS
                            if k not in ("epoch", "pdl_skipped")
                        },
                    )
                )
        return cls(records)

    def to_list(self):
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows, first_batch_loss_cls=None):
        return cls([EpochRecord(**r) for r in rows], first_batch_loss_cls)


def lr_schedule(epoch: int, tmax: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at epoch 1 toward 0 at epoch ``tmax + 1``."""
    return lr0 * (1.0 + math.cos(math.pi * (epoch - 1) / tmax)) / 2.0


def optimizer_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """SGD with classical momentum and L2 weight decay, in place.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    ``state`` is a list of velocity tensors (``None`` entries start at zero).
    Returns ``(params, state)``.
    """
    if len(params) != len(grads):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    if state is None:
        state = [None] * len(params)
    with torch.no_grad():
        for k, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            v = state[k]
            if v is None:
                v = torch.zeros_like(p)
                state[k] = v
            v.mul_(momentum).add_(g)
            if weight_decay:
                v.add_(p, alpha=weight_decay)
            p.sub_(v, alpha=lr)
    return params, state


def serial_mode_requested(config: TrainConfig | None = None) -> bool:
    if os.environ.get("CEL_SERIAL", "") not in ("", "0"):
        return True
    return bool(config.serial) if config is not None else False


class Trainer:
    """Stateful runner for one training job; supports checkpoint and resume."""

    def __init__(
        self,
        features,
        candidates,
        model_config: ModelConfig,
        config: TrainConfig,
        monitor: Callable | None = None,
        checkpoint_dir=None,
        batch_callback: Callable | None = None,
    ):
        if serial_mode_requested(config):
            torch.set_num_threads(1)
        self.model_config = model_config
        self.config = config
        self.weights = config.weights
        self.monitor = monitor
        self.batch_callback = batch_callback
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.last_checkpoint = None

        self.candidates = np.asarray(candidates, dtype=bool)
        X = np.asarray(features)
        if X.shape[0] != self.candidates.shape[0]:
            raise ValueError("features and candidates disagree on sample count")
        if self.candidates.shape[1] != model_config.q:
            raise ValueError("candidate matrix width does not match model q")
        self.X = torch.as_tensor(X, dtype=model_config.torch_dtype)
        self.m = X.shape[0]

        self.model = build_model(model_config, seed=config.seed)
        self.params = [p for _, p in self.model.named_parameters()]
        self.velocity = [torch.zeros_like(p) for p in self.params]
        self.T = init_confidence(self.candidates)
        dim = model_config.embed_dim if model_config.kind == "cel" else 1
        self.bank = PrototypeBank(model_config.q, dim)
        self.history = TrainHistory()
        self.epoch = 0
        self.counters: Counter = Counter()

    @property
    def uses_embeddings(self) -> bool:
        return self.model_config.kind == "cel"

    # -- inference --------------------------------------------------------

    def predict_proba(self, X, chunk: int = 1024) -> np.ndarray:
        X = torch.as_tensor(np.asarray(X), dtype=self.model_config.torch_dtype)
        out = []
        with torch.no_grad():
            for start in range(0, X.shape[0], chunk):
                P, _ = self.model(X[start : start + chunk])
                out.append(P.double().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.model_config.q))

    # -- training ---------------------------------------------------------

    def batch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, epoch]).permutation(self.m)

    def _batch_step(self, epoch, b, idx, rng, stats):
        cfg, w = self.config, self.weights
        x = AUGMENTATIONS[cfg.augment](self.X[idx], rng)
        S_b = self.candidates[idx]
        P, E = self.model(x)

        zero = P.new_zeros(())
        losses = {"cls": cls_loss(P, self.T[idx]), "cal": zero, "pdl": zero}
        selections = select_high_confidence(P, S_b, cfg.selection_mode)
        E_hat = None
        if self.uses_embeddings:
            E_hat = normalize_embeddings(E)
            if w.alpha > 0:
                s, d = cal_similarities(E_hat, S_b, self.counters)
                losses["cal"] = cal_loss(s, d, w.gamma1)
            if in_second_stage(epoch, w) and w.beta > 0:
                before = self.counters["pdl_skipped"]
                s, d, _ = pdl_similarities(E_hat, self.bank, selections, self.counters)
                losses["pdl"] = pdl_loss(s, d, w.gamma2, self.counters)
                stats["pdl_skipped"] += self.counters["pdl_skipped"] - before
        loss = total_loss(epoch, losses, w)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(epoch, b, self.last_checkpoint)
        if epoch == 1 and b == 0:
            self.history.first_batch_loss_cls = float(losses["cls"].detach())

        self.T[idx] = update_confidence(P.detach(), S_b, self.counters)
        if self.uses_embeddings:
            update_prototypes(self.bank, E_hat.detach(), selections)
        if cfg.check_invariants:
            problems = check_confidence(self.T[idx], S_b)
            if problems:
                raise InvariantViolation(f"epoch {epoch} batch {b}: {'; '.join(problems)}")
            self.bank.check()

        grads = torch.autograd.grad(loss, self.params, allow_unused=True)
        optimizer_step(self.params, grads, self.velocity, stats["lr"], cfg.momentum, cfg.weight_decay)

        n = len(idx)
        for key in ("cls", "cal", "pdl"):
            stats[key] += float(losses[key].detach()) * n
        stats["hits"] += int((select_high_confidence(P.detach(), S_b, "strict") >= 0).sum())
        if self.batch_callback is not None:
            self.batch_callback(self, epoch, b, idx)

    def run_epoch(self) -> EpochRecord:
        epoch = self.epoch + 1
        cfg = self.config
        lr = lr_schedule(epoch, cfg.tmax, cfg.lr)
        stats = Counter()
        stats["lr"] = lr
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        order = self.batch_order(epoch)
        self.model.train()
        for b, start in enumerate(range(0, self.m, cfg.batch_size)):
            self._batch_step(epoch, b, order[start : start + cfg.batch_size], rng, stats)
        self.model.eval()

        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss_cls=stats["cls"] / self.m,
            loss_cal=stats["cal"] / self.m,
            loss_pdl=stats["pdl"] / self.m,
            pdl_skipped=int(stats["pdl_skipped"]),
            conf_hit_rate=stats["hits"] / self.m,
        )
        for p in self.params:
            if not torch.isfinite(p).all():
                raise NonFiniteLossError(epoch, "end", self.last_checkpoint)
        if cfg.check_invariants:
            problems = check_confidence(self.T, self.candidates)
            if problems:
                raise InvariantViolation(f"epoch {epoch}: {'; '.join(problems)}")
            self.bank.check()
        if self.monitor is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.tmax):
            for key, value in self.monitor(self, epoch).items():
                setattr(record, key, value)
        self.history.records.append(record)
        self.epoch = epoch
        if self.checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            self.save_checkpoint(self.checkpoint_dir / f"epoch_{epoch:04d}")
        return record

    def run(self, until_epoch: int | None = None) -> TrainHistory:
        stop = self.config.tmax if until_epoch is None else min(until_epoch, self.config.tmax)
        while self.epoch < stop:
            rec = self.run_epoch()
            logger.debug(
                "epoch %d lr=%.4g cls=%.4f cal=%.4f pdl=%.4f test_acc=%s",
                rec.epoch, rec.lr, rec.loss_cls, rec.loss_cal, rec.loss_pdl, rec.test_acc,
            )
        return self.history

    # -- checkpoints ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for (name, p), v in zip(self.model.named_parameters(), self.velocity):
            arrays[f"param/{name}"] = p.detach().numpy()
            arrays[f"velocity/{name}"] = v.detach().numpy()
        arrays["confidence"] = self.T
        arrays["prototypes/Q"] = self.bank.Q
        arrays["prototypes/initialized"] = self.bank.initialized.astype(np.uint8)
        arrays["prototypes/counts"] = self.bank.counts
        return arrays

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        save_checkpoint(
            path,
            self.state_arrays(),
            {
                "model_config": self.model_config.to_dict(),
                "train_config": self.config.to_dict(),
                "epoch": self.epoch,
                "rng": {"kind": "keyed-by-seed-epoch", "seed": self.config.seed, "next_epoch": self.epoch + 1},
                "history": self.history.to_list(),
                "first_batch_loss_cls": self.history.first_batch_loss_cls,
                "counters": dict(self.counters),
            },
        )
        self.history.to_csv(path / "history.csv")
        self.last_checkpoint = path
        return path

    @classmethod
    def from_checkpoint(cls, path, features, candidates, monitor=None, checkpoint_dir=None, config_overrides=None):
        ckpt = load_checkpoint(path)
        model_config = ModelConfig.from_dict(ckpt["model_config"])
        cfg_dict = dict(ckpt["train_config"])
        cfg_dict.update(config_overrides or {})
        trainer = cls(
            features,
            candidates,
            model_config,
            TrainConfig.from_dict(cfg_dict),
            monitor=monitor,
            checkpoint_dir=checkpoint_dir,
        )
        trainer.load_state(ckpt)
        trainer.last_checkpoint = Path(path)
        return trainer

    def load_state(self, ckpt) -> None:
        arrays = ckpt["arrays"]
        with torch.no_grad():
            for (name, p), v in zip(self.model.named_parameters(), self.velocity):
                p.copy_(torch.as_tensor(arrays[f"param/{name}"]))
                v.copy_(torch.as_tensor(arrays[f"velocity/{name}"]))
        self.T = arrays["confidence"].copy()
        self.bank.Q = arrays["prototypes/Q"].copy()
        self.bank.initialized = arrays["prototypes/initialized"].astype(bool)
        self.bank.counts = arrays["prototypes/counts"].copy()
        self.epoch = int(ckpt["epoch"])
        self.history = TrainHistory.from_list(ckpt["history"], ckpt.get("first_batch_loss_cls"))
        self.counters = Counter(ckpt.get("counters", {}))


def train(
    features,
    candidates,
    model_config: ModelConfig,
    config: TrainConfig,
    monitor=None,
    checkpoint_dir=None,
    batch_callback=None,
):
    """Run a full training job and return ``(model, history, trainer)``."""
    trainer = Trainer(features, candidates, model_config, config, monitor, checkpoint_dir, batch_callback)
    trainer.run()
    return trainer.model, trainer.history, trainer


# ---------------------------------------------------------------------------
# checkpoint directory format


def _blob_name(name: str) -> str:
    return name.replace("/", "__").replace(".", "_") + ".bin"


def save_checkpoint(path, arrays: dict[str, np.ndarray], info: dict) -> Path:
    """Write ``arrays`` as little-endian blobs plus a hashed ``manifest.json``.

    The directory is assembled under a temporary name and renamed into place,
    so a crash never leaves a half-written checkpoint at ``path``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        fname = _blob_name(name)
        (tmp / fname).write_bytes(blob)
        entries.append(
            {
                "name": name,
                "file": fname,
                "shape": list(arr.shape),
                "dtype": dtype.str,
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "arrays": entries,
        **info,
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError(f"no manifest.json in checkpoint {path}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"corrupt checkpoint manifest: {exc.msg}", offset=exc.pos) from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DatasetFormatError(f"{path} is not a checkpoint directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise DatasetFormatError(
            f"checkpoint version {manifest.get('version')!r} unsupported (expected {CHECKPOINT_VERSION})"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        fpath = path / entry["file"]
        if not fpath.exists():
            raise IntegrityError(f"checkpoint blob missing: {entry['file']}")
        blob = fpath.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"content hash mismatch for {entry['name']}")
        dtype = np.dtype(entry["dtype"])
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if len(blob) != expected:
            raise IntegrityError(f"blob {entry['name']} has {len(blob)} bytes, expected {expected}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(entry["shape"]).copy()
    manifest["arrays"] = arrays
    return manifest
