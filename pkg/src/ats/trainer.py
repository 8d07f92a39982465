"""Joint training of adapter, encoder and temperature.

Per epoch: shuffle the training split with a stream derived from
``(seed, epoch)``, iterate full mini-batches, backpropagate the total loss
through both branches and take one AdamW step on every parameter. Validation
top-1 is measured after each epoch; the best parameters seen so far are kept
alongside the current ones so a run can be resumed from any checkpoint and
continue exactly as an uninterrupted run would.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adapter as ad
from . import encoder as enc
from .core_math import Rng, canonical_json, digest_of
from .evaluation import EvalReport, evaluate_retrieval
from .losses import DEFAULT_LOGIT_SCALE, clamp_logit_scale, temperature, total_loss
from .synthetic_data import TRAIN, VAL, BadMagicError, SyntheticDataset

log = logging.getLogger(__name__)

NO_DECAY = frozenset({"logit_scale", "encoder.alpha"})


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50
    early_stop_patience: int = 20
    lam: float = 0.0
    init_logit_scale: float = DEFAULT_LOGIT_SCALE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def architecture_digest(adapter_config: ad.AdapterConfig, encoder_config: enc.EncoderConfig) -> str:
    return digest_of({"adapter": adapter_config.to_dict(), "encoder": encoder_config.to_dict()})


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(
    params: dict,
    grads: dict,
    m: dict,
    v: dict,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    no_decay=NO_DECAY,
) -> tuple[dict, dict, dict]:
    """One AdamW update with bias correction and decoupled weight decay.

    ``step`` is the 1-based index of this update. Returns new
    ``(params, m, v)`` dicts; inputs are left untouched.
    """
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        mi = beta1 * m[name] + (1.0 - beta1) * g
        vi = beta2 * v[name] + (1.0 - beta2) * g * g
        decay = 0.0 if name in no_decay else weight_decay
        update = (mi / bc1) / (np.sqrt(vi / bc2) + eps)
        new_p[name] = p * (1.0 - lr * decay) - lr * update
        new_m[name] = mi
        new_v[name] = vi
    return new_p, new_m, new_v


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    adapter_config: ad.AdapterConfig
    encoder_config: enc.EncoderConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val: float = -1.0
    best_epoch: int = -1
    best: dict[str, np.ndarray] | None = None

    def adapter_params(self, best: bool = False) -> dict:
        return _group(self.best if best and self.best is not None else self.params, "adapter.")

    def encoder_params(self, best: bool = False) -> dict:
        return _group(self.best if best and self.best is not None else self.params, "encoder.")

    def logit_scale(self, best: bool = False) -> float:
        src = self.best if best and self.best is not None else self.params
        return float(src["logit_scale"][0])

    @property
    def arch_digest(self) -> str:
        return architecture_digest(self.adapter_config, self.encoder_config)

    def config_dict(self) -> dict:
        return {
            "adapter": self.adapter_config.to_dict(),
            "encoder": self.encoder_config.to_dict(),
            "train": self.train_config.to_dict(),
        }

    def stopped(self) -> bool:
        return self.best_epoch >= 0 and self.epoch - 1 - self.best_epoch >= self.train_config.early_stop_patience


def _group(flat: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def init_state(adapter_config, encoder_config, train_config) -> TrainState:
    if adapter_config.out_dim != encoder_config.out_dim:
        raise ValueError(
            f"adapter out_dim {adapter_config.out_dim} != encoder out_dim {encoder_config.out_dim}"
        )
    rng = Rng(train_config.seed)
    params = {}
    for k, p in ad.init_adapter(adapter_config, rng.child("adapter")).items():
        params[f"adapter.{k}"] = p
    for k, p in enc.init_encoder(encoder_config, rng.child("encoder")).items():
        params[f"encoder.{k}"] = p
    params["logit_scale"] = np.array([clamp_logit_scale(train_config.init_logit_scale)])
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return TrainState(
        adapter_config,
        encoder_config,
        train_config,
        params,
        zeros,
        {k: z.copy() for k, z in zeros.items()},
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    loss: float
    sce: float
    consistency: float
    grads: dict[str, np.ndarray] = field(repr=False)


def compute_gradients(state: TrainState, H, X, rng: Rng | None, train_mode: bool = True) -> StepResult:
    """Forward both branches on one batch and backpropagate the total loss."""
    Zv, a_cache = ad.adapter_forward(state.adapter_params(), state.adapter_config, H, rng, train_mode)
    Zb, e_cache = enc.encoder_forward(state.encoder_params(), state.encoder_config, X)
    for name, Z in (("adapter", Zv), ("encoder", Zb)):
        if not np.all(np.isfinite(Z)):
            raise TrainingDivergedError(f"{name} produced non-finite embeddings at step {state.step}")
    out = total_loss(Zv, Zb, state.logit_scale(), H, state.train_config.lam)
    a_grads, _ = ad.adapter_backward(a_cache, out.dZv)
    e_grads, _ = enc.encoder_backward(e_cache, out.dZb)
    grads = {f"adapter.{k}": g for k, g in a_grads.items()}
    grads.update({f"encoder.{k}": g for k, g in e_grads.items()})
    grads["logit_scale"] = np.array([out.ds])
    return StepResult(out.value, out.sce, out.consistency, grads)


def embed(state: TrainState, H, X, best: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings ``(Zv, Zb)``."""
    Zv, _ = ad.adapter_forward(state.adapter_params(best), state.adapter_config, H)
    Zb, _ = enc.encoder_forward(state.encoder_params(best), state.encoder_config, X)
    return Zv, Zb


def evaluate_split(state: TrainState, dataset: SyntheticDataset, split: str, best: bool = True) -> EvalReport:
    sub = dataset.subset(split)
    Zv, Zb = embed(state, sub.teacher_features, sub.student_signals, best)
    return evaluate_retrieval(Zb, Zv, sub.labels, sub.image_index)


def train(
    dataset: SyntheticDataset,
    adapter_config: ad.AdapterConfig,
    encoder_config: enc.EncoderConfig,
    train_config: TrainConfig,
    state: TrainState | None = None,
    stop_after: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run (or resume) training.

    ``stop_after`` caps the number of epochs run by this call, which is how
    interrupted runs are produced. Returns the final state and the history
    rows of the epochs run in this call.
    """
    if state is None:
        state = init_state(adapter_config, encoder_config, train_config)
    elif state.arch_digest != architecture_digest(adapter_config, encoder_config):
        raise CheckpointError("resume state does not match the supplied architecture")
    else:
        state = replace(state, train_config=train_config)
    history: list[dict] = []
    if state.epoch >= train_config.epochs or state.stopped():
        return state, history

    tr = dataset.indices(TRAIN)
    va = dataset.indices(VAL)
    if tr.size < 2 or va.size < 2:
        raise ValueError(f"need >= 2 train and val samples, got {tr.size} and {va.size}")
    H_all = dataset.teacher_features
    X_all = dataset.student_signals
    y_all = dataset.labels
    batch = min(train_config.batch_size, tr.size)
    root = Rng(train_config.seed)
    last = train_config.epochs if stop_after is None else min(train_config.epochs, state.epoch + stop_after)

    while state.epoch < last:
        epoch = state.epoch
        lr = train_config.lr_at(epoch)
        order = tr[root.child(f"shuffle:{epoch}").permutation(tr.size)]
        losses, sces, conss = [], [], []
        for b in range(tr.size // batch):
            idx = order[b * batch : (b + 1) * batch]
            if np.unique(y_all[idx]).size < 2:
                continue
            res = compute_gradients(state, H_all[idx], X_all[idx], root.child(f"dropout:{epoch}:{b}"))
            if not all(np.isfinite(x) for x in (res.loss, res.sce, res.consistency)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    f"total={res.loss} sce={res.sce} consistency={res.consistency}"
                )
            state.step += 1
            state.params, state.m, state.v = adamw_step(
                state.params,
                res.grads,
                state.m,
                state.v,
                state.step,
                lr,
                train_config.beta1,
                train_config.beta2,
                train_config.eps,
                train_config.weight_decay,
            )
            state.params["logit_scale"] = np.array([clamp_logit_scale(state.params["logit_scale"][0])])
            losses.append(res.loss)
            sces.append(res.sce)
            conss.append(res.consistency)

        val = evaluate_split(state, dataset, VAL, best=False)
        if val.top1 > state.best_val:
            state.best_val = val.top1
            state.best_epoch = epoch
            state.best = {k: p.copy() for k, p in state.params.items()}
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "sce": float(np.mean(sces)) if sces else float("nan"),
            "consistency": float(np.mean(conss)) if conss else float("nan"),
            "val_top1": val.top1,
            "tau": temperature(state.logit_scale()),
            "lr": lr,
        }
        history.append(row)
        log.debug("epoch %d loss %.4f val_top1 %.2f", epoch, row["loss"], row["val_top1"])
        state.epoch += 1
        if state.stopped():
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
            break
    return state, history


HISTORY_COLUMNS = ["epoch", "loss", "sce", "consistency", "val_top1", "tau", "lr"]


def history_csv(history: list[dict], digest: str | None = None) -> str:
    buf = io.StringIO()
    if digest:
        buf.write(f"# config_digest: {digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def read_history_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in rec.items()})
    return rows


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"ATSC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sH32sI")
_CKPT_TAIL = struct.Struct("<QIidI")


def _write_block(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<B", arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(state: TrainState) -> bytes:
    out = io.BytesIO()
    cfg = canonical_json(state.config_dict()).encode()
    out.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, bytes.fromhex(state.arch_digest), len(cfg)))
    out.write(cfg)
    blocks = []
    for prefix, src in (("param", state.params), ("m1", state.m), ("m2", state.v), ("best", state.best or {})):
        for name in sorted(src):
            blocks.append((f"{prefix}/{name}", src[name]))
    out.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        _write_block(out, name, arr)
    out.write(_CKPT_TAIL.pack(state.step, state.epoch, state.best_epoch, state.best_val, 0))
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(state))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint ends unexpectedly")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_checkpoint(buf: bytes) -> TrainState:
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"not a checkpoint: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(buf) < _CKPT_HEAD.size + 32:
        raise CorruptCheckpointError("checkpoint too short")
    _, version, _, _ = _CKPT_HEAD.unpack_from(buf)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    body, tag = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != tag:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    _, _, arch, cfg_len = r.unpack(_CKPT_HEAD.format)
    cfg = json.loads(r.take(cfg_len))
    a_cfg = ad.AdapterConfig(**cfg["adapter"])
    e_cfg = enc.EncoderConfig(**cfg["encoder"])
    t_cfg = TrainConfig.from_dict(cfg["train"])
    if architecture_digest(a_cfg, e_cfg) != arch.hex():
        raise CorruptCheckpointError("stored architecture digest does not match stored config")
    groups: dict[str, dict] = {"param": {}, "m1": {}, "m2": {}, "best": {}}
    (n_blocks,) = r.unpack("<I")
    for _ in range(n_blocks):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        prefix, key = name.split("/", 1)
        if prefix not in groups:
            raise CorruptCheckpointError(f"unknown block {name!r}")
        groups[prefix][key] = arr
    step, epoch, best_epoch, best_val, _ = r.unpack(_CKPT_TAIL.format)
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    return TrainState(
        a_cfg,
        e_cfg,
        t_cfg,
        groups["param"],
        groups["m1"],
        groups["m2"],
        step,
        epoch,
        best_val,
        best_epoch,
        groups["best"] or None,
    )


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())


def checkpoint_digest(state: TrainState) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()
