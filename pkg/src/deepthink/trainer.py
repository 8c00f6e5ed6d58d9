"""Adam with decoupled weight decay, the training loop, and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .act import ActConfig, act_loss, act_run
from .data import CorruptionSpec, ImageBatch, corrupt, rotate_and_label, split_train_val
from .errors import ContractError, DivergenceError, FormatError
from .ndtensor import Tape, softmax_cross_entropy
from .network import DeepThinkNet, NetConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DTCK"
CKPT_VERSION = 1
METRIC_FIELDS = ("epoch", "split", "loss_main", "loss_aux", "acc_main", "acc_aux")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s): {', '.join(missing)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    decay = 1.0 - state.lr * state.weight_decay
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decay != 1.0:
            p.data *= decay
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 2e-4
    batch_size: int = 32
    sigma_noise: float = 0.04
    train_fraction: float = 0.8
    target_train_acc: Optional[float] = None


@dataclass
class MetricRow:
    epoch: int
    split: str
    loss_main: float
    loss_aux: float
    acc_main: float
    acc_aux: float


@dataclass
class TrainResult:
    net: DeepThinkNet
    optimizer: AdamState
    metrics: list
    epochs_run: int
    rng: np.random.Generator
    halt_steps: list = field(default_factory=list)

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint.capture(self.net, self.optimizer, self.rng, self.epochs_run)


class _Meter:
    def __init__(self):
        self.n = 0
        self.sums = np.zeros(4)

    def add(self, n, loss_main, loss_aux, logits_main, logits_aux, y_main, y_aux):
        acc_m = (logits_main.data.argmax(1) == y_main).mean()
        acc_a = (logits_aux.data.argmax(1) == y_aux).mean()
        self.sums += n * np.array([loss_main, loss_aux, acc_m, acc_a])
        self.n += n

    def row(self, epoch: int, split: str) -> MetricRow:
        vals = self.sums / max(self.n, 1)
        return MetricRow(epoch, split, *(float(x) for x in vals))


def _forward(net: DeepThinkNet, X, y_main, y_aux, act: Optional[ActConfig]):
    if act is None:
        main, aux = net.forward_last(X)
        state = None
    else:
        state, out = act_run(net, X, act)
        main, aux = out.logits_main, out.logits_aux
    lm = softmax_cross_entropy(main, y_main)
    la = softmax_cross_entropy(aux, y_aux)
    loss = lm + la
    if act is not None:
        loss = act_loss(loss, state, act)
    return loss, lm, la, main, aux, state


def augment(batch: ImageBatch, sigma: float, seed: int) -> ImageBatch:
    noisy = corrupt(batch, CorruptionSpec(sigma=sigma), seed)
    return rotate_and_label(noisy, seed + 1)


def evaluate(net: DeepThinkNet, batch: ImageBatch, batch_size: int, act: Optional[ActConfig] = None, epoch: int = 0, split: str = "val"):
    """Eval-mode metrics at the last training iteration (or the ACT readout)."""
    net.eval()
    meter = _Meter()
    halts = []
    for b in batch.batches(batch_size):
        _, lm, la, main, aux, state = _forward(net, b.pixels, b.labels_main, b.labels_aux, act)
        meter.add(len(b), lm.item(), la.item(), main, aux, b.labels_main, b.labels_aux)
        if state is not None:
            halts.extend(state.halt_step.tolist())
    return meter.row(epoch, split), halts


def train(
    net: DeepThinkNet,
    data: ImageBatch,
    cfg: TrainConfig,
    seed: int = 0,
    act: Optional[ActConfig] = None,
    metrics_path=None,
) -> TrainResult:
    """Train on ``data`` (split into train/val) and log one train and one val row per epoch."""
    rng = np.random.default_rng(seed)
    train_set, val_set = split_train_val(data, cfg.train_fraction, seed)
    val_set = augment(val_set, cfg.sigma_noise, seed + 7919)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = dict(net.named_parameters())
    metrics: list[MetricRow] = []
    halts: list = []
    sink = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(sink) if sink else None
    if writer:
        writer.writerow(METRIC_FIELDS)
    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            meter = _Meter()
            perm = rng.permutation(len(train_set))
            for lo in range(0, len(perm), cfg.batch_size):
                b = train_set.subset(perm[lo : lo + cfg.batch_size])
                b = augment(b, cfg.sigma_noise, int(rng.integers(2**31 - 2)))
                net.zero_grad()
                with Tape() as tape:
                    loss, lm, la, main, aux, _ = _forward(net, b.pixels, b.labels_main, b.labels_aux, act)
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss {loss.item()} at epoch {epoch}")
                tape.backward(loss)
                for p in params.values():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                adam_step(params, opt)
                meter.add(len(b), lm.item(), la.item(), main, aux, b.labels_main, b.labels_aux)
            train_row = meter.row(epoch, "train")
            val_row, epoch_halts = evaluate(net, val_set, cfg.batch_size, act, epoch)
            halts = epoch_halts
            for row in (train_row, val_row):
                metrics.append(row)
                if writer:
                    writer.writerow(_format_row(row))
            log.info(
                "epoch %d train loss %.4f acc %.3f/%.3f val acc %.3f/%.3f",
                epoch, train_row.loss_main + train_row.loss_aux, train_row.acc_main,
                train_row.acc_aux, val_row.acc_main, val_row.acc_aux,
            )
            if cfg.target_train_acc is not None and train_row.acc_main >= cfg.target_train_acc:
                break
    finally:
        if sink:
            sink.close()
    net.eval()
    return TrainResult(net, opt, metrics, epoch, rng, halts)


def _format_row(row: MetricRow) -> list:
    return [row.epoch, row.split] + [repr(getattr(row, k)) for k in METRIC_FIELDS[2:]]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(_format_row(row))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: NetConfig
    tensors: dict  # name -> float32 array (parameters and buffers)
    optimizer: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)  # "m.<name>" / "v.<name>" -> array
    rng_state: Optional[dict] = None
    epoch: int = 0

    @classmethod
    def capture(cls, net: DeepThinkNet, opt: Optional[AdamState] = None, rng=None, epoch: int = 0) -> "Checkpoint":
        tensors = {n: t.data.astype(np.float32) for n, t in net.named_parameters()}
        tensors.update({n: t.data.astype(np.float32) for n, t in net.named_buffers()})
        moments = {}
        optimizer = {}
        if opt is not None:
            optimizer = opt.hyperparameters()
            for name in opt.m:
                moments[f"m.{name}"] = opt.m[name].astype(np.float32)
                moments[f"v.{name}"] = opt.v[name].astype(np.float32)
        rng_state = rng.bit_generator.state if rng is not None else None
        return cls(NetConfig(**net.config.to_dict()), tensors, optimizer, moments, rng_state, epoch)

    def build_net(self) -> DeepThinkNet:
        net = DeepThinkNet(NetConfig(**self.config.to_dict()), seed=0)
        named = dict(net.named_parameters())
        named.update(dict(net.named_buffers()))
        missing = set(named) - set(self.tensors)
        extra = set(self.tensors) - set(named)
        if missing or extra:
            raise FormatError(f"checkpoint tensors do not match network: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in named.items():
            arr = self.tensors[name]
            if arr.shape != t.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} vs network {t.shape}")
            t.data[...] = arr
        net.eval()
        return net

    def optimizer_state(self) -> AdamState:
        opt = AdamState(**self.optimizer) if self.optimizer else AdamState()
        for key, arr in self.moments.items():
            kind, name = key.split(".", 1)
            getattr(opt, kind)[name] = arr.astype(np.float64)
        return opt


def _pack_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: b"DTCK", u32 version, u32 len + JSON metadata, u32 count, then
    per tensor: u32 name length, name, u32 ndim, ndim x u32 dims, f32 data."""
    meta = {
        "config": ckpt.config.to_dict(),
        "optimizer": ckpt.optimizer,
        "rng_state": ckpt.rng_state,
        "epoch": ckpt.epoch,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    entries = [(f"param/{n}", a) for n, a in ckpt.tensors.items()]
    entries += [(f"adam/{n}", a) for n, a in ckpt.moments.items()]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _pack_array(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode())
        config = NetConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable metadata ({e})") from None
    tensors, moments = {}, {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        group, _, key = name.partition("/")
        if group == "param":
            tensors[key] = arr
        elif group == "adam":
            moments[key] = arr
        else:
            raise FormatError(f"{path}: unknown entry {name!r}")
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return Checkpoint(config, tensors, meta.get("optimizer", {}), moments, meta.get("rng_state"), meta.get("epoch", 0))
