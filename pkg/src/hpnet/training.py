"""Optimization loop, checkpointing, reproducible experiment state.

Training is teacher-forced: each sequence is unrolled block by block,
the step-weighted loss is backpropagated through the whole unroll, and
Adam applies the update.  Batches larger than one accumulate gradients
over consecutive sequences (in draw order) before stepping, which
keeps results identical however the work is scheduled.

Everything that influences a run lives in explicit state: parameter
values, Adam moments, the shuffle RNG, and the epoch counter.  A
checkpoint serializes all four, so resuming reproduces the continuous
run bit for bit.
"""
from __future__ import annotations

import io
import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, TrainingAbort
from .network import HPNet, HPNetConfig, Scheme
from .tensor import Tensor, backward, no_grad

CHECKPOINT_MAGIC = b"HPNC"
CHECKPOINT_VERSION = 1


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """One Adam update from the gradients sitting on ``params``.

    Gradients are first clipped to a global norm of ``clip_norm``,
    then moments update and parameters move with bias correction.
    Gradients are zeroed afterward.  A parameter that received no
    gradient this step contributes zero (its moments still decay).
    """
    grads: dict[str, np.ndarray] = {}
    sq = 0.0
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in {name}")
        grads[name] = g
        sq += float(np.sum(g * g))
    norm = sq**0.5
    if state.clip_norm > 0 and norm > state.clip_norm:
        s = state.clip_norm / norm
        for g in grads.values():
            g *= s

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()
    return state


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError(
                f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}"
            )


@dataclass
class TrainState:
    opt: AdamState
    rng: np.random.Generator
    epoch: int = 0  # completed epochs


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


def _as_blocks(sequences, cfg: HPNetConfig) -> list[list[np.ndarray]]:
    from .network import frames_to_blocks

    out = []
    for s in sequences:
        frames = s.frames if hasattr(s, "frames") else np.asarray(s)
        out.append(frames_to_blocks(frames, cfg.block_depth, cfg.block_stride))
    return out


def worker_count() -> int:
    """Worker cap from HPNET_THREADS; 0 or unset means sequential."""
    try:
        return max(0, int(os.environ.get("HPNET_THREADS", "0")))
    except ValueError:
        return 0


_WORKER_NET: HPNet | None = None


def _pool_init(net):
    global _WORKER_NET
    _WORKER_NET = net


def _pool_loss(blocks):
    with no_grad():
        return _WORKER_NET.forward_sequence(blocks).loss.item()


def mean_sequence_loss(net: HPNet, block_lists: list[list[np.ndarray]]) -> float:
    """Teacher-forced mean loss, reduced in index order.

    With HPNET_THREADS > 1 the per-sequence losses are computed by a
    worker pool; the reduction order (and so the result) is unchanged.
    """
    if not block_lists:
        raise ContractError("mean_sequence_loss: no sequences")
    workers = worker_count()
    if workers > 1 and len(block_lists) > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(workers, len(block_lists)), _pool_init, (net,)) as pool:
            losses = pool.map(_pool_loss, block_lists)
    else:
        losses = [_pool_loss_local(net, b) for b in block_lists]
    return float(np.mean(losses))


def _pool_loss_local(net, blocks):
    with no_grad():
        return net.forward_sequence(blocks).loss.item()


def train(
    net: HPNet,
    sequences,
    cfg: TrainConfig,
    val_sequences=None,
    state: TrainState | None = None,
) -> tuple[list[TrainRecord], TrainState]:
    """Run (or continue) training; returns records for the epochs run.

    A fresh run starts with an epoch-0 record holding pre-update
    losses, then one record per epoch.  When ``val_sequences`` is
    omitted the validation column repeats the training loss.  Pass the
    ``state`` from a loaded checkpoint to continue a run; epochs
    already completed are skipped.
    """
    if len(sequences) == 0:
        raise ContractError("train: empty dataset")
    if state is None:
        state = TrainState(
            opt=AdamState(
                lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.eps, clip_norm=cfg.clip_norm,
            ),
            rng=np.random.Generator(np.random.PCG64(cfg.seed)),
            epoch=0,
        )
    params = net.named_params()
    blocks = _as_blocks(sequences, net.config)
    val_blocks = _as_blocks(val_sequences, net.config) if val_sequences else None

    records: list[TrainRecord] = []
    if state.epoch == 0:
        t0 = time.perf_counter()
        base = mean_sequence_loss(net, blocks)
        base_val = mean_sequence_loss(net, val_blocks) if val_blocks else base
        records.append(TrainRecord(0, base, base_val, time.perf_counter() - t0))

    n = len(blocks)
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = state.rng.permutation(n)
        losses = []
        pending = 0
        for j, idx in enumerate(order):
            out = net.forward_sequence(blocks[idx])
            value = out.loss.item()
            if not np.isfinite(value) or value > cfg.divergence_limit:
                raise TrainingAbort(
                    f"diverged at epoch {epoch}, sequence {int(idx)}: loss {value:.6g}"
                )
            losses.append(value)
            backward(out.loss)
            pending += 1
            if pending == cfg.batch_size or j == n - 1:
                if pending > 1:  # average accumulated gradients
                    for p in params.values():
                        if p.grad is not None:
                            p.grad /= pending
                adam_step(params, state.opt)
                pending = 0
        train_loss = float(np.mean(losses))
        val_loss = mean_sequence_loss(net, val_blocks) if val_blocks else train_loss
        state.epoch = epoch
        records.append(TrainRecord(epoch, train_loss, val_loss, time.perf_counter() - t0))
    return records, state


# ------------------------------------------------------------- checkpointing
#
# magic "HPNC" | u32 version | u32 json_len | config JSON | u32 n_params
# | tensor records | u8 has_opt | [f64 lr,b1,b2,eps,clip | u64 t
# | u32 epoch | u32 n_m | records | u32 n_v | records] | u32 json_len
# | RNG state JSON.  Tensor record: u16 name_len | name | u32 rank
# | u32 dims... | f64 data.  Little-endian throughout.


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    """Cursor over checkpoint bytes; failures report the byte offset."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint at byte {len(self.buf)}, wanted {self.off + n}")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode()
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(dims).copy()
        return name, data


def _config_dict(cfg: HPNetConfig) -> dict:
    return {
        "levels": cfg.levels,
        "channels": list(cfg.channels),
        "block_depth": cfg.block_depth,
        "block_stride": cfg.block_stride,
        "scheme": cfg.scheme.value,
        "in_channels": cfg.in_channels,
        "p_max": cfg.p_max,
        "level_loss_weights": list(cfg.level_loss_weights),
        "step_loss_weights": list(cfg.step_loss_weights) if cfg.step_loss_weights else None,
        "seed": cfg.seed,
    }


def save_checkpoint(path, net: HPNet, state: TrainState) -> None:
    fh = io.BytesIO()
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    cj = json.dumps(_config_dict(net.config)).encode()
    fh.write(struct.pack("<I", len(cj)))
    fh.write(cj)
    params = net.named_params()
    fh.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_tensor(fh, name, p.data)
    opt = state.opt
    fh.write(struct.pack("<B", 1))
    fh.write(struct.pack("<5d", opt.lr, opt.beta1, opt.beta2, opt.eps, opt.clip_norm))
    fh.write(struct.pack("<QI", opt.t, state.epoch))
    for moments in (opt.m, opt.v):
        fh.write(struct.pack("<I", len(moments)))
        for name, arr in moments.items():
            _write_tensor(fh, name, arr)
    rj = json.dumps(state.rng.bit_generator.state).encode()
    fh.write(struct.pack("<I", len(rj)))
    fh.write(rj)
    with open(path, "wb") as out:
        out.write(fh.getvalue())


def load_checkpoint(path) -> tuple[HPNet, TrainState]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic at byte 0, expected {CHECKPOINT_MAGIC!r}")
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (clen,) = rd.unpack("<I")
    raw = json.loads(rd.take(clen).decode())
    cfg = HPNetConfig(
        levels=raw["levels"], channels=tuple(raw["channels"]),
        block_depth=raw["block_depth"], block_stride=raw["block_stride"],
        scheme=Scheme(raw["scheme"]), in_channels=raw["in_channels"],
        p_max=raw["p_max"], level_loss_weights=tuple(raw["level_loss_weights"]),
        step_loss_weights=tuple(raw["step_loss_weights"]) if raw.get("step_loss_weights") else None,
        seed=raw["seed"],
    )
    net = HPNet(cfg)
    params = net.named_params()
    (n_params,) = rd.unpack("<I")
    if n_params != len(params):
        raise FormatError(f"checkpoint has {n_params} tensors, model needs {len(params)}")
    for _ in range(n_params):
        name, data = rd.tensor()
        if name not in params:
            raise FormatError(f"unknown parameter {name!r} in checkpoint")
        if params[name].data.shape != data.shape:
            raise FormatError(
                f"parameter {name!r} shape {data.shape} does not match model "
                f"{params[name].data.shape}"
            )
        params[name].data = data
    (has_opt,) = rd.unpack("<B")
    opt = AdamState()
    epoch = 0
    if has_opt:
        opt.lr, opt.beta1, opt.beta2, opt.eps, opt.clip_norm = rd.unpack("<5d")
        opt.t, epoch = rd.unpack("<QI")
        for moments in (opt.m, opt.v):
            (cnt,) = rd.unpack("<I")
            for _ in range(cnt):
                name, data = rd.tensor()
                moments[name] = data
    (rlen,) = rd.unpack("<I")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(rd.take(rlen).decode())
    return net, TrainState(opt=opt, rng=rng, epoch=epoch)
