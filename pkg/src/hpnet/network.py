"""Stacked cortical modules for hierarchical sequence prediction.

The network processes a video as a sequence of spatiotemporal blocks
[channels, depth, height, width].  Each level ("cortical module")
keeps five pieces of recurrent state: an accumulated feedforward
representation R, convolutional-LSTM hidden/cell tensors H and C, an
error map E, and the previous input block.

One step at level l:

  1. feedforward update: R += sparse_conv(I - I_prev); only sites
     where the input changed cost anything, and by linearity R always
     equals the sparse conv of the current block alone.
  2. the LSTM consumes [bottom-up drive, own E from the previous
     step, upsampled H of the level above from the previous step].
     The drive is the raw input block at level 1, and the pooled,
     rectified concatenation of the level below's fresh R and E
     otherwise.
  3. prediction P = ReLU(conv(H)), additionally saturated at p_max on
     level 1 where it must be a pixel block.
  4. error update: E = sparse_conv(I - P); the level's loss term is
     the per-element mean of (I - P)^2.

A network step sweeps levels bottom-up, so lower-level R and E are
fresh within the step while top-down H arrives delayed by one step.
The sequence loss weights step k by 0 for the first block (nothing
observable predicts it) and 1/(K-1) otherwise, and level l by
``level_loss_weights`` (default 1.0 at level 1, 0.1 above).

Closed-loop prediction feeds the level-1 prediction back as the next
input block; the block-to-frame scheme instead slides the input
window forward by ``block_stride`` frames, filling the tail with the
freshest predicted frames.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conv import ConvKernel3D, conv3d, maxpool_spatial, sparse_conv3d, upsample_spatial
from .errors import ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    concat0,
    hadamard,
    no_grad,
    relu,
    satlu,
    scale,
    sigmoid,
    slice0,
    sub,
    tanh,
    tmean,
)


class Scheme(enum.Enum):
    FRAME_TO_FRAME = "ff"
    BLOCK_TO_FRAME = "bf"
    BLOCK_TO_BLOCK = "bb"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        table = {
            "ff": cls.FRAME_TO_FRAME,
            "frame-to-frame": cls.FRAME_TO_FRAME,
            "bf": cls.BLOCK_TO_FRAME,
            "block-to-frame": cls.BLOCK_TO_FRAME,
            "bb": cls.BLOCK_TO_BLOCK,
            "block-to-block": cls.BLOCK_TO_BLOCK,
        }
        key = name.strip().lower()
        if key not in table:
            raise ContractError(f"unknown scheme {name!r}; expected one of ff, bf, bb")
        return table[key]


@dataclass
class HPNetConfig:
    """Architecture hyperparameters.

    ``block_stride`` defaults per scheme: equal to ``block_depth`` for
    block-to-block (required), 1 for the sliding block-to-frame
    window.  The frame-to-frame scheme forces single-frame blocks and
    flat temporal kernels.
    """

    levels: int
    channels: tuple[int, ...]
    block_depth: int = 5
    block_stride: int | None = None
    scheme: Scheme = Scheme.BLOCK_TO_BLOCK
    in_channels: int = 1
    p_max: float = 1.0
    level_loss_weights: tuple[float, ...] | None = None
    step_loss_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = Scheme.parse(self.scheme)
        self.channels = tuple(int(c) for c in self.channels)
        if self.levels < 1:
            raise ContractError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ContractError(
                f"channels {self.channels} must list exactly levels={self.levels} entries"
            )
        if any(c < 1 for c in self.channels) or self.in_channels < 1:
            raise ContractError(f"channel counts must be positive, got {self.channels}")
        if self.scheme is Scheme.FRAME_TO_FRAME:
            self.block_depth = 1
            self.block_stride = 1
        if self.block_depth < 1:
            raise ContractError(f"block_depth must be >= 1, got {self.block_depth}")
        if self.block_stride is None:
            self.block_stride = self.block_depth if self.scheme is Scheme.BLOCK_TO_BLOCK else 1
        if self.scheme is Scheme.BLOCK_TO_BLOCK and self.block_stride != self.block_depth:
            raise ContractError(
                f"block-to-block requires block_stride == block_depth, "
                f"got {self.block_stride} != {self.block_depth}"
            )
        if not 1 <= self.block_stride <= self.block_depth:
            raise ContractError(
                f"block_stride {self.block_stride} outside 1..{self.block_depth}"
            )
        if self.p_max <= 0:
            raise ContractError(f"p_max must be positive, got {self.p_max}")
        if self.level_loss_weights is None:
            self.level_loss_weights = (1.0,) + (0.1,) * (self.levels - 1)
        else:
            self.level_loss_weights = tuple(float(w) for w in self.level_loss_weights)
            if len(self.level_loss_weights) != self.levels:
                raise ContractError(
                    f"level_loss_weights needs {self.levels} entries, "
                    f"got {len(self.level_loss_weights)}"
                )

    @property
    def kernel_shape(self) -> tuple[int, int, int]:
        # single-frame blocks carry no temporal extent worth convolving
        return (1, 3, 3) if self.scheme is Scheme.FRAME_TO_FRAME else (3, 3, 3)

    def feed_channels(self, li: int) -> int:
        """Channel count of the input block I at 0-based level ``li``."""
        return self.in_channels if li == 0 else self.channels[li - 1]

    def step_weights(self, n_blocks: int) -> tuple[float, ...]:
        """Per-step loss weights: the first block is unpredictable from
        observations, so it carries weight 0; the rest share 1/(K-1)."""
        if self.step_loss_weights is not None:
            if len(self.step_loss_weights) != n_blocks:
                raise ContractError(
                    f"step_loss_weights has {len(self.step_loss_weights)} entries "
                    f"for a {n_blocks}-block sequence"
                )
            return tuple(float(w) for w in self.step_loss_weights)
        if n_blocks == 1:
            return (0.0,)
        return (0.0,) + (1.0 / (n_blocks - 1),) * (n_blocks - 1)


@dataclass
class Conv3DLSTMParams:
    """Gate kernels over the concatenated [inputs, hidden] channels.

    The i/f/g/o kernels live stacked along the output-channel axis of
    one fused convolution, in that order.  Keeping them fused (rather
    than concatenating four parameters every step) matters: the gate
    convolution is the hottest operation in the model, and a fused
    parameter takes its weight gradient in a single accumulation.
    """

    ifgo: ConvKernel3D

    def __post_init__(self):
        if self.ifgo.c_out % 4:
            raise DimensionError(
                f"fused gate kernel needs c_out divisible by 4, got {self.ifgo.c_out}"
            )

    @property
    def hidden_channels(self) -> int:
        return self.ifgo.c_out // 4


@dataclass
class LevelParams:
    r_kernel: ConvKernel3D  # bias-free: R accumulation relies on linearity
    e_kernel: ConvKernel3D  # bias-free, same reason
    p_kernel: ConvKernel3D
    lstm: Conv3DLSTMParams


@dataclass
class CorticalModuleState:
    r: Tensor
    h: Tensor
    c: Tensor
    e: Tensor
    i_prev: Tensor


@dataclass
class StepResult:
    p1: Tensor
    loss: Tensor
    level_losses: list[float]
    captured: list[dict] | None = None


@dataclass
class SequenceResult:
    loss: Tensor  # step-weighted total, differentiable
    step_losses: list[float]  # unweighted per-step values
    predictions: list[np.ndarray]  # level-1 prediction per step
    states: list[CorticalModuleState]
    captured: list[list[dict]] | None = None


def lstm3d_step(
    z: Tensor | list, h_prev: Tensor, c_prev: Tensor, params: Conv3DLSTMParams
) -> tuple[Tensor, Tensor]:
    """Standard convolutional LSTM update with 3D gate kernels.

    ``z`` may be a list of channel-wise parts; they are concatenated
    together with ``h_prev`` in a single buffer build.
    """
    if h_prev.shape != c_prev.shape:
        raise DimensionError(f"lstm3d_step: h {h_prev.shape} vs c {c_prev.shape}")
    n = params.hidden_channels
    parts = z if isinstance(z, list) else [z]
    gates = conv3d(concat0([*parts, h_prev]), params.ifgo)
    i = sigmoid(slice0(gates, 0, n))
    f = sigmoid(slice0(gates, n, 2 * n))
    g = tanh(slice0(gates, 2 * n, 3 * n))
    o = sigmoid(slice0(gates, 3 * n, 4 * n))
    c = add(hadamard(f, c_prev), hadamard(i, g))
    h = hadamard(o, tanh(c))
    return h, c


class HPNet:
    """Parameters plus the step/sequence/rollout machinery."""

    def __init__(self, config: HPNetConfig, levels: list[LevelParams] | None = None):
        self.config = config
        self.levels = levels if levels is not None else _init_levels(config)

    # ---------------------------------------------------------------- params

    def named_params(self) -> dict[str, Tensor]:
        """Stable name -> tensor map (checkpointing, optimizer state)."""
        out: dict[str, Tensor] = {}
        for li, lp in enumerate(self.levels, start=1):
            out[f"level{li}.r.weights"] = lp.r_kernel.weights
            out[f"level{li}.e.weights"] = lp.e_kernel.weights
            out[f"level{li}.p.weights"] = lp.p_kernel.weights
            out[f"level{li}.p.bias"] = lp.p_kernel.bias
            out[f"level{li}.lstm.ifgo.weights"] = lp.lstm.ifgo.weights
            out[f"level{li}.lstm.ifgo.bias"] = lp.lstm.ifgo.bias
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    def zero_grads(self) -> None:
        for t in self.named_params().values():
            t.zero_grad()

    # ---------------------------------------------------------------- states

    def init_states(self, frame_hw: tuple[int, int]) -> list[CorticalModuleState]:
        """Zero states for a given frame size.

        All-zero initialization makes the very first block its own
        temporal difference, so the sparse feedforward path handles
        first blocks and subsequent deltas with the same kernels.
        """
        h, w = frame_hw
        cfg = self.config
        if h % (1 << (cfg.levels - 1)) or w % (1 << (cfg.levels - 1)):
            raise DimensionError(
                f"frame size {frame_hw} not divisible by 2^(levels-1) = {1 << (cfg.levels - 1)}"
            )
        states = []
        d = cfg.block_depth
        for li in range(cfg.levels):
            lh, lw = h >> li, w >> li
            c = cfg.channels[li]
            states.append(
                CorticalModuleState(
                    r=Tensor(np.zeros((c, d, lh, lw))),
                    h=Tensor(np.zeros((c, d, lh, lw))),
                    c=Tensor(np.zeros((c, d, lh, lw))),
                    e=Tensor(np.zeros((c, d, lh, lw))),
                    i_prev=Tensor(np.zeros((cfg.feed_channels(li), d, lh, lw))),
                )
            )
        return states

    # ----------------------------------------------------------------- steps

    def module_step(
        self,
        li: int,
        i_k: Tensor,
        e_below: Tensor | None,
        h_above_prev: Tensor | None,
        state: CorticalModuleState,
    ) -> tuple[CorticalModuleState, Tensor, Tensor]:
        """One update of level ``li`` (0-based). Returns (state', P, loss term)."""
        lp = self.levels[li]
        if i_k.shape != state.i_prev.shape:
            raise DimensionError(
                f"module_step level {li + 1}: input {i_k.shape} vs state {state.i_prev.shape}"
            )

        r_new = add(state.r, sparse_conv3d(sub(i_k, state.i_prev), lp.r_kernel))

        if li == 0:
            parts = [i_k, state.e]
        else:
            parts = [i_k, maxpool_spatial(relu(e_below)), state.e]
        if h_above_prev is not None:
            parts.append(upsample_spatial(h_above_prev))
        h_new, c_new = lstm3d_step(parts, state.h, state.c, lp.lstm)

        p = relu(conv3d(h_new, lp.p_kernel))
        if li == 0:
            p = satlu(p, self.config.p_max)

        diff = sub(i_k, p)
        e_new = sparse_conv3d(diff, lp.e_kernel)
        loss_term = tmean(hadamard(diff, diff))

        new_state = CorticalModuleState(r=r_new, h=h_new, c=c_new, e=e_new, i_prev=i_k)
        return new_state, p, loss_term

    def network_step(
        self, x_k, states: list[CorticalModuleState], capture: bool = False
    ) -> tuple[list[CorticalModuleState], StepResult]:
        """Bottom-up sweep over all levels for one input block."""
        cfg = self.config
        x_k = x_k if isinstance(x_k, Tensor) else Tensor(x_k)
        want = states[0].i_prev.shape
        if x_k.shape != want:
            raise DimensionError(f"network_step: block shape {x_k.shape}, expected {want}")

        new_states: list[CorticalModuleState] = []
        level_losses: list[float] = []
        captured = [] if capture else None
        p1 = None
        loss = None
        i_l: Tensor = x_k
        e_below: Tensor | None = None
        for li in range(cfg.levels):
            if li > 0:
                i_l = maxpool_spatial(relu(new_states[li - 1].r))
            h_above_prev = states[li + 1].h if li + 1 < cfg.levels else None
            st, p, term = self.module_step(li, i_l, e_below, h_above_prev, states[li])
            new_states.append(st)
            e_below = st.e
            if li == 0:
                p1 = p
            level_losses.append(term.item())
            weighted = scale(term, cfg.level_loss_weights[li])
            loss = weighted if loss is None else add(loss, weighted)
            if capture:
                captured.append(
                    {"p": p.data.copy(), "e": st.e.data.copy(), "r": st.r.data.copy(),
                     "h": st.h.data.copy(), "i": i_l.data.copy()}
                )
        return new_states, StepResult(p1=p1, loss=loss, level_losses=level_losses, captured=captured)

    def forward_sequence(
        self,
        blocks: Sequence,
        states: list[CorticalModuleState] | None = None,
        capture: bool = False,
    ) -> SequenceResult:
        """Teacher-forced pass over a block sequence."""
        if len(blocks) == 0:
            raise ContractError("forward_sequence: empty block sequence")
        first = np.asarray(blocks[0].data if isinstance(blocks[0], Tensor) else blocks[0])
        if states is None:
            states = self.init_states(first.shape[-2:])
        weights = self.config.step_weights(len(blocks))

        total = None
        step_losses: list[float] = []
        predictions: list[np.ndarray] = []
        captured = [] if capture else None
        for k, block in enumerate(blocks):
            states, res = self.network_step(block, states, capture=capture)
            step_losses.append(res.loss.item())
            predictions.append(res.p1.data.copy())
            if capture:
                captured.append(res.captured)
            if weights[k] != 0.0:
                w = scale(res.loss, weights[k])
                total = w if total is None else add(total, w)
        if total is None:
            # single-block sequence: weight 0 by construction
            total = scale(res.loss, 0.0)
        return SequenceResult(
            loss=total, step_losses=step_losses, predictions=predictions,
            states=states, captured=captured,
        )

    # --------------------------------------------------------------- rollout

    def rollout(self, seed_blocks: Sequence, n_future_blocks: int) -> list[np.ndarray]:
        """Teacher-force the seeds, then feed predictions back as input.

        Under block-to-frame the input window slides ``block_stride``
        frames per step, so each iteration keeps the still-valid tail
        of the previous block and appends the newest predicted frames.
        Returns one array per future step; values lie in [0, p_max].
        """
        if n_future_blocks < 1:
            raise ContractError(f"n_future_blocks must be >= 1, got {n_future_blocks}")
        if len(seed_blocks) == 0:
            raise ContractError("rollout: need at least one seed block")
        cfg = self.config
        out: list[np.ndarray] = []
        with no_grad():
            states = self.init_states(np.asarray(seed_blocks[0]).shape[-2:])
            cur = None
            for block in seed_blocks:
                cur = np.asarray(block, dtype=np.float64)
                states, res = self.network_step(cur, states)
            for _ in range(n_future_blocks):
                p = np.clip(res.p1.data, 0.0, cfg.p_max)
                if cfg.scheme is Scheme.BLOCK_TO_FRAME:
                    s = cfg.block_stride
                    nxt = np.concatenate([cur[:, s:], p[:, cfg.block_depth - s :]], axis=1)
                else:
                    nxt = p
                out.append(nxt.copy())
                cur = nxt
                states, res = self.network_step(cur, states)
        return out


def frames_to_blocks(frames: np.ndarray, depth: int, stride: int) -> list[np.ndarray]:
    """Split [n, h, w] frames into [1, depth, h, w] blocks at ``stride``.

    Trailing frames that do not fill a block are dropped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError(f"frames_to_blocks: expected [n,h,w], got {frames.shape}")
    n = frames.shape[0]
    if not 1 <= stride <= depth:
        raise ContractError(f"stride {stride} outside 1..depth ({depth})")
    if n < depth:
        raise ContractError(f"sequence of {n} frames shorter than block depth {depth}")
    return [frames[None, t : t + depth] for t in range(0, n - depth + 1, stride)]


def rollout_frames(net: HPNet, seed_frames: np.ndarray, n_future_frames: int) -> np.ndarray:
    """Dead-reckon ``n_future_frames`` frames after the seed frames.

    Frames after the seeds are produced entirely closed-loop: each
    step contributes its newly predicted frames (the whole block for
    block-to-block, ``block_stride`` frames for block-to-frame, one
    frame for frame-to-frame).
    """
    cfg = net.config
    fresh = cfg.block_stride  # new frames emitted per closed-loop step
    seed_blocks = frames_to_blocks(seed_frames, cfg.block_depth, cfg.block_stride)
    n_steps = -(-n_future_frames // fresh)
    blocks = net.rollout(seed_blocks, n_steps)
    chunks = [b[0, cfg.block_depth - fresh :] for b in blocks]
    return np.concatenate(chunks, axis=0)[:n_future_frames]


def _init_levels(cfg: HPNetConfig) -> list[LevelParams]:
    """Parameter construction; the draw order below is part of the
    determinism contract for seeded runs."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    ks = cfg.kernel_shape

    def kernel(c_out: int, c_in: int, bias: bool) -> ConvKernel3D:
        bound = (1.0 / (c_in * ks[0] * ks[1] * ks[2])) ** 0.5
        w = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, *ks)), requires_grad=True)
        b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        return ConvKernel3D(w, b)

    levels = []
    for li in range(cfg.levels):
        c = cfg.channels[li]
        in_ch = cfg.feed_channels(li)
        drive_ch = in_ch if li == 0 else in_ch + cfg.channels[li - 1]
        z_ch = drive_ch + c + (cfg.channels[li + 1] if li + 1 < cfg.levels else 0)
        gate_in = z_ch + c
        r_kernel = kernel(c, in_ch, bias=False)
        e_kernel = kernel(c, in_ch, bias=False)
        p_kernel = kernel(in_ch, c, bias=True)
        # gates drawn i, f, g, o then stacked into the fused kernel
        gates = [kernel(c, gate_in, bias=True) for _ in range(4)]
        gates[1].bias.data[:] = 1.0  # forget bias keeps early gradients flowing
        ifgo = ConvKernel3D(
            Tensor(np.concatenate([g.weights.data for g in gates]), requires_grad=True),
            Tensor(np.concatenate([g.bias.data for g in gates]), requires_grad=True),
        )
        levels.append(
            LevelParams(
                r_kernel=r_kernel,
                e_kernel=e_kernel,
                p_kernel=p_kernel,
                lstm=Conv3DLSTMParams(ifgo=ifgo),
            )
        )
    return levels
