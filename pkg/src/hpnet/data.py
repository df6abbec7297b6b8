"""Synthetic bouncing-shape video and the on-disk dataset format.

Sequences are grayscale frames in [0,1] built from procedural shapes
(squares, crosses, disks) moving on integer pixel grids.  Positions,
velocities, and reflections are all integer arithmetic, so a seed
reproduces a sequence bit-for-bit on any platform.

Each sequence carries one of six global motion labels, giving the
representation probes a balanced classification target:

  horizontal/vertical/diagonal bounce, circular orbit (a fixed
  12-point integer circle, scaled), expanding/contracting size
  oscillation, and static jitter (a small bounded random walk).
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .network import frames_to_blocks

extract_blocks = frames_to_blocks


class MovementClass(enum.IntEnum):
    HORIZONTAL_BOUNCE = 0
    VERTICAL_BOUNCE = 1
    DIAGONAL_BOUNCE = 2
    CIRCULAR = 3
    EXPANDING = 4
    STATIC_JITTER = 5


SHAPE_KINDS = ("square", "cross", "disk")

# radius-2 integer circle, 12 phases; scaling by an integer factor
# yields larger orbits without any float in the position path
_CIRCLE_12 = (
    (2, 0), (2, 1), (1, 2), (0, 2), (-1, 2), (-2, 1),
    (-2, 0), (-2, -1), (-1, -2), (0, -2), (1, -2), (2, -1),
)


@dataclass
class SequenceSpec:
    frame_hw: tuple[int, int] = (32, 32)
    n_frames: int = 40
    n_objects: int = 2
    shapes: tuple[str, ...] = SHAPE_KINDS
    velocity_range: tuple[int, int] = (1, 2)
    size_range: tuple[int, int] = (6, 10)
    seed: int = 0

    def __post_init__(self):
        h, w = self.frame_hw
        if self.n_frames < 1 or self.n_objects < 0:
            raise ContractError(
                f"need n_frames >= 1 and n_objects >= 0, got {self.n_frames}, {self.n_objects}"
            )
        if self.velocity_range[0] < 1 or self.velocity_range[1] < self.velocity_range[0]:
            raise ContractError(f"velocity range {self.velocity_range} must satisfy 1 <= lo <= hi")
        if self.size_range[0] < 1 or self.size_range[1] < self.size_range[0]:
            raise ContractError(f"size range {self.size_range} must satisfy 1 <= lo <= hi")
        # expanding sequences grow objects a little past the nominal size
        if self.size_range[1] + 2 > min(h, w):
            raise ContractError(
                f"objects of size up to {self.size_range[1]}+2 do not fit a {h}x{w} frame"
            )
        unknown = set(self.shapes) - set(SHAPE_KINDS)
        if unknown:
            raise ContractError(f"unknown shape kinds {sorted(unknown)}")


@dataclass
class Sequence:
    frames: np.ndarray  # [n, h, w] float64 in [0, 1]
    label: int


def shape_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size))
    if kind == "cross":
        m = np.zeros((size, size))
        t = max(1, size // 3)
        lo = (size - t) // 2
        m[lo : lo + t, :] = 1.0
        m[:, lo : lo + t] = 1.0
        return m
    if kind == "disk":
        c = size // 2
        yy, xx = np.mgrid[0:size, 0:size]
        return ((yy - c) ** 2 + (xx - c) ** 2 <= c * c).astype(np.float64)
    raise ContractError(f"unknown shape kind {kind!r}")


def _reflect(p: int, v: int, lim: int) -> tuple[int, int]:
    """Advance p by v inside [0, lim] with elastic reflection."""
    if lim == 0:
        return 0, -v
    p += v
    while p < 0 or p > lim:
        if p < 0:
            p, v = -p, -v
        else:
            p, v = 2 * lim - p, -v
    return p, v


def bounce_track(
    start: tuple[int, int], velocity: tuple[int, int], n_frames: int,
    frame_hw: tuple[int, int], size: int,
) -> list[tuple[int, int, int]]:
    """(row, col, size) per frame for a linearly bouncing object."""
    h, w = frame_hw
    if size > h or size > w:
        raise ContractError(f"object size {size} exceeds frame {frame_hw}")
    r, c = start
    vr, vc = velocity
    if not (0 <= r <= h - size and 0 <= c <= w - size):
        raise ContractError(f"start {start} puts a size-{size} object outside {frame_hw}")
    track = []
    for _ in range(n_frames):
        track.append((r, c, size))
        r, vr = _reflect(r, vr, h - size)
        c, vc = _reflect(c, vc, w - size)
    return track


def render_track(kind: str, track, frame_hw: tuple[int, int]) -> np.ndarray:
    """Stamp one object's track into [n,h,w] frames (no clipping)."""
    h, w = frame_hw
    frames = np.zeros((len(track), h, w))
    for t, (r, c, size) in enumerate(track):
        frames[t, r : r + size, c : c + size] += shape_mask(kind, size)
    return frames


def _object_track(movement, rng, spec: SequenceSpec) -> tuple[str, list]:
    h, w = spec.frame_hw
    kind = spec.shapes[rng.integers(len(spec.shapes))]
    size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
    lo, hi = spec.velocity_range

    def speed():
        s = int(rng.integers(lo, hi + 1))
        return s if rng.integers(2) else -s

    def place(sz=None):
        sz = size if sz is None else sz
        return (int(rng.integers(0, h - sz + 1)), int(rng.integers(0, w - sz + 1)))

    if movement == MovementClass.HORIZONTAL_BOUNCE:
        return kind, bounce_track(place(), (0, speed()), spec.n_frames, spec.frame_hw, size)
    if movement == MovementClass.VERTICAL_BOUNCE:
        return kind, bounce_track(place(), (speed(), 0), spec.n_frames, spec.frame_hw, size)
    if movement == MovementClass.DIAGONAL_BOUNCE:
        return kind, bounce_track(place(), (speed(), speed()), spec.n_frames, spec.frame_hw, size)

    if movement == MovementClass.CIRCULAR:
        # largest integer scale whose orbit plus object stays inside
        q = max(1, min((h - size) // 4, (w - size) // 4))
        q = int(rng.integers(1, q + 1))
        cy = int(rng.integers(2 * q, h - size - 2 * q + 1))
        cx = int(rng.integers(2 * q, w - size - 2 * q + 1))
        phase = int(rng.integers(12))
        step = 1 if rng.integers(2) else -1
        track = []
        for t in range(spec.n_frames):
            dy, dx = _CIRCLE_12[(phase + step * t) % 12]
            track.append((cy + q * dy, cx + q * dx, size))
        return kind, track

    if movement == MovementClass.EXPANDING:
        smin = spec.size_range[0]
        smax = size + 2
        cy, cx = place(smax)
        s, ds = size, 1 if rng.integers(2) else -1
        track = []
        for _ in range(spec.n_frames):
            track.append((cy + (smax - s) // 2, cx + (smax - s) // 2, s))
            if s + ds > smax or s + ds < smin:
                ds = -ds
            s += ds
        return kind, track

    if movement == MovementClass.STATIC_JITTER:
        r0, c0 = place()
        r, c = r0, c0
        track = []
        for _ in range(spec.n_frames):
            track.append((r, c, size))
            r = min(max(r + int(rng.integers(-1, 2)), max(0, r0 - 2)), min(h - size, r0 + 2))
            c = min(max(c + int(rng.integers(-1, 2)), max(0, c0 - 2)), min(w - size, c0 + 2))
        return kind, track

    raise ContractError(f"unknown movement class {movement!r}")


def generate_sequence(spec: SequenceSpec, movement: MovementClass | None = None) -> Sequence:
    """Render one labeled sequence; deterministic in ``spec.seed``."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if movement is None:
        movement = MovementClass(int(rng.integers(len(MovementClass))))
    movement = MovementClass(movement)
    frames = np.zeros((spec.n_frames, *spec.frame_hw))
    for _ in range(spec.n_objects):
        kind, track = _object_track(movement, rng, spec)
        frames += render_track(kind, track, spec.frame_hw)
    return Sequence(frames=np.clip(frames, 0.0, 1.0), label=int(movement))


def make_dataset(n_sequences: int, spec: SequenceSpec, master_seed: int = 0) -> list[Sequence]:
    """Balanced dataset: labels cycle through the six classes; each
    sequence gets an independent seed derived from (master_seed, i)."""
    out = []
    for i in range(n_sequences):
        seed_i = int(np.random.SeedSequence((master_seed, i)).generate_state(1, np.uint64)[0])
        spec_i = SequenceSpec(
            frame_hw=spec.frame_hw, n_frames=spec.n_frames, n_objects=spec.n_objects,
            shapes=spec.shapes, velocity_range=spec.velocity_range,
            size_range=spec.size_range, seed=seed_i,
        )
        out.append(generate_sequence(spec_i, MovementClass(i % len(MovementClass))))
    return out


# ---------------------------------------------------------------- dataset IO
#
# magic "HPND" | u32 version=1 | u32 n_sequences | u32 n_frames | u32 H
# | u32 W | u8 label per sequence | u8 pixels (round(255*p)),
# sequence-major, frame-major, row-major.  Little-endian throughout.

_MAGIC = b"HPND"
_VERSION = 1


def write_dataset(path, sequences: list[Sequence]) -> None:
    if sequences:
        shape = sequences[0].frames.shape
        for i, s in enumerate(sequences):
            if s.frames.shape != shape:
                raise ContractError(
                    f"sequence {i} has shape {s.frames.shape}, expected {shape}"
                )
        n_frames, h, w = shape
    else:
        n_frames = h = w = 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, len(sequences), n_frames, h, w))
        fh.write(bytes(int(s.label) & 0xFF for s in sequences))
        for s in sequences:
            fh.write(np.round(s.frames * 255.0).astype("<u1").tobytes())


def read_dataset(path) -> list[Sequence]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r} at byte 0, expected {_MAGIC!r}")
    if len(buf) < 24:
        raise FormatError(f"truncated header: {len(buf)} bytes, need 24")
    version, n_seq, n_frames, h, w = struct.unpack_from("<IIIII", buf, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version} at byte 4, expected {_VERSION}")
    need = 24 + n_seq + n_seq * n_frames * h * w
    if len(buf) != need:
        raise FormatError(f"file is {len(buf)} bytes, expected {need} (truncated at byte {len(buf)})")
    labels = np.frombuffer(buf, dtype="<u1", count=n_seq, offset=24)
    out = []
    off = 24 + n_seq
    per = n_frames * h * w
    for i in range(n_seq):
        pix = np.frombuffer(buf, dtype="<u1", count=per, offset=off + i * per)
        frames = pix.reshape(n_frames, h, w).astype(np.float64) / 255.0
        out.append(Sequence(frames=frames, label=int(labels[i])))
    return out
