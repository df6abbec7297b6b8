"""Prediction-quality metrics and linear-probe decoding.

MSE is reported on the 8-bit display scale (pixels scaled by 255
before squaring) so values are comparable across datasets stored at
different bit depths.  SSIM follows the standard Gaussian-window
formulation (11x11, sigma 1.5, K1=0.01, K2=0.03) with L fixed to 1.0
because frames are unit-interval; only fully valid window positions
enter the mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError

EVAL_HEADER = "# hpnet-eval v1"

_WIN = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


def _check_pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mse(pred, target) -> float:
    """Mean squared error of one frame pair on the 0-255 scale."""
    a, b = _check_pair(pred, target, "mse")
    return float(np.mean((255.0 * (a - b)) ** 2))


def mse_frames(pred, target) -> list[float]:
    a, b = _check_pair(pred, target, "mse_frames")
    return [float(np.mean((255.0 * (pa - pb)) ** 2)) for pa, pb in zip(a, b)]


def _gauss1d():
    x = np.arange(_WIN) - (_WIN - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * _SIGMA * _SIGMA))
    return g / g.sum()


def _filter_valid(img, g):
    # separable Gaussian, valid positions only
    t = sliding_window_view(img, _WIN, axis=0) @ g
    return sliding_window_view(t, _WIN, axis=1) @ g


def ssim(pred, target) -> float:
    """Structural similarity of one frame pair, mean over valid windows."""
    a, b = _check_pair(pred, target, "ssim")
    if a.ndim != 2:
        raise DimensionError(f"ssim: expected 2d frames, got shape {a.shape}")
    if min(a.shape) < _WIN:
        raise ContractError(
            f"ssim: frame {a.shape} smaller than the {_WIN}x{_WIN} window"
        )
    g = _gauss1d()
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_frames(pred, target) -> list[float]:
    a, b = _check_pair(pred, target, "ssim_frames")
    return [ssim(pa, pb) for pa, pb in zip(a, b)]


def copy_last_baseline(seed_frames, horizon: int) -> np.ndarray:
    """Freeze the last seed frame for ``horizon`` steps."""
    frames = np.asarray(seed_frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise DimensionError(
            f"copy_last_baseline: expected nonempty [n, h, w], got {frames.shape}"
        )
    if horizon < 0:
        raise ContractError(f"copy_last_baseline: horizon {horizon} < 0")
    return np.repeat(frames[-1][None], horizon, axis=0)


@dataclass
class EvalReport:
    frame_mse: list[float]
    frame_ssim: list[float]
    mean_mse: float
    mean_ssim: float
    baseline_mean_mse: float
    baseline_mean_ssim: float

    @property
    def mse_margin(self) -> float:
        """Positive when predictions beat the copy-last baseline."""
        return self.baseline_mean_mse - self.mean_mse

    @property
    def ssim_margin(self) -> float:
        return self.mean_ssim - self.baseline_mean_ssim


def evaluate_rollout(pred_frames, gt_frames, seed_frames) -> EvalReport:
    """Score predicted frames against ground truth and the copy-last baseline."""
    pred, gt = _check_pair(pred_frames, gt_frames, "evaluate_rollout")
    base = copy_last_baseline(seed_frames, len(gt))
    fm = mse_frames(pred, gt)
    fs = ssim_frames(pred, gt)
    return EvalReport(
        frame_mse=fm,
        frame_ssim=fs,
        mean_mse=float(np.mean(fm)),
        mean_ssim=float(np.mean(fs)),
        baseline_mean_mse=float(np.mean(mse_frames(base, gt))),
        baseline_mean_ssim=float(np.mean(ssim_frames(base, gt))),
    )


def format_eval_report(report: EvalReport) -> str:
    lines = [EVAL_HEADER]
    for i, (m, s) in enumerate(zip(report.frame_mse, report.frame_ssim)):
        lines.append(f"{i}\t{m!r}\t{s!r}")
    lines.append(f"# mean_mse {report.mean_mse!r}")
    lines.append(f"# mean_ssim {report.mean_ssim!r}")
    lines.append(f"# baseline_mean_mse {report.baseline_mean_mse!r}")
    lines.append(f"# baseline_mean_ssim {report.baseline_mean_ssim!r}")
    return "\n".join(lines) + "\n"


def write_eval_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write(format_eval_report(report))


def read_eval_report(path) -> tuple[list[float], list[float]]:
    """Parse the frame rows of an eval file back into (mse, ssim) lists."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != EVAL_HEADER:
        raise FormatError(f"missing header {EVAL_HEADER!r}")
    mses, ssims = [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"line {ln}: expected 3 tab-separated fields, got {len(parts)}")
        idx, m, s = parts
        if int(idx) != len(mses):
            raise FormatError(f"line {ln}: frame index {idx} out of order")
        mses.append(float(m))
        ssims.append(float(s))
    return mses, ssims


def pool_representation(rep) -> np.ndarray:
    """Collapse a [c, ...] activation map to a channel vector by mean."""
    arr = np.asarray(rep, dtype=np.float64)
    if arr.ndim < 2:
        raise DimensionError(f"pool_representation: expected [c, ...], got {arr.shape}")
    return arr.reshape(arr.shape[0], -1).mean(axis=1)


def decode_accuracy(reps, labels, split_seed: int = 0) -> float:
    """Nearest-centroid decoding of labels from pooled activations.

    Stratified 80/20 split per class, seeded; centroids from the train
    split; accuracy on the held-out fifth.  Classes need at least two
    sequences so both splits are populated.
    """
    labels = np.asarray(labels)
    if len(reps) != len(labels):
        raise ContractError(
            f"decode_accuracy: {len(reps)} representations vs {len(labels)} labels"
        )
    feats = np.stack([pool_representation(r) for r in reps])
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ContractError(f"decode_accuracy: need >= 2 classes, got {len(classes)}")
    rng = np.random.default_rng(split_seed)
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ContractError(
                f"decode_accuracy: class {c} has {len(idx)} sequence(s), need >= 2"
            )
        perm = rng.permutation(idx)
        n_test = max(1, int(round(0.2 * len(idx))))
        test_idx.extend(perm[:n_test])
        train_idx.extend(perm[n_test:])
    centroids = np.stack([feats[[i for i in train_idx if labels[i] == c]].mean(axis=0) for c in classes])
    hits = 0
    for i in test_idx:
        d = np.linalg.norm(centroids - feats[i], axis=1)
        hits += int(classes[int(np.argmin(d))] == labels[i])
    return hits / len(test_idx)
