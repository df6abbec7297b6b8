"""Command-line front end.

Subcommands cover the full workflow: gen-data, train, predict, eval,
neurophys, selftest.  Settings merge three layers, later wins:
built-in defaults, then a `key=value` config file (`#` comments),
then command-line flags.  Unknown config keys are rejected.

Exit codes: 0 success, 1 check or training failure, 2 usage, config,
or input errors.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import Sequence, SequenceSpec, make_dataset, read_dataset, write_dataset
from .errors import ContractError, DimensionError, FormatError, HPNetError, TrainingAbort
from .metrics import evaluate_rollout, write_eval_report
from .network import HPNet, HPNetConfig, Scheme, rollout_frames
from .neurophys import run_familiarity_suppression, run_prediction_suppression, write_traces
from .training import TrainConfig, TrainState, AdamState, load_checkpoint, save_checkpoint, train

_DEFAULTS = {
    "levels": 2,
    "channels": (8, 16),
    "block_depth": 5,
    "block_stride": None,
    "scheme": "bb",
    "frame_size": 32,
    "n_frames": 40,
    "n_sequences": 200,
    "lr": 1e-3,
    "epochs": 20,
    "batch_size": 1,
    "seed": 0,
    "p_max": 1.0,
    "data": None,
    "val_data": None,
    "out": ".",
    "checkpoint": None,
    "resume": None,
    "horizon": 20,
    "seed_frames": 20,
    "sequence": 0,
}


def _parse_channels(text: str) -> tuple[int, ...]:
    try:
        ch = tuple(int(p) for p in text.split(",") if p.strip() != "")
    except ValueError:
        raise ContractError(f"channels must be a comma list of ints, got {text!r}")
    if not ch:
        raise ContractError(f"channels must be a comma list of ints, got {text!r}")
    return ch


def _parse_scheme(text: str) -> str:
    if text not in ("ff", "bf", "bb"):
        raise ContractError(f"scheme must be one of ff, bf, bb, got {text!r}")
    return text


_SCHEMA = {
    "levels": int,
    "channels": _parse_channels,
    "block_depth": int,
    "block_stride": int,
    "scheme": _parse_scheme,
    "frame_size": int,
    "n_frames": int,
    "n_sequences": int,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "p_max": float,
    "data": str,
    "val_data": str,
    "out": str,
    "checkpoint": str,
    "resume": str,
    "horizon": int,
    "seed_frames": int,
    "sequence": int,
}


def load_config(path) -> dict:
    """Parse a key=value config file against the fixed schema."""
    out = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _SCHEMA:
                raise ContractError(f"{path}:{ln}: unknown config key {key!r}")
            try:
                out[key] = _SCHEMA[key](value)
            except ValueError:
                raise ContractError(f"{path}:{ln}: bad value for {key}: {value!r}")
    return out


def _settings(args) -> dict:
    s = dict(_DEFAULTS)
    if getattr(args, "config", None):
        s.update(load_config(args.config))
    for key in (
        "seed", "levels", "epochs", "out", "checkpoint", "horizon",
        "block_depth", "block_stride", "lr", "resume", "data",
        "n", "frames", "size", "sequence", "seed_frames",
    ):
        v = getattr(args, key, None)
        if v is not None:
            alias = {"n": "n_sequences", "frames": "n_frames", "size": "frame_size"}
            s[alias.get(key, key)] = v
    if getattr(args, "scheme", None) is not None:
        s["scheme"] = _parse_scheme(args.scheme)
    if getattr(args, "channels", None) is not None:
        s["channels"] = _parse_channels(args.channels)
    return s


def _net_config(s: dict) -> HPNetConfig:
    return HPNetConfig(
        levels=s["levels"],
        channels=tuple(s["channels"]),
        block_depth=s["block_depth"],
        block_stride=s["block_stride"],
        scheme=Scheme.parse(s["scheme"]),
        p_max=s["p_max"],
        seed=s["seed"],
    )


def _load_sequences(s: dict, path_key: str) -> list[Sequence]:
    path = s[path_key]
    if path:
        return read_dataset(path)
    spec = SequenceSpec(
        frame_hw=(s["frame_size"], s["frame_size"]), n_frames=s["n_frames"]
    )
    return make_dataset(s["n_sequences"], spec, master_seed=s["seed"])


# ---------------------------------------------------------------------- pgm


def write_pgm(path, frame) -> None:
    """Binary P5, maxval 255; values clipped to [0, 1] then quantized."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"write_pgm: expected [h, w], got {arr.shape}")
    pix = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0]))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r} at byte 0, expected b'P5'")
    # header: magic, width, height, maxval, one whitespace, raster
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255")
    if len(buf) - pos != w * h:
        raise FormatError(f"raster is {len(buf) - pos} bytes, expected {w * h}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w) / 255.0


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    s = _settings(args)
    spec = SequenceSpec(frame_hw=(s["frame_size"], s["frame_size"]), n_frames=s["n_frames"])
    seqs = make_dataset(s["n_sequences"], spec, master_seed=s["seed"])
    out = s["out"] if s["out"] != "." else "dataset.hpnd"
    write_dataset(out, seqs)
    print(f"wrote {len(seqs)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    s = _settings(args)
    os.makedirs(s["out"], exist_ok=True)
    if s["resume"]:
        net, state = load_checkpoint(s["resume"])
    else:
        net = HPNet(_net_config(s))
        state = None
    seqs = [q.frames for q in _load_sequences(s, "data")]
    val = [q.frames for q in _load_sequences(s, "val_data")] if s["val_data"] else None
    cfg = TrainConfig(
        epochs=s["epochs"], batch_size=s["batch_size"], seed=s["seed"], lr=s["lr"]
    )
    records, state = train(net, seqs, cfg, val_sequences=val, state=state)
    log_path = os.path.join(s["out"], "train_log.tsv")
    with open(log_path, "w") as fh:
        fh.write("# hpnet-train v1\n")
        for r in records:
            fh.write(f"{r.epoch}\t{r.train_loss!r}\t{r.val_loss!r}\t{r.seconds:.3f}\n")
    ck = s["checkpoint"] or os.path.join(s["out"], "model.hpnc")
    save_checkpoint(ck, net, state)
    print(f"completed epoch {state.epoch}")
    if records:
        print(f"final train loss {records[-1].train_loss:.6g}")
    print(f"checkpoint {ck}")
    print(f"log {log_path}")
    return 0


def _prediction_inputs(s):
    if not s["checkpoint"]:
        raise ContractError("predict/eval needs --checkpoint")
    if not os.path.exists(s["checkpoint"]):
        raise ContractError(f"checkpoint not found: {s['checkpoint']}")
    net, _ = load_checkpoint(s["checkpoint"])
    seqs = _load_sequences(s, "data")
    idx = s["sequence"]
    if not 0 <= idx < len(seqs):
        raise ContractError(f"sequence {idx} out of range, dataset has {len(seqs)}")
    frames = seqs[idx].frames
    n_seed = s["seed_frames"]
    if frames.shape[0] < n_seed:
        raise ContractError(
            f"sequence has {frames.shape[0]} frames, need {n_seed} seed frames"
        )
    return net, frames, n_seed


def cmd_predict(args) -> int:
    s = _settings(args)
    net, frames, n_seed = _prediction_inputs(s)
    os.makedirs(s["out"], exist_ok=True)
    horizon = s["horizon"]
    seeds = frames[:n_seed]
    for i in range(n_seed):
        write_pgm(os.path.join(s["out"], f"seed_{i:03d}.pgm"), seeds[i])
    if horizon > 0:
        pred = rollout_frames(net, seeds, horizon)
        for i in range(horizon):
            write_pgm(os.path.join(s["out"], f"pred_{i:03d}.pgm"), pred[i])
        gt = frames[n_seed : n_seed + horizon]
        for i in range(gt.shape[0]):
            write_pgm(os.path.join(s["out"], f"gt_{i:03d}.pgm"), gt[i])
    print(f"wrote {n_seed} seed + {max(horizon, 0)} predicted frames to {s['out']}")
    return 0


def cmd_eval(args) -> int:
    s = _settings(args)
    net, frames, n_seed = _prediction_inputs(s)
    horizon = s["horizon"]
    if frames.shape[0] < n_seed + horizon:
        raise ContractError(
            f"sequence has {frames.shape[0]} frames, need {n_seed + horizon} for eval"
        )
    seeds = frames[:n_seed]
    gt = frames[n_seed : n_seed + horizon]
    pred = rollout_frames(net, seeds, horizon)
    report = evaluate_rollout(pred, gt, seeds)
    os.makedirs(s["out"], exist_ok=True)
    path = os.path.join(s["out"], "eval.tsv")
    write_eval_report(path, report)
    print(f"mean_mse {report.mean_mse:.6g}")
    print(f"mean_ssim {report.mean_ssim:.6g}")
    print(f"baseline_mean_mse {report.baseline_mean_mse:.6g}")
    print(f"baseline_mean_ssim {report.baseline_mean_ssim:.6g}")
    print(f"ssim_margin {report.ssim_margin:+.6g}")
    print(f"report {path}")
    return 0


def cmd_neurophys(args) -> int:
    s = _settings(args)
    os.makedirs(s["out"], exist_ok=True)
    # exposure needs more epochs than the training default; only an
    # explicit flag or config value overrides
    file_cfg = load_config(args.config) if getattr(args, "config", None) else {}
    if args.epochs is not None:
        epochs = args.epochs
    else:
        epochs = file_cfg.get("epochs", 300)
    seed = s["seed"]
    pred = run_prediction_suppression(epochs=epochs, seed=seed)
    write_traces(os.path.join(s["out"], "prediction_traces.tsv"), pred.traces)
    fam = run_familiarity_suppression(epochs=epochs, seed=seed)
    write_traces(os.path.join(s["out"], "familiarity_traces.tsv"), fam.traces)
    for name, res in (("prediction", pred), ("familiarity", fam)):
        for (kind, level), v in sorted(res.indices.items()):
            print(f"{name}\t{kind}\tlevel{level}\t{v:+.4f}")
    return 0


def _selftest_checks():
    from .conv import ConvKernel3D, conv3d, maxpool_spatial, sparse_conv3d, upsample_spatial
    from .network import frames_to_blocks
    from .tensor import Tensor, grad_check, hadamard, no_grad, relu, tmean

    rng = np.random.default_rng(0)

    def tensor_grad():
        x = rng.standard_normal((3, 4))
        err = grad_check(lambda t: tmean(hadamard(relu(t), t)), x)
        assert err < 1e-4, f"gradient error {err:.2e}"

    def conv_grad():
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((2, 2, 1, 3, 3)) * 0.2
        kw = ConvKernel3D(Tensor(w.copy(), requires_grad=True))

        def f(t):
            return tmean(conv3d(t, kw))

        err = grad_check(f, x)
        assert err < 1e-4, f"gradient error {err:.2e}"

    def sparse_dense():
        for _ in range(50):
            x = rng.standard_normal((2, 2, 6, 6))
            x[rng.random(x.shape) < 0.6] = 0.0
            w = rng.standard_normal((3, 2, 3, 3, 3))
            k = ConvKernel3D(Tensor(w))
            a = sparse_conv3d(Tensor(x), k).data
            b = conv3d(Tensor(x), k).data
            err = float(np.max(np.abs(a - b)))
            assert err < 1e-12, f"sparse/dense gap {err:.2e}"

    def pool_identity():
        x = rng.standard_normal((2, 2, 4, 4))
        y = maxpool_spatial(upsample_spatial(Tensor(x))).data
        assert np.array_equal(x, y), "maxpool(upsample(x)) != x"

    def telescoping():
        cfg = HPNetConfig(levels=1, channels=(3,), block_depth=2, block_stride=2, seed=0)
        net = HPNet(cfg)
        frames = rng.random((8, 8, 8))
        blocks = frames_to_blocks(frames, 2, 2)
        res = net.forward_sequence(blocks)
        with no_grad():
            direct = sparse_conv3d(Tensor(blocks[-1]), net.levels[0].r_kernel).data
        gap = float(np.max(np.abs(res.states[0].r.data - direct)))
        assert gap < 1e-9, f"telescoping gap {gap:.2e}"

    def checkpoint_roundtrip():
        import tempfile

        cfg = HPNetConfig(levels=1, channels=(2,), block_depth=1, block_stride=1,
                          scheme=Scheme.FRAME_TO_FRAME, seed=3)
        net = HPNet(cfg)
        state = TrainState(opt=AdamState(), rng=np.random.Generator(np.random.PCG64(0)))
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "ck.hpnc")
            save_checkpoint(p, net, state)
            net2, _ = load_checkpoint(p)
            for k, v in net.named_params().items():
                assert np.array_equal(v.data, net2.named_params()[k].data), k

    return [
        ("tensor-grad", tensor_grad),
        ("conv-grad", conv_grad),
        ("sparse-dense", sparse_dense),
        ("pool-identity", pool_identity),
        ("telescoping", telescoping),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
    ]


def cmd_selftest(args) -> int:
    failed = []
    for name, fn in _selftest_checks():
        try:
            fn()
        except Exception as e:  # report and keep going
            failed.append(name)
            print(f"FAIL {name}: {e}")
            continue
        print(f"ok {name}")
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("selftest passed")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hpnet",
        description="hierarchical predictive network: data, training, rollout, probes",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "config" in names:
            p.add_argument("--config", help="key=value config file")
        if "seed" in names:
            p.add_argument("--seed", type=int, help="master seed")
        if "model" in names:
            p.add_argument("--scheme", choices=("ff", "bf", "bb"), help="prediction scheme")
            p.add_argument("--levels", type=int, help="number of stacked modules")
            p.add_argument("--channels", help="comma list, one entry per level")
            p.add_argument("--block-depth", dest="block_depth", type=int, help="frames per block")
            p.add_argument("--block-stride", dest="block_stride", type=int, help="frames advanced per block")
        if "out" in names:
            p.add_argument("--out", help="output file or directory")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g, "config", "seed", "out")
    g.add_argument("--n", type=int, help="number of sequences (default 200)")
    g.add_argument("--frames", type=int, help="frames per sequence (default 40)")
    g.add_argument("--size", type=int, help="square frame size (default 32)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network")
    common(t, "config", "seed", "model", "out")
    t.add_argument("--epochs", type=int, help="training epochs")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--data", help="HPND dataset path (default: synthesize)")
    t.add_argument("--checkpoint", help="checkpoint output path")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="roll out frames from a checkpoint")
    common(p, "config", "seed", "out")
    p.add_argument("--checkpoint", help="trained checkpoint path")
    p.add_argument("--data", help="HPND dataset path (default: synthesize)")
    p.add_argument("--horizon", type=int, help="frames to predict (default 20)")
    p.add_argument("--seed-frames", dest="seed_frames", type=int, help="teacher-forced frames (default 20)")
    p.add_argument("--sequence", type=int, help="dataset sequence index (default 0)")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a rollout against ground truth")
    common(e, "config", "seed", "out")
    e.add_argument("--checkpoint", help="trained checkpoint path")
    e.add_argument("--data", help="HPND dataset path (default: synthesize)")
    e.add_argument("--horizon", type=int, help="frames to score (default 20)")
    e.add_argument("--seed-frames", dest="seed_frames", type=int, help="teacher-forced frames (default 20)")
    e.add_argument("--sequence", type=int, help="dataset sequence index (default 0)")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("neurophys", help="run both suppression probes")
    common(n, "config", "seed", "out")
    n.add_argument("--epochs", type=int, help="exposure epochs (default 300)")
    n.set_defaults(func=cmd_neurophys)

    st = sub.add_parser("selftest", help="run built-in numeric checks")
    st.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (HPNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
