"""Command-line entry point: ``egokit <command> [options]``.

Options can also come from a flat ``section.key=value`` config file given
with ``--config``; the section is the command name (``guidance.*`` keys feed
the guidance weights).  Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import body, pipeline
from .conditioning import ConditioningVariant
from .data import io as dio
from .data.generate import FAMILIES, GeneratorConfig, generate
from .data.sequence import MotionSequence, is_test_id
from .guidance.costs import GuidanceWeights
from .guidance.guide import GuideConfig
from .metrics import mean_stderr, metrics_csv, pa_mpjpe_frames
from .motionprior.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .motionprior.denoiser import DenoiserConfig
from .motionprior.diffusion import split_windows
from .motionprior.train import TrainConfig, TrainingDivergedError
from .scene import FloorConfig, InsufficientPointsError, estimate_floor, load_point_cloud

log = logging.getLogger("egokit")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ALL_VARIANTS = tuple(v.value for v in ConditioningVariant)
QUICK_VARIANTS = ("egoallo", "absolute")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in _csv_list(text)]


# Each option: (flag[|alias], dest, type, default, help).  Defaults live here rather
# than in argparse so that config-file values can sit between the two.
_COMMON = [
    ("--seed", "seed", int, 0, "global seed"),
]
_OPTIONS = {
    "gen": [
        ("--out", "out", str, None, "output directory"),
        ("--count", "count", int, 100, "number of sequences"),
        ("--families", "families", _csv_list, list(FAMILIES), "comma-separated motion families"),
        ("--height-min", "height_min", float, 0.85, "smallest height scale"),
        ("--height-max", "height_max", float, 1.15, "largest height scale"),
        ("--duration-min", "duration_min", float, 4.5, "shortest sequence, seconds"),
        ("--duration-max", "duration_max", float, 7.0, "longest sequence, seconds"),
    ],
    "train": [
        ("--data", "data", str, None, "dataset directory written by gen"),
        ("--out", "out", str, None, "checkpoint path"),
        ("--conditioning|--variant", "variant", str, "egoallo", "conditioning variant"),
        ("--steps", "steps", int, 2000, "optimizer steps"),
        ("--batch-size", "batch_size", int, 16, "crops per step"),
        ("--lr", "lr", float, 1e-3, "peak learning rate"),
        ("--width", "width", int, 64, "transformer width"),
        ("--blocks", "blocks", int, 2, "encoder and decoder blocks each"),
        ("--loss-csv", "loss_csv", str, None, "loss curve CSV (default: <out>.loss.csv)"),
    ],
    "estimate": [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--cpf", "cpf", str, None, "input CPF trajectory file"),
        ("--sequence", "sequence", str, None, "ground-truth sequence file (CPF input and metrics)"),
        ("--observations", "observations", str, None, "hand observation file"),
        ("--points", "points", str, None, "sparse point cloud for the floor estimate"),
        ("--out", "out", str, None, "estimated sequence file"),
        ("--metrics", "metrics", str, None, "metrics CSV (needs --sequence)"),
        ("--steps", "steps", int, 30, "DDIM steps"),
        ("--guided-steps", "guided_steps", int, 10, "final DDIM steps that run guidance"),
        ("--lm-iterations", "lm_iterations", int, 4, "LM iterations per guided step"),
    ],
    "ablate": [
        ("--data", "data", str, None, "dataset directory written by gen"),
        ("--out-dir", "out_dir", str, None, "directory for the CSV, chart and checkpoints"),
        ("--variants", "variants", _csv_list, list(ALL_VARIANTS), "variants to compare"),
        ("--quick", "quick", int, 0, "1 = only egoallo and absolute"),
        ("--steps", "steps", int, 2000, "optimizer steps per variant"),
        ("--batch-size", "batch_size", int, 16, "crops per step"),
        ("--seqlens", "seqlens", _int_list, [32, 128], "evaluation sequence lengths"),
        ("--max-test", "max_test", int, 0, "cap on held-out sequences (0 = all)"),
    ],
    "eval": [
        ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
        ("--data", "data", str, None, "dataset directory written by gen"),
        ("--seqlens", "seqlens", _int_list, [32, 128], "evaluation sequence lengths"),
        ("--out", "out", str, None, "metrics CSV (default: stdout)"),
        ("--max-test", "max_test", int, 0, "cap on held-out sequences (0 = all)"),
    ],
    "floor": [
        ("--points", "points", str, None, "point cloud file"),
        ("--threshold", "threshold", float, 0.01, "inlier distance, meters"),
        ("--iterations", "iterations", int, 1000, "RANSAC rounds"),
    ],
    "skeleton-dump": [
        ("--out", "out", str, None, "output file (default: stdout)"),
    ],
}
_GUIDANCE_KEYS = tuple(GuidanceWeights.__dataclass_fields__)
_GUIDED_COMMANDS = ("estimate",)


def _build_parser():
    parser = _Parser(prog="egokit", description="Egocentric body estimation from head poses.")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in _OPTIONS.items():
        p = sub.add_parser(name)
        for flag, dest, typ, _, help_ in _COMMON + opts:
            p.add_argument(*flag.split("|"), dest=dest, type=typ, default=None, help=help_)
        if name in _GUIDED_COMMANDS:
            for key in _GUIDANCE_KEYS:
                p.add_argument(f"--lambda-{key.replace('_', '-')}", dest=f"lambda_{key}", type=float, default=None,
                               help=f"guidance weight {key}")
        p.add_argument("--config", dest="sub_config", default=None, help=argparse.SUPPRESS)
    return parser


def read_config(path) -> dict:
    """Parse a ``section.key=value`` file; ``#`` comments and blank lines are ignored."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected section.key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise UsageError(f"{path}:{lineno}: key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        valid = _valid_keys(section)
        if valid is None:
            raise UsageError(f"{path}:{lineno}: unknown section {section!r}")
        if name.replace("-", "_") not in valid:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[(section, name.replace("-", "_"))] = value
    return out


def _valid_keys(section):
    if section == "guidance":
        return set(_GUIDANCE_KEYS)
    if section == "common":
        return {o[1] for o in _COMMON}
    if section in _OPTIONS:
        return {o[1] for o in _COMMON + _OPTIONS[section]}
    return None


def _resolve(args, config: dict) -> argparse.Namespace:
    """Flags > config file > built-in defaults."""
    cmd = args.command
    out = argparse.Namespace(command=cmd, verbose=args.verbose)
    for flag, dest, typ, default, _ in _COMMON + _OPTIONS[cmd]:
        value = getattr(args, dest)
        if value is None:
            raw = config.get((cmd, dest), config.get(("common", dest)))
            if raw is not None:
                try:
                    value = typ(raw)
                except ValueError:
                    raise UsageError(f"config value for {cmd}.{dest} is not valid: {raw!r}") from None
        setattr(out, dest, default if value is None else value)
    if cmd in _GUIDED_COMMANDS:
        weights = {}
        for key in _GUIDANCE_KEYS:
            value = getattr(args, f"lambda_{key}")
            if value is None and ("guidance", key) in config:
                try:
                    value = float(config[("guidance", key)])
                except ValueError:
                    raise UsageError(f"config value for guidance.{key} is not a number") from None
            if value is not None:
                weights[key] = value
        try:
            out.weights = GuidanceWeights(**weights)
        except ValueError as e:
            raise UsageError(str(e)) from None
    return out


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.command}")


def _existing(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# --- dataset directory -------------------------------------------------------

MANIFEST = "manifest.csv"


def _load_dataset(directory, split=None, limit: int = 0):
    directory = _existing(directory, "dataset directory")
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise UsageError(f"{manifest} not found (run egokit gen first)")
    with manifest.open() as f:
        rows = list(csv.DictReader(f))
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    if limit:
        rows = rows[:limit]
    return [dio.load_sequence(directory / r["file"]) for r in rows]


# --- commands ----------------------------------------------------------------


def cmd_gen(args):
    _require(args, "out")
    try:
        config = GeneratorConfig(families=tuple(args.families), height_scale=(args.height_min, args.height_max),
                                 duration=(args.duration_min, args.duration_max), seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.count < 1:
        raise UsageError("--count must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs = generate(config, args.count)
    rows = []
    for s in seqs:
        name = f"{s.id}.jsonl"
        dio.save_sequence(s, out / name)
        rows.append((s.id, s.family, s.length, "test" if is_test_id(s.id) else "train", name))
    with (out / MANIFEST).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "family", "T", "split", "file"])
        w.writerows(rows)
    hist = {fam: sum(r[1] == fam for r in rows) for fam in config.families}
    n_test = sum(r[3] == "test" for r in rows)
    print(f"wrote {len(rows)} sequences to {out} ({len(rows) - n_test} train, {n_test} test)")
    print("families: " + ", ".join(f"{k}={v}" for k, v in hist.items()))
    return EXIT_OK


def _train_config(args, steps, batch_size, lr=1e-3):
    return TrainConfig(steps=steps, batch_size=batch_size, lr=lr, warmup=min(100, max(1, steps // 10)),
                       seed=args.seed)


def cmd_train(args):
    _require(args, "data", "out")
    variant = _variant(args.variant)
    seqs = _load_dataset(args.data, split="train")
    if not seqs:
        raise UsageError("no training sequences in the dataset")
    arch = DenoiserConfig(state_dim=pipeline.STATE_DIM, cond_dim=pipeline.default_architecture(variant).cond_dim,
                          width=args.width, enc_blocks=args.blocks, dec_blocks=args.blocks)
    params, losses = pipeline.train_variant(seqs, variant, arch, _train_config(args, args.steps, args.batch_size,
                                                                                 args.lr))
    save_checkpoint(params, args.out)
    loss_path = args.loss_csv or f"{args.out}.loss.csv"
    with open(loss_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows((i, "%.17g" % v) for i, v in enumerate(losses))
    print(f"trained {variant.value} for {args.steps} steps: loss {losses[0]:.4g} -> {losses[-1]:.4g}")
    print(f"checkpoint {args.out}, loss curve {loss_path}")
    return EXIT_OK


def _variant(name):
    try:
        return ConditioningVariant.parse(name)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_params(path):
    _existing(path, "checkpoint")
    return load_checkpoint(path)


def cmd_estimate(args):
    _require(args, "checkpoint", "out")
    if (args.cpf is None) == (args.sequence is None):
        raise UsageError("give exactly one of --cpf or --sequence")
    if args.metrics and not args.sequence:
        raise UsageError("--metrics needs a ground-truth --sequence")
    params = _load_params(args.checkpoint)
    gt = None
    if args.sequence:
        gt = dio.load_sequence(_existing(args.sequence, "sequence file"))
        cpf_rot, cpf_pos = gt.cpf()
    else:
        cpf_rot, cpf_pos = dio.load_cpf(_existing(args.cpf, "CPF trajectory"))
    obs = dio.load_observations(_existing(args.observations, "observation file")) if args.observations else []
    floor_z = 0.0
    if args.points:
        floor_z = estimate_floor(load_point_cloud(_existing(args.points, "point cloud")),
                                 FloorConfig(seed=args.seed)).z
    cfg = GuideConfig(guided_steps=args.guided_steps,
                      lm=replace(GuideConfig().lm, max_iterations=args.lm_iterations))
    est = pipeline.estimate(params, cpf_rot, cpf_pos, obs, floor_z=floor_z, steps=args.steps, weights=args.weights,
                            guide_config=cfg, seed=args.seed)
    seq_id = gt.id if gt is not None else Path(args.cpf).stem
    out = MotionSequence(id=f"{seq_id}-estimate", root_rot=est.root_rot, root_pos=est.root_pos,
                             local_rot=est.local_rot, contacts=est.contacts, beta=est.beta[0], family="estimate")
    dio.save_sequence(out, args.out)
    n_win = len(split_windows(len(cpf_rot)))
    print(f"estimated {len(cpf_rot)} frames in {n_win} window(s), floor z={floor_z:.4f}, "
          f"guidance {'on' if obs else 'off'} -> {args.out}")
    if gt is not None:
        rows = _sequence_metrics(est, gt, floor_z)
        text = metrics_csv(rows)
        if args.metrics:
            Path(args.metrics).write_text(text)
        else:
            sys.stdout.write(text)
    return EXIT_OK


def _sequence_metrics(est, gt, floor_z):
    """Per-sequence body-joint metrics; stderr is taken over frames."""
    _, gt_pos = gt.joints()
    pred, ref = est.joint_pos[:, :pipeline.BODY_JOINTS], gt_pos[:, :pipeline.BODY_JOINTS]
    per_frame = np.linalg.norm(pred - ref, axis=-1).mean(axis=1) * 1000.0
    pa, _ = pa_mpjpe_frames(pred, ref)
    head = np.linalg.norm(est.joint_pos[:, pipeline.HEAD_JOINT] - gt_pos[:, pipeline.HEAD_JOINT], axis=-1) * 1000.0
    g = pipeline.score(est, gt_pos, floor_z)["gnd"]
    return [("mpjpe", *mean_stderr(per_frame)), ("pampjpe", *mean_stderr(pa)), ("gnd", g, 0.0, 1),
            ("t_head", *mean_stderr(head))]


ABLATION_COLUMNS = ["variant", "seqlen", "mpjpe", "mpjpe_se", "pampjpe", "pampjpe_se", "gnd", "gnd_se"]


def summarize(variant, seqlen, rows):
    out = {"variant": variant, "seqlen": seqlen}
    for key in ("mpjpe", "pampjpe", "gnd"):
        m, se, _ = mean_stderr([r[key] for r in rows])
        out[key], out[f"{key}_se"] = m, se
    return out


def write_ablation_csv(rows, target):
    """Write to a path, or to an open text stream."""
    with (open(target, "w", newline="") if isinstance(target, (str, Path)) else nullcontext(target)) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["seqlen"]] + ["%.6f" % r[k] for k in ABLATION_COLUMNS[2:]])


def cmd_ablate(args):
    from .plotting import ablation_chart

    _require(args, "data", "out_dir")
    variants = list(QUICK_VARIANTS) if args.quick else args.variants
    variants = [_variant(v).value for v in variants]
    train = _load_dataset(args.data, split="train")
    test = _load_dataset(args.data, split="test", limit=args.max_test)
    if not train or not test:
        raise UsageError("the dataset needs both train and test sequences")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in variants:
        params, _ = pipeline.train_variant(train, v, cfg=_train_config(args, args.steps, args.batch_size))
        save_checkpoint(params, out / f"{v}.ckpt")
        for length in args.seqlens:
            per_seq = pipeline.evaluate(params, test, length, seed=args.seed)
            if not per_seq:
                raise UsageError(f"no held-out sequence has {length} frames")
            rows.append(summarize(v, length, per_seq))
            r = rows[-1]
            print(f"{v:>18} seqlen {length:>4}: MPJPE {r['mpjpe']:.1f} ± {r['mpjpe_se']:.1f} mm, "
                  f"PA-MPJPE {r['pampjpe']:.1f} ± {r['pampjpe_se']:.1f} mm, GND {r['gnd']:.2f}")
    write_ablation_csv(rows, out / "ablation.csv")
    ablation_chart(rows, out / "ablation.svg")
    print(f"wrote {out / 'ablation.csv'} and {out / 'ablation.svg'}")
    return EXIT_OK


def cmd_eval(args):
    _require(args, "checkpoint", "data")
    params = _load_params(args.checkpoint)
    test = _load_dataset(args.data, split="test", limit=args.max_test)
    if not test:
        raise UsageError("no held-out sequences in the dataset")
    rows = []
    for length in args.seqlens:
        per_seq = pipeline.evaluate(params, test, length, seed=args.seed)
        if not per_seq:
            raise UsageError(f"no held-out sequence has {length} frames")
        rows.append(summarize(params.meta.get("variant", ""), length, per_seq))
    write_ablation_csv(rows, args.out or sys.stdout)
    return EXIT_OK


def cmd_floor(args):
    _require(args, "points")
    cloud = load_point_cloud(_existing(args.points, "point cloud"))
    est = estimate_floor(cloud, FloorConfig(inlier_threshold=args.threshold, iterations=args.iterations,
                                            seed=args.seed))
    print(f"floor_z {est.z:.6f}")
    print(f"inliers {est.inliers}")
    return EXIT_OK


def cmd_skeleton_dump(args):
    text = body.dump_skeleton()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "estimate": cmd_estimate, "ablate": cmd_ablate, "eval": cmd_eval,
            "floor": cmd_floor, "skeleton-dump": cmd_skeleton_dump}


def _thread_limit():
    value = os.environ.get("EGOKIT_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"EGOKIT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("EGOKIT_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        config_path = args.sub_config or args.config
        config = read_config(config_path) if config_path else {}
        resolved = _resolve(args, config)
        logging.basicConfig(level=logging.INFO if resolved.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return COMMANDS[args.command](resolved)
    except UsageError as e:
        print(f"egokit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dio.FormatError, CheckpointError, InsufficientPointsError, TrainingDivergedError, OSError,
            ValueError) as e:
        print(f"egokit: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
