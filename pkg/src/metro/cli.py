"""Command-line entry point: ``metro <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure,
3 file or I/O failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys

import numpy as np

from .errors import (AlignmentError, ConfigError, FormatError, NumericError, ParseError, ShapeError,
                     ValidationError)

log = logging.getLogger("metro")

DEFAULT_ATTENTION_JOINTS = {
    "body": ["r_wrist", "r_elbow", "l_knee", "l_ankle", "head"],
    "hand": ["wrist", "thumb_tip", "index_tip", "middle_tip", "pinky_tip"],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="JSON file of option values; explicit flags override it")
    g.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    g.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = deterministic)")
    g.add_argument("--out-dir", default="metro_out", help="directory for all outputs (default metro_out)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _model_opts(p):
    g = p.add_argument_group("model")
    g.add_argument("--stages", type=int, default=3, help="number of width halvings (0-3, default 3)")
    g.add_argument("--total-layers", type=int, default=12, help="transformer layers over all blocks")
    g.add_argument("--heads", type=int, default=4, help="attention heads per block")
    g.add_argument("--positional-mode", choices=["template_coords", "sinusoidal"], default="template_coords")
    g.add_argument("--upsampler-hidden", type=int, default=64, help="hidden width of the residual upsampler")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32")


def _train_opts(p):
    g = p.add_argument_group("optimisation")
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    g.add_argument("--lr-decay-factor", type=float, default=10.0)
    g.add_argument("--lr-decay-epoch", type=int, default=None, help="1-based epoch of the decay (default epochs/2)")
    g.add_argument("--mvm-max-fraction", type=float, default=0.3, help="upper bound of the masked query share")
    g.add_argument("--grad-clip", type=float, default=1.0, help="global gradient-norm cap; 0 disables")
    g.add_argument("--augment", action="store_true", help="random yaw and scale jitter per sample")
    g.add_argument("--coarse-loss", action="store_true", help="add an L1 term on the coarse vertices")
    g.add_argument("--eval-every", type=int, default=1, help="evaluate every N epochs (0 = never)")
    g.add_argument("--stop-mpjpe-ratio", type=float, default=None,
                   help="stop once MPJPE falls below this fraction of the untrained value")
    g.add_argument("--time-limit", type=float, default=None, help="stop after the epoch that exceeds N seconds")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="metro", description="Mesh regression transformer on synthetic articulated bodies.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset file")
    p.add_argument("--preset", choices=["body", "hand"], default="body")
    p.add_argument("--n", type=int, default=256, help="number of samples")
    p.add_argument("--p-2d-only", type=float, default=0.0, help="share of samples with 2-D labels only")
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--feature-mode", choices=["oracle_mlp", "tiny_cnn"], default="oracle_mlp")
    p.add_argument("--image-side", type=int, default=64)
    p.add_argument("--output", default=None, help="dataset path (default OUT_DIR/dataset.mtrd)")

    p = sub.add_parser("train", parents=[common], help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None, help="dataset for the per-epoch metrics (default: --data)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _model_opts(p)
    _train_opts(p)

    p = sub.add_parser("eval", parents=[common], help="report metrics for a checkpoint or a prediction file")
    p.add_argument("--data", required=True, help="ground-truth dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--pred-dataset", help="dataset whose joints/vertices are taken as predictions")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--thresholds", default="5,15", help="F-score thresholds in mm, comma separated")

    p = sub.add_parser("infer", parents=[common], help="write meshes and camera for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--tta", action="store_true", help="average over rotated and scaled input views")

    p = sub.add_parser("attention", parents=[common], help="export final-layer attention maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=16, help="number of samples to average over")
    p.add_argument("--joints", default=None, help="comma-separated joint names for per-joint columns")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all ops and a micro model")
    p.add_argument("--preset", choices=["body", "hand"], default=None,
                   help="run the model check on this preset's template instead of the micro mesh")
    p.add_argument("--step", type=float, default=1e-6)

    p = sub.add_parser("ablate", parents=[common], help="masking-cap and width-schedule sweeps")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", default=None)
    p.add_argument("--sweep", choices=["mvm", "dims", "both"], default="both")
    p.add_argument("--caps", default="0,0.1,0.2,0.3,0.4,0.5")
    _model_opts(p)
    _train_opts(p)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill in options not given on the command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        section = cfg.pop(args.command, {})
        flat = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        flat.update(section)
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        values = {}
        for k, v in flat.items():
            dest = k.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise ConfigError(f"{args.config}: unknown option {k!r} for {args.command}")
            values[dest] = v
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _echo_config(args) -> None:
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    with open(os.path.join(args.out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ValidationError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    from .synth import generate_dataset
    path = args.output or os.path.join(args.out_dir, "dataset.mtrd")
    ds = generate_dataset(args.n, args.seed, args.preset, args.p_2d_only, feature_dim=args.feature_dim,
                          feature_mode=args.feature_mode, image_side=args.image_side, path=path)
    print(f"wrote {len(ds)} {args.preset} samples to {path}")


def _encoder_kwargs(args, dataset) -> dict:
    return dict(positional_mode=args.positional_mode, upsampler_hidden=args.upsampler_hidden,
                feature_extractor="tiny_cnn" if dataset.has_images else "precomputed",
                image_side=dataset.meta.get("image_side") or 64)


def _encoder_config(args, dataset):
    from .model import EncoderConfig
    return EncoderConfig.scheme(dataset.feature_dim, args.stages, total_layers=args.total_layers, heads=args.heads,
                                mvm_max_fraction=args.mvm_max_fraction, **_encoder_kwargs(args, dataset))


def _train_config(args):
    from .train import TrainConfig
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_initial=args.lr,
                       lr_decay_factor=args.lr_decay_factor, lr_decay_epoch=args.lr_decay_epoch,
                       mvm_max_fraction=args.mvm_max_fraction, seed=args.seed, eval_every=args.eval_every,
                       grad_clip=args.grad_clip or None, augment=args.augment,
                       coarse_vertex_loss=args.coarse_loss, stop_mpjpe_ratio=args.stop_mpjpe_ratio,
                       time_limit=args.time_limit)


def cmd_train(args):
    from .model import Metro, load_checkpoint
    from .synth import Dataset, get_preset
    from .train import train
    ds = Dataset.load(args.data)
    eval_ds = Dataset.load(args.eval_data) if args.eval_data else None
    body = get_preset(ds.preset)
    if args.resume:
        model, _ = load_checkpoint(args.resume)
    else:
        model = Metro.from_template(_encoder_config(args, ds), body.mesh, body.regressor, seed=args.seed,
                                    dtype=np.dtype(args.dtype).type)
    res = train(model, ds, _train_config(args), args.out_dir, eval_ds, coarse_indices=body.mesh.coarse_indices)
    rep = res.final_report
    print(f"trained {res.epochs_run} epochs; checkpoint {res.checkpoint}")
    if rep is not None:
        print(rep.csv_header())
        print(rep.csv_row())


def cmd_eval(args):
    from .metrics import evaluate_predictions
    from .model import load_checkpoint
    from .synth import Dataset, get_preset
    from .train import predict
    gt = Dataset.load(args.data)
    try:
        thresholds = tuple(float(t) for t in args.thresholds.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"bad --thresholds {args.thresholds!r}") from None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        p = predict(model, gt, args.batch_size)
        pj, pv, G = p["joints"], p["full"], model.regressor
    else:
        pred = Dataset.load(args.pred_dataset)
        if len(pred) != len(gt) or pred.records["vertices"].shape != gt.records["vertices"].shape:
            raise ShapeError("prediction and ground-truth datasets differ in size")
        pj, pv = pred.records["joints"], pred.records["vertices"]
        G = get_preset(gt.preset).regressor.G
    rep = evaluate_predictions(pj, gt.records["joints"], pv, gt.records["vertices"], G, root=0,
                               thresholds=thresholds)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(rep.csv_header() + "\n" + rep.csv_row() + "\n")
    print(rep.csv_header())
    print(rep.csv_row())


def cmd_infer(args):
    from .mesh import save_obj
    from .model import load_checkpoint
    from .synth import Dataset, get_preset
    from .train import DEFAULT_TTA, Featurizer, infer, tta_infer
    model, _ = load_checkpoint(args.checkpoint)
    ds = Dataset.load(args.data)
    if not 0 <= args.index < len(ds):
        raise ValidationError(f"--index {args.index} outside 0..{len(ds) - 1}")
    sample = ds[args.index]
    mesh = get_preset(ds.preset).mesh
    out = infer(model, sample)
    full = out.full_vertices3d.data[0].astype(np.float64)
    if args.tta:
        full = tta_infer(model, sample, DEFAULT_TTA, Featurizer(ds.meta))
    os.makedirs(args.out_dir, exist_ok=True)
    save_obj(os.path.join(args.out_dir, "coarse.obj"), out.coarse_vertices3d.data[0], mesh.coarse_faces)
    save_obj(os.path.join(args.out_dir, "full.obj"), full, mesh.faces)
    cam = out.camera_params(0)
    with open(os.path.join(args.out_dir, "camera.json"), "w", encoding="utf-8") as fh:
        json.dump({"index": args.index, "s": cam.scale, "tx": cam.tx, "ty": cam.ty, "tta": bool(args.tta)}, fh,
                  indent=2)
        fh.write("\n")
    print(f"wrote coarse.obj, full.obj and camera.json to {args.out_dir}")


def cmd_attention(args):
    from .metrics import save_matrix_csv, save_pgm
    from .model import load_checkpoint
    from .synth import Dataset, get_preset
    from .train import predict
    model, _ = load_checkpoint(args.checkpoint)
    ds = Dataset.load(args.data)
    if args.samples < 1:
        raise ValidationError("--samples must be at least 1")
    idx = np.arange(min(args.samples, len(ds)))
    A = predict(model, ds, 8, indices=idx, retain_attention=True)["attention_last"]
    names = get_preset(ds.preset).joint_names
    wanted = args.joints.split(",") if args.joints else DEFAULT_ATTENTION_JOINTS.get(ds.preset, names[:5])
    unknown = [j for j in wanted if j not in names]
    if unknown:
        raise ValidationError(f"unknown joint names {unknown}; available: {', '.join(names)}")
    os.makedirs(args.out_dir, exist_ok=True)
    save_matrix_csv(os.path.join(args.out_dir, "attention.csv"), A)
    save_pgm(os.path.join(args.out_dir, "attention.pgm"), A)
    K = model.n_joints
    cols = np.stack([A[names.index(j)] for j in wanted], axis=1)
    with open(os.path.join(args.out_dir, "joint_attention.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(["token", "kind"] + wanted) + "\n")
        for t, row in enumerate(cols):
            kind = names[t] if t < K else f"vertex{t - K}"
            fh.write(",".join([str(t), kind] + [repr(float(x)) for x in row]) + "\n")
    print(f"attention over {len(idx)} samples: {A.shape[0]}x{A.shape[1]} written to {args.out_dir}")


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_suite
    results = run_suite(seed=args.seed, step=args.step, preset=args.preset)
    print(format_table(results))
    if not all(r.passed for r in results):
        raise NumericError("gradient check failed")


def cmd_ablate(args):
    from .synth import Dataset
    from .train import ablate_dim_schemes, ablate_mvm, dim_scheme_configs, model_for_dataset
    ds = Dataset.load(args.data)
    eval_ds = Dataset.load(args.eval_data) if args.eval_data else None
    cfg = _train_config(args)
    if args.sweep in ("dims", "both"):
        # fail before any training if a schedule is invalid at this feature width
        dim_scheme_configs(ds.feature_dim, args.total_layers, args.heads, **_encoder_kwargs(args, ds))
    os.makedirs(args.out_dir, exist_ok=True)
    if args.sweep in ("mvm", "both"):
        try:
            caps = [float(c) for c in args.caps.split(",")]
        except ValueError:
            raise ValidationError(f"bad --caps {args.caps!r}") from None
        enc = _encoder_config(args, ds)
        dtype = np.dtype(args.dtype).type
        rows = ablate_mvm(lambda seed: model_for_dataset(ds, enc, seed, dtype), ds, cfg, caps, eval_ds,
                          os.path.join(args.out_dir, "ablate_mvm.csv"))
        _print_rows(rows)
    if args.sweep in ("dims", "both"):
        rows = ablate_dim_schemes(ds, cfg, total_layers=args.total_layers, heads=args.heads, eval_dataset=eval_ds,
                                  path=os.path.join(args.out_dir, "ablate_dims.csv"),
                                  **_encoder_kwargs(args, ds))
        _print_rows(rows)


def _print_rows(rows):
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(f"{r[k]:.6g}" if isinstance(r[k], float) else str(r[k]) for k in keys))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "attention": cmd_attention, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def run(argv=None) -> int:
    """Parse and execute; returns the process exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(args.threads):
            _echo_config(args)
            COMMANDS[args.command](args)
    except (ValidationError, ShapeError, ConfigError, ParseError, AlignmentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:  # FormatError included
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
