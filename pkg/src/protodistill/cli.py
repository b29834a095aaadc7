"""Command-line pipeline: data generation, training, distillation, metrics.

Subcommands: gen-data, train-teacher, distill, eval, sweep-tau,
visualize, export-dump. Every run is reproducible: identical inputs,
seed and flags give byte-identical outputs (no timestamps are written).

Exit codes: 0 success, 2 configuration/usage error, 3 data or file
error, 4 numeric error.
"""

import argparse
import csv
import sys
from pathlib import Path

from . import datagen, metrics as M, viz
from .distill import (
    MODES,
    DistillConfig,
    distill,
    mask_bits_from_distances,
    refit_decision_layer,
    train_model,
)
from .errors import ConfigError, DataError, NumericError, UsageError
from .model import (
    PrototypeModel,
    forward,
    load_checkpoint,
    project_prototypes,
    receptive_field,
    save_checkpoint,
    student_config,
    teacher_config,
    top1_accuracy,
)
from .serialize import float_key, write_json
from .tensor import subseed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_split(data_dir, split: str) -> datagen.Dataset:
    return datagen.load(Path(data_dir) / split)


def _spec_from_args(args) -> datagen.SyntheticSpec:
    return datagen.SyntheticSpec(
        num_classes=args.classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        image_size=args.image_size,
        motifs_per_class=args.motifs_per_class,
        motif_size=args.motif_size,
        palette=(args.palette[0], args.palette[1]),
        background_seed=args.background_seed,
        jitter=args.jitter,
        noise_sigma=args.noise_sigma,
    )


def _model_config(arch: str, num_classes: int, input_size: int, args):
    factory = {"teacher": teacher_config, "student": student_config}[arch]
    return factory(num_classes=num_classes,
                   prototypes_per_class=args.prototypes_per_class,
                   proto_dim=args.proto_dim,
                   input_size=input_size)


def _add_model_flags(parser, default_arch: str):
    parser.add_argument("--arch", choices=["teacher", "student"], default=default_arch,
                        help="backbone preset (4 stride-2 blocks vs 2 stride-4 blocks)")
    parser.add_argument("--proto-dim", type=int, default=32)
    parser.add_argument("--prototypes-per-class", type=int, default=5)


def _add_train_flags(parser, epochs: int):
    parser.add_argument("--epochs", type=int, default=epochs)
    parser.add_argument("--lr", type=float, default=1e-2)
    parser.add_argument("--momentum", type=float, default=0.9)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--lambda-cluster", type=float, default=0.8)
    parser.add_argument("--lambda-sep", type=float, default=0.08)
    parser.add_argument("--refit-epochs", type=int, default=10,
                        help="post-projection decision-layer refit epochs (0 disables)")


def _metrics_table(rows, tau: float) -> str:
    header = f"{'Setting':<28} {'AAP':>8} {'AJS':>8} {'PMS':>8} {'Top-1':>8}"
    lines = [f"tau_test={float_key(tau)}", header, "-" * len(header)]
    for name, rep in rows:
        lines.append(f"{name:<28} {rep.aap_student:>8.3f} {rep.ajs:>8.4f} "
                     f"{rep.pms:>8.4f} {100.0 * rep.top1_student:>8.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    spec = _spec_from_args(args)
    train, test = datagen.generate(spec, args.seed)
    out = Path(args.out)
    datagen.save(train, out / "train")
    datagen.save(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test images under {out}")


def cmd_train_teacher(args) -> None:
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    config = _model_config(args.arch, train.spec.num_classes, train.spec.image_size, args)
    model = PrototypeModel.initialize(config, subseed(args.seed, "init", args.arch))
    history = train_model(model, train, epochs=args.epochs, lr=args.lr,
                            momentum=args.momentum, batch_size=args.batch_size,
                            seed=args.seed, lambda_cluster=args.lambda_cluster,
                            lambda_sep=args.lambda_sep)
    if args.epochs > 0:
        project_prototypes(model, train)
        if args.refit_epochs > 0:
            refit_decision_layer(model, train, epochs=args.refit_epochs, lr=args.lr,
                                 momentum=args.momentum, batch_size=args.batch_size,
                                 seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_checkpoint(model, ckpt)
    write_json(out / "trainlog.json", {
        "command": "train-teacher",
        "seed": args.seed,
        "data": str(args.data),
        "model_config": config.to_dict(),
        "train_params": {
            "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
            "batch_size": args.batch_size, "lambda_cluster": args.lambda_cluster,
            "lambda_sep": args.lambda_sep, "refit_epochs": args.refit_epochs,
        },
        "epoch_stats": [h.to_dict() for h in history],
        "final_train_accuracy": top1_accuracy(model, train),
        "final_test_accuracy": top1_accuracy(model, test),
        "checkpoint": ckpt.name,
    })
    print(f"teacher checkpoint written to {ckpt}")


def _distill_config(args) -> DistillConfig:
    return DistillConfig(
        mode=args.mode,
        tau_train=args.tau_train,
        tau_test=args.tau_test,
        lambda_global=args.lambda_global,
        lambda_ppc=args.lambda_ppc,
        lambda_cluster=args.lambda_cluster,
        lambda_sep=args.lambda_sep,
        reuse_decision_module=args.reuse_decision_module,
        use_model_loss=not args.no_model_loss,
        ppc_normalize=args.ppc_normalize,
        lr=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
    )


def cmd_distill(args) -> None:
    teacher = load_checkpoint(args.teacher)
    train = _load_split(args.data, "train")
    config = _model_config(args.arch, teacher.config.num_classes,
                           teacher.config.input_size, args)
    student = PrototypeModel.initialize(config, subseed(args.seed, "init", args.arch))
    dconfig = _distill_config(args)
    history = distill(teacher, student, train, dconfig, seed=args.seed)
    if args.epochs > 0:
        project_prototypes(student, train)
        # a reused decision module stays byte-equal to the teacher's
        if args.refit_epochs > 0 and not dconfig.reuse_decision_module:
            refit_decision_layer(student, train, epochs=args.refit_epochs, lr=args.lr,
                                 momentum=args.momentum, batch_size=args.batch_size,
                                 seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    save_checkpoint(student, ckpt)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_model", "loss_global",
                         "loss_ppc", "accuracy"])
        for epoch, stats in enumerate(history):
            writer.writerow([epoch, repr(stats.loss_total), repr(stats.loss_model),
                             repr(stats.loss_global), repr(stats.loss_ppc),
                             repr(stats.accuracy)])
    write_json(out / "manifest.json", {
        "command": "distill",
        "seed": args.seed,
        "data": str(args.data),
        "teacher_checkpoint": str(args.teacher),
        "student_config": config.to_dict(),
        "distill_config": dconfig.to_dict(),
        "refit_epochs": args.refit_epochs,
        "epoch_stats": [h.to_dict() for h in history],
        "checkpoint": ckpt.name,
    })
    print(f"student ({args.mode}) checkpoint written to {ckpt}")


def cmd_eval(args) -> None:
    teacher = load_checkpoint(args.teacher)
    students = [(Path(p), load_checkpoint(p)) for p in args.student]
    dataset = _load_split(args.data, args.split)
    report_rows = []
    text_blocks = []
    for tau in args.taus:
        rows = [("teacher", M.evaluate_pair(teacher, teacher, dataset, tau))]
        for path, student in students:
            rows.append((f"student:{path.parent.name or path.stem}",
                         M.evaluate_pair(teacher, student, dataset, tau)))
        text_blocks.append(_metrics_table(rows, tau))
        for name, rep in rows:
            doc = rep.to_dict()
            doc["setting"] = name
            report_rows.append(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", {
        "command": "eval",
        "data": str(args.data),
        "split": args.split,
        "teacher_checkpoint": str(args.teacher),
        "student_checkpoints": [str(p) for p, _ in students],
        "taus": list(args.taus),
        "rows": report_rows,
    })
    text = "\n\n".join(text_blocks) + "\n"
    (out / "report.txt").write_text(text, encoding="ascii")
    print(text, end="")


def cmd_sweep_tau(args) -> None:
    if not args.taus:
        raise UsageError("sweep-tau needs at least one tau")
    model = load_checkpoint(args.model)
    dataset = _load_split(args.data, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    aaps = [M.aap(model, dataset, tau) for tau in args.taus]
    with open(out / "aap.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "aap"])
        for tau, value in zip(args.taus, aaps):
            writer.writerow([repr(float(tau)), repr(value)])
    viz.write_pgm(out / "aap_curve.pgm", viz.curve_pgm(args.taus, aaps))

    overlay_count = min(args.overlays, len(dataset))
    if overlay_count:
        for img_idx in range(overlay_count):
            image = dataset.images[img_idx]
            _, _, dist, _ = forward(model, image)
            for tau_idx, tau in enumerate(args.taus):
                bits = mask_bits_from_distances(dist, tau)
                rgb = viz.overlay_mask(image, bits)
                viz.write_ppm(out / f"overlay_i{img_idx:03d}_t{tau_idx:02d}.ppm", rgb)
    write_json(out / "sweep.json", {
        "command": "sweep-tau",
        "model_checkpoint": str(args.model),
        "data": str(args.data),
        "split": args.split,
        "taus": list(args.taus),
        "aap": aaps,
        "overlays": overlay_count,
    })
    print(f"AAP over {len(args.taus)} tau values written to {out / 'aap.csv'}")


def cmd_visualize(args) -> None:
    teacher = load_checkpoint(args.teacher)
    students = [(Path(p), load_checkpoint(p)) for p in args.student]
    train = _load_split(args.data, "train")
    if teacher.projection is None:
        raise UsageError(f"teacher checkpoint {args.teacher} has no projection report")
    for path, student in students:
        if student.projection is None:
            raise UsageError(f"student checkpoint {path} has no projection report")

    q_teacher = M.prototype_id_lists(teacher, train)
    matches = []
    for _, student in students:
        score = M.modified_jaccard_matrix(q_teacher, M.prototype_id_lists(student, train))
        assignment, _ = M.hungarian(score, maximize=True)
        matches.append((assignment, score))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for p, rec in enumerate(teacher.projection):
        rect = receptive_field(teacher.config, rec["i"], rec["j"])
        panels = [viz.crop(train.images[rec["image_index"]], rect)]
        entry = {"prototype": p, "teacher": dict(rec), "students": []}
        for s_idx, (_, student) in enumerate(students):
            assignment, score = matches[s_idx]
            q = int(assignment[p])
            srec = student.projection[q]
            srect = receptive_field(student.config, srec["i"], srec["j"])
            panels.append(viz.crop(train.images[srec["image_index"]], srect))
            entry["students"].append({
                "matched_prototype": q,
                "match_score": float(score[p, q]),
                "projection": dict(srec),
            })
        viz.write_pgm(out / f"prototype_{p:03d}.pgm", viz.hstack_panels(panels))
        index.append(entry)
    write_json(out / "index.json", {
        "command": "visualize",
        "teacher_checkpoint": str(args.teacher),
        "student_checkpoints": [str(p) for p, _ in students],
        "data": str(args.data),
        "prototypes": index,
    })
    print(f"wrote {len(index)} prototype panels to {out}")


def cmd_export_dump(args) -> None:
    model = load_checkpoint(args.model)
    dataset = _load_split(args.data, args.split)
    dump = M.export_dump(model, dataset, args.taus, model_id=str(args.model))
    write_json(args.out, dump)
    print(f"activation dump written to {args.out}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protodistill",
        description="Train prototype-part classifiers, distill them, and "
                    "measure interpretability transfer.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic parts dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--train-per-class", type=int, default=40)
    p.add_argument("--test-per-class", type=int, default=10)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--motifs-per-class", type=int, default=3)
    p.add_argument("--motif-size", type=int, default=10)
    p.add_argument("--palette", type=float, nargs=2, default=[0.05, 0.95])
    p.add_argument("--background-seed", type=int, default=7)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train a prototype model on the model loss")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_model_flags(p, default_arch="teacher")
    _add_train_flags(p, epochs=30)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--mode", choices=list(MODES), default="proto2proto")
    p.add_argument("--tau-train", type=float, default=1.0)
    p.add_argument("--tau-test", type=float, default=1.0)
    p.add_argument("--lambda-global", type=float, default=2.0)
    p.add_argument("--lambda-ppc", type=float, default=2.0)
    p.add_argument("--reuse-decision-module", action="store_true")
    p.add_argument("--no-model-loss", action="store_true",
                   help="drop the model loss (only valid with --reuse-decision-module)")
    p.add_argument("--ppc-normalize", action="store_true",
                   help="divide each image's patch loss by its active-patch count")
    _add_model_flags(p, default_arch="student")
    _add_train_flags(p, epochs=30)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="metrics table for a teacher and students")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", action="append", default=[],
                   help="student checkpoint (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--taus", type=float, nargs="+", default=[1.0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-tau", help="AAP versus tau plus mask overlays")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--taus", type=float, nargs="+", required=True)
    p.add_argument("--overlays", type=int, default=4,
                   help="how many images get per-tau mask overlays")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("visualize", help="projected prototype crops, teacher vs students")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", action="append", default=[])
    p.add_argument("--data", required=True,
                   help="dataset root; crops come from the train split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("export-dump", help="write an activation dump JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--taus", type=float, nargs="+", default=[1.0])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
