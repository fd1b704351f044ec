"""Command-line front end: prepare / train / score / eval / oracle / replay.

Every command writes its data outputs to files inside --out and a
run-manifest.json recording the effective job, input hashes, and output
hashes; `replay --manifest <path> --out <dir>` re-executes the recorded
job and must reproduce the outputs byte-identically within one build.

Exit codes: 0 success, 2 argument error, 3 I/O error, 4 validation
error, 5 numerical failure, 6 oracle failure. Logs are line-oriented
JSON on stderr; data outputs go to files only.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, canonical_json, load_config
from .dataio import (
    ExperimentSplit,
    LabeledImageSet,
    build_ir_mnist,
    build_mnist_split,
    build_split,
    generate_synthetic_corpus,
    inject_contamination,
    load_image_set,
    load_split_manifest,
    save_split_manifest,
    sha256_array,
    sha256_file,
)
from .distmath import run_identity_suite
from .errors import (
    BadMagicError,
    DimensionOverflowError,
    DivergenceDetectedError,
    NonFiniteLossError,
    TruncatedFileError,
)
from .evalharness import ScoredItem, histogram_csv_rows, make_eval_report
from .ganmodel import GanModel, build_model, train
from .latentsearch import (
    SearchConfig,
    read_scores_csv,
    score_batch,
    write_pgm,
    write_scores_csv,
)

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERICAL = 5
EXIT_ORACLE = 6


def log(level: str, msg: str, **fields):
    line = {"level": level, "msg": msg}
    line.update(fields)
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


def _emit_error(exc: BaseException, code: int):
    payload = {"error": {"type": type(exc).__name__, "message": str(exc),
                         "exit_code": code}}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_run_manifest(out_dir, job: dict, inputs: dict, outputs: list[str],
                       started: str, seed) -> None:
    manifest = {
        "format": "run-manifest/1",
        "tool_version": __version__,
        "command": job["command"],
        "job": job,
        "config_hash": hashlib.sha256(
            canonical_json(job).encode()).hexdigest(),
        "inputs": {str(p): sha256_file(p) for p in inputs.values()},
        "input_paths": {k: str(p) for k, p in inputs.items()},
        "outputs": {name: sha256_file(os.path.join(out_dir, name))
                    for name in outputs},
        "seed": seed,
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out_dir, "run-manifest.json"), "w") as fh:
        fh.write(canonical_json(manifest))
        fh.write("\n")


# ---- job runners (shared by fresh runs and replay) -------------------------

def run_prepare(job: dict, out_dir) -> int:
    started = _now()
    os.makedirs(out_dir, exist_ok=True)
    ds = job["dataset"]
    kind = ds["kind"]
    seed = job["seed"]
    inputs = {}
    if kind == "synthetic":
        data = generate_synthetic_corpus(ds["n"], ds["defect_rate"], ds["seed"])
        source_desc = {"kind": "synthetic", "n": ds["n"],
                       "defect_rate": ds["defect_rate"], "seed": ds["seed"],
                       "sha256": sha256_array(data.images)}
        split = build_split(data, 0, seed)
    elif kind == "idx":
        inputs = {"images": ds["images"], "labels": ds["labels"]}
        data = load_image_set(ds["images"], ds["labels"])
        source_desc = {"kind": "idx", "images": ds["images"],
                       "labels": ds["labels"],
                       "sha256_images": sha256_file(ds["images"]),
                       "sha256_labels": sha256_file(ds["labels"])}
        normal_class = job["normal_class"]
        split = build_mnist_split(data, normal_class, seed)
    elif kind == "ir-mnist":
        inputs = {"images": ds["images"], "labels": ds["labels"]}
        digits = load_image_set(ds["images"], ds["labels"])
        split, source_desc = _prepare_ir_mnist(digits, ds, seed)
        normal_class = 0
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")

    fraction = job.get("contamination", 0.0)
    if fraction:
        split = inject_contamination(split, fraction, seed)
    save_split_manifest(os.path.join(out_dir, "split.json"), split, source_desc)
    log("info", "split written", normal_train=int(split.normal_train_idx.size),
        abnormal_train=int(split.abnormal_train_idx.size),
        test=int(split.test_idx.size), contamination=fraction)
    write_run_manifest(out_dir, job, inputs, ["split.json"], started, seed)
    return EXIT_OK


def _prepare_ir_mnist(digits: LabeledImageSet, ds: dict, seed: int):
    n_train, n_test = ds["n_train"], ds["n_test"]
    n_abn = ds["n_abnormal"]
    total_train = n_train + n_test
    total_test = n_abn + n_test
    source_desc = {"kind": "ir-mnist",
                   "digits": {"kind": "idx", "images": ds["images"],
                              "labels": ds["labels"],
                              "sha256_images": sha256_file(ds["images"]),
                              "sha256_labels": sha256_file(ds["labels"])},
                   "excluded_digit": ds["excluded_digit"],
                   "n_train": total_train, "n_test": total_test,
                   "seed": ds["seed"]}
    train_set = build_ir_mnist(digits, ds["excluded_digit"], total_train,
                               ds["seed"], variant="train")
    test_set = build_ir_mnist(digits, ds["excluded_digit"], total_test,
                              ds["seed"], variant="test")
    images = np.concatenate([train_set.images, test_set.images])
    labels = np.concatenate([train_set.labels, test_set.labels])
    source = LabeledImageSet(images, labels, provenance=train_set.provenance)
    offset = total_train
    abnormal_pos = offset + np.flatnonzero(test_set.labels == 1)
    normal_extra = offset + np.flatnonzero(test_set.labels == 0)
    split = ExperimentSplit(
        source=source, normal_class=0, seed=seed,
        normal_train_idx=np.arange(n_train, dtype=np.int64),
        abnormal_train_idx=abnormal_pos[:n_abn].astype(np.int64),
        test_idx=np.concatenate([np.arange(n_train, total_train),
                                 normal_extra,
                                 abnormal_pos[n_abn:]]).astype(np.int64),
        test_labels=np.concatenate([
            np.zeros(n_test + normal_extra.size, dtype=np.int64),
            np.ones(abnormal_pos.size - n_abn, dtype=np.int64)]))
    return split, source_desc


def run_train(job: dict, out_dir) -> int:
    started = _now()
    os.makedirs(out_dir, exist_ok=True)
    cfg = ExperimentConfig.from_dict(job["config"])
    split = load_split_manifest(job["split"])
    normals = split.normal_train()
    abnormals = (np.empty((0, normals.shape[1]))
                 if job.get("no_abnormal") else split.abnormal_train())
    model = build_model(cfg, split.source.image_h, split.source.image_w)
    ckpt_path = os.path.join(out_dir, "model.nadt")
    try:
        report = train(model, normals, abnormals, cfg,
                       checkpoint_path=ckpt_path)
    except DivergenceDetectedError as err:
        log("error", "training diverged", epoch=err.epoch,
            iteration=err.iteration)
        write_run_manifest(out_dir, job, {"split": job["split"]},
                           ["model.nadt"], started, cfg.seed)
        raise
    report.checkpoint_path = "model.nadt"
    with open(os.path.join(out_dir, "train-report.json"), "w") as fh:
        fh.write(canonical_json(report.to_dict()))
        fh.write("\n")
    log("info", "training finished", epochs=cfg.epochs,
        final=report.per_epoch[-1])
    write_run_manifest(out_dir, job, {"split": job["split"]},
                       ["model.nadt", "train-report.json"], started, cfg.seed)
    return EXIT_OK


def _subsample_per_class(test_idx, test_labels, max_per_class):
    if max_per_class is None:
        return np.arange(test_idx.size)
    keep = []
    for cls in (0, 1):
        pos = np.flatnonzero(test_labels == cls)[:max_per_class]
        keep.append(pos)
    return np.sort(np.concatenate(keep))


def run_score(job: dict, out_dir) -> int:
    started = _now()
    os.makedirs(out_dir, exist_ok=True)
    cfg = ExperimentConfig.from_dict(job["config"])
    split = load_split_manifest(job["split"])
    model = GanModel.from_named_params(
        load_checkpoint(job["ckpt"]),
        split.source.image_h, split.source.image_w).freeze()
    scfg = SearchConfig.from_experiment(cfg)
    pick = _subsample_per_class(split.test_idx, split.test_labels,
                                job.get("max_per_class"))
    xs = split.test_images()[pick]
    labels = split.test_labels[pick]
    ids = [str(int(i)) for i in split.test_idx[pick]]
    try:
        results = score_batch(model, xs, scfg, cfg.seed,
                              workers=job.get("workers", 1),
                              item_ids=ids, labels=labels)
    except NonFiniteLossError as err:
        log("error", "non-finite inference loss", item_id=err.item_id,
            trace_position=err.trace_position)
        raise
    write_scores_csv(os.path.join(out_dir, "scores.csv"), results)
    outputs = ["scores.csv"]
    if job.get("residual_maps"):
        maps_dir = os.path.join(out_dir, "maps")
        os.makedirs(maps_dir, exist_ok=True)
        for r in results:
            write_pgm(os.path.join(maps_dir, f"{r.item_id}.pgm"),
                      r.residual_map, model.image_h, model.image_w)
    log("info", "scoring finished", items=len(results),
        n_iters=scfg.n_iters, workers=job.get("workers", 1))
    write_run_manifest(out_dir, job,
                       {"split": job["split"], "ckpt": job["ckpt"]},
                       outputs, started, cfg.seed)
    return EXIT_OK


def run_eval(job: dict, out_dir) -> int:
    started = _now()
    os.makedirs(out_dir, exist_ok=True)
    rows = read_scores_csv(job["scores"])
    items = [ScoredItem(item_id=r["item_id"],
                        true_label=-1 if r["label"] is None else r["label"],
                        score=r["score"]) for r in rows]
    report = make_eval_report(items, bins=job.get("bins", 20))
    with open(os.path.join(out_dir, "eval-report.json"), "w") as fh:
        fh.write(canonical_json(report.to_dict()))
        fh.write("\n")
    with open(os.path.join(out_dir, "histogram.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "class", "count"])
        writer.writerows(histogram_csv_rows(report.histogram))
    log("info", "evaluation finished", auc=report.auc, best_f1=report.best_f1)
    write_run_manifest(out_dir, job, {"scores": job["scores"]},
                       ["eval-report.json", "histogram.csv"], started,
                       job.get("seed", 0))
    return EXIT_OK


def run_oracle(job: dict, out_dir) -> int:
    started = _now()
    os.makedirs(out_dir, exist_ok=True)
    report = run_identity_suite(instances=job.get("instances", 1000),
                                seed=job.get("seed", 0),
                                support_size=job.get("support_size"))
    with open(os.path.join(out_dir, "oracle-report.json"), "w") as fh:
        fh.write(canonical_json(report))
        fh.write("\n")
    for check in report["checks"]:
        log("info", "oracle check", name=check["name"],
            max_abs_error=check["max_abs_error"], ok=check["pass"])
    write_run_manifest(out_dir, job, {}, ["oracle-report.json"], started,
                       job.get("seed", 0))
    return EXIT_OK if report["pass"] else EXIT_ORACLE


_RUNNERS = {"prepare": run_prepare, "train": run_train, "score": run_score,
            "eval": run_eval, "oracle": run_oracle}


def run_replay(job: dict, out_dir) -> int:
    with open(job["manifest"]) as fh:
        manifest = json.load(fh)
    inner = manifest["job"]
    log("info", "replaying", command=inner["command"],
        config_hash=manifest["config_hash"])
    return _RUNNERS[inner["command"]](inner, out_dir)


# ---- argument parsing -------------------------------------------------------

def _positive_float(name, lo, hi, inclusive_lo=False):
    def convert(text):
        value = float(text)
        ok_lo = value >= lo if inclusive_lo else value > lo
        if not (ok_lo and value <= hi):
            raise argparse.ArgumentTypeError(
                f"{name} must be in {'[' if inclusive_lo else '('}{lo}, {hi}]")
        return value
    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ganodet",
        description="GAN-based anomaly detection robust to contaminated "
                    "normal training data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset split manifest")
    p.add_argument("--dataset", required=True,
                   choices=["synthetic", "mnist", "irmnist"])
    p.add_argument("--images", help="IDX image file (mnist / irmnist)")
    p.add_argument("--labels", help="IDX label file (mnist / irmnist)")
    p.add_argument("--normal-class", type=int, default=0)
    p.add_argument("--n", type=int, default=512,
                   help="synthetic corpus size")
    p.add_argument("--defect-rate",
                   type=_positive_float("defect-rate", 0.0, 1.0, True),
                   default=0.1)
    p.add_argument("--excluded-digit", type=int, default=3)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-abnormal", type=int, default=50)
    p.add_argument("--contamination",
                   type=_positive_float("contamination", 0.0, 0.5, True),
                   default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a split")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=_positive_float("gamma", 0.0, 1.0))
    p.add_argument("--lambda", dest="lam",
                   type=_positive_float("lambda", 0.0, 1.0, True))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--z-dim", type=int)
    p.add_argument("--lr-g", type=float)
    p.add_argument("--lr-d", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--g-loss", choices=["nonsaturating", "literal"])
    p.add_argument("--no-abnormal", action="store_true",
                   help="ignore the known-abnormal pool")

    p = sub.add_parser("score", help="latent-search anomaly scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--n-iters", type=int)
    p.add_argument("--gamma", type=_positive_float("gamma", 0.0, 1.0))
    p.add_argument("--lambda", dest="lam",
                   type=_positive_float("lambda", 0.0, 1.0, True))
    p.add_argument("--seed", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--step-rule", choices=["adam", "gd"])
    p.add_argument("--last-iterate", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-per-class", type=int)
    p.add_argument("--residual-maps", action="store_true")

    p = sub.add_parser("eval", help="metrics from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("oracle", help="exact identity suite")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--support-size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a recorded job")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for flag, field in [("gamma", "gamma"), ("lam", "lam"),
                        ("epochs", "epochs"), ("batch_size", "batch_size"),
                        ("z_dim", "z_dim"), ("lr_g", "lr_g"),
                        ("lr_d", "lr_d"), ("seed", "seed"),
                        ("g_loss", "g_loss"), ("n_iters", "n_iters"),
                        ("restarts", "restarts"), ("step_rule", "step_rule")]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "last_iterate", False):
        overrides["best_iterate"] = False
    return cfg.replaced(**overrides)


def _job_from_args(args) -> dict:
    if args.command == "prepare":
        if args.dataset == "synthetic":
            dataset = {"kind": "synthetic", "n": args.n,
                       "defect_rate": args.defect_rate, "seed": args.seed}
        elif args.dataset == "mnist":
            if not args.images or not args.labels:
                raise argparse.ArgumentTypeError(
                    "--images and --labels are required for mnist")
            dataset = {"kind": "idx", "images": os.path.abspath(args.images),
                       "labels": os.path.abspath(args.labels)}
        else:
            if not args.images or not args.labels:
                raise argparse.ArgumentTypeError(
                    "--images and --labels are required for irmnist")
            dataset = {"kind": "ir-mnist",
                       "images": os.path.abspath(args.images),
                       "labels": os.path.abspath(args.labels),
                       "excluded_digit": args.excluded_digit,
                       "n_train": args.n_train, "n_test": args.n_test,
                       "n_abnormal": args.n_abnormal, "seed": args.seed}
        return {"command": "prepare", "dataset": dataset, "seed": args.seed,
                "normal_class": args.normal_class,
                "contamination": args.contamination}
    if args.command == "train":
        cfg = _effective_config(args)
        return {"command": "train", "config": cfg.to_dict(),
                "split": os.path.abspath(args.split),
                "no_abnormal": bool(args.no_abnormal)}
    if args.command == "score":
        cfg = _effective_config(args)
        return {"command": "score", "config": cfg.to_dict(),
                "ckpt": os.path.abspath(args.ckpt),
                "split": os.path.abspath(args.split),
                "workers": args.workers,
                "max_per_class": args.max_per_class,
                "residual_maps": bool(args.residual_maps)}
    if args.command == "eval":
        return {"command": "eval", "scores": os.path.abspath(args.scores),
                "bins": args.bins}
    if args.command == "oracle":
        return {"command": "oracle", "instances": args.instances,
                "seed": args.seed, "support_size": args.support_size}
    if args.command == "replay":
        return {"command": "replay",
                "manifest": os.path.abspath(args.manifest)}
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        job = _job_from_args(args)
    except argparse.ArgumentTypeError as err:
        _emit_error(err, EXIT_ARGS)
        return EXIT_ARGS
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else EXIT_ARGS

    try:
        if job["command"] == "replay":
            return run_replay(job, args.out)
        return _RUNNERS[job["command"]](job, args.out)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as err:
        _emit_error(err, EXIT_IO)
        return EXIT_IO
    except (BadMagicError, TruncatedFileError, DimensionOverflowError) as err:
        _emit_error(err, EXIT_VALIDATION)
        return EXIT_VALIDATION
    except (DivergenceDetectedError, NonFiniteLossError,
            FloatingPointError) as err:
        _emit_error(err, EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    except OSError as err:
        _emit_error(err, EXIT_IO)
        return EXIT_IO
    except (ValueError, KeyError) as err:
        _emit_error(err, EXIT_VALIDATION)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
