"""``finetag`` command line: convert -> fit-projection -> train -> eval, plus param-count and synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Every data-producing subcommand writes a manifest recording its resolved
configuration, seed and the SHA-256 of each input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings

from . import __version__
from .data import (
    CUB_GROUP_SIZE_RANGE,
    AttributeVocabulary,
    DatasetSplit,
    LabelMatrix,
    build_label_matrix,
    count_images,
    make_split,
    parse_vocabulary,
    read_label_matrix,
    write_label_matrix,
)
from .errors import ConfigMismatch, ConvergenceWarning, FineTagError, MissingFile, RankDeficient
from .features import FeatureMap, FeatureStore, save_store
from .metrics import evaluate
from .model import ModelConfig, init_params, ratio_report, read_checkpoint, write_checkpoint
from .projection import (
    DEFAULT_COMPONENTS,
    DEFAULT_MAX_ITER,
    DEFAULT_PER_IMAGE,
    DEFAULT_TOL,
    fit_fastica,
    fit_pca,
    read_basis,
    sample_locations,
    write_basis,
)
from .trainer import DEFAULT_LR, TrainConfig, predict, train

log = logging.getLogger("finetag")

CUB_FILES = {
    "attributes": "attributes.txt",
    "labels": "image_attribute_labels.txt",
    "images": "images.txt",
    "split": "train_test_split.txt",
}


# -- helpers ----------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, subcommand, config, inputs, outputs):
    manifest = {
        "tool": "finetag",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": {k: {"path": os.path.basename(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path):
    if not os.path.exists(path):
        raise MissingFile(f"{path} does not exist")
    return path


def _find_cub_file(cub_dir, name):
    for cand in (os.path.join(cub_dir, name),
                 os.path.join(cub_dir, "attributes", name),
                 os.path.join(cub_dir, os.pardir, name)):
        if os.path.isfile(cand):
            return os.path.normpath(cand)
    raise MissingFile(f"{name} not found under {cub_dir}")


def _load_labels(path):
    with open(_require(path), "rb") as fh:
        return read_label_matrix(fh)


def _load_split(path):
    with open(_require(path)) as fh:
        return DatasetSplit.from_json(json.load(fh))


def _load_vocab(path):
    with open(_require(path)) as fh:
        return AttributeVocabulary.from_json(json.load(fh))


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- subcommands ------------------------------------------------------------

def cmd_convert(args):
    paths = {key: _find_cub_file(args.cub_dir, name) for key, name in CUB_FILES.items()}
    with open(paths["attributes"]) as fh:
        vocab = parse_vocabulary(fh, CUB_GROUP_SIZE_RANGE, source=paths["attributes"])
    with open(paths["images"]) as fh:
        num_images = count_images(fh, source=paths["images"])
    with open(paths["labels"]) as fh:
        matrix = build_label_matrix(fh, vocab, num_images, strict=args.strict, source=paths["labels"])
    with open(paths["split"]) as fh:
        split = make_split(fh, args.val_size, args.seed, source=paths["split"])

    os.makedirs(args.out, exist_ok=True)
    out_labels = os.path.join(args.out, "labels.ftlm")
    out_split = os.path.join(args.out, "split.json")
    out_vocab = os.path.join(args.out, "vocab.json")
    with open(out_labels, "wb") as fh:
        write_label_matrix(matrix, fh)
    _write_text(out_split, split.dumps())
    _write_text(out_vocab, json.dumps(vocab.to_json(), indent=1, sort_keys=True) + "\n")
    _write_manifest(os.path.join(args.out, "manifest.json"), "convert",
                    {"val_size": args.val_size, "seed": args.seed, "strict": args.strict},
                    paths, [out_labels, out_split, out_vocab])

    print(f"{matrix.rows} x {matrix.cols}")
    print(f"groups: {len(vocab.groups())}")
    print(f"train: {len(split.train_ids)}  val: {len(split.val_ids)}  test: {len(split.test_ids)}")
    empty = len(matrix.empty_rows())
    if empty:
        print(f"images without positive attributes: {empty}")
    return 0


def cmd_fit_projection(args):
    store = FeatureStore.open(_require(args.features))
    split = _load_split(args.split)
    if args.components > store.channels:
        raise RankDeficient(f"--components={args.components} exceeds the store's {store.channels} channels")
    bank = sample_locations(store, split.train_ids, args.per_image, args.seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        if args.method == "pca":
            basis = fit_pca(bank, args.components)
        else:
            basis = fit_fastica(bank, args.components, args.max_iter, args.tol, seed=args.seed)
    for w in caught:
        log.warning("%s", w.message)

    projected = (bank.samples @ basis.weights + basis.bias)
    diagnostics = {
        "method": basis.method,
        "components": args.components,
        "channels": store.channels,
        "samples": int(bank.samples.shape[0]),
        "iterations": basis.n_iter,
        "converged": basis.converged,
        "projected_variance": [float(v) for v in projected.var(axis=0)],
    }
    with open(args.out, "wb") as fh:
        write_basis(basis, fh)
    diag_path = args.out + ".json"
    _write_text(diag_path, json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    _write_manifest(args.out + ".manifest.json", "fit-projection",
                    {"method": args.method, "components": args.components, "per_image": args.per_image,
                     "seed": args.seed, "max_iter": args.max_iter, "tol": args.tol},
                    {"features": args.features, "split": args.split}, [args.out, diag_path])
    status = "converged" if basis.converged else "NOT converged"
    print(f"{basis.method} basis {store.channels} -> {args.components} from {bank.samples.shape[0]} samples "
          f"({basis.n_iter} iterations, {status})")
    return 0


def cmd_train(args):
    store = FeatureStore.open(_require(args.features))
    labels = _load_labels(args.labels)
    split = _load_split(args.split)
    with open(_require(args.projection), "rb") as fh:
        basis = read_basis(fh)
    if basis.channels != store.channels:
        raise ConfigMismatch(f"projection expects {basis.channels} channels, store has {store.channels}")
    for image_id in split.train_ids + split.val_ids:
        if image_id not in store:
            raise ConfigMismatch(f"split image {image_id} missing from {args.features}")
        labels.row_index(image_id)

    config = ModelConfig(store.channels, basis.components, labels.cols, dtype="f64",
                         bcnn_normalize=args.bcnn_normalize)
    tcfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs, loss=args.loss,
                       optimizer=args.optimizer, seed=args.seed, momentum=args.momentum,
                       hinge_sum=args.hinge_sum, threads=args.threads, debug=args.debug)
    params = init_params(config, basis, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    params, history = train(config, params, store, labels, split, tcfg, out_dir=args.out_dir)

    model_path = os.path.join(args.out_dir, "model.ftmd")
    with open(model_path, "wb") as fh:
        write_checkpoint(config, params, fh)
    resolved = {"model": config.to_json(), "train": {k: v for k, v in vars(tcfg).items() if k != "threads"}}
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), "train", resolved,
                    {"features": args.features, "labels": args.labels, "split": args.split,
                     "projection": args.projection},
                    [model_path, os.path.join(args.out_dir, "history.jsonl")])
    for rec in history:
        val = "n/a" if rec["val_avgprec"] is None else f"{rec['val_avgprec']:.4f}"
        print(f"epoch {rec['epoch']:3d}  loss {rec['mean_loss']:.6f}  val_avgprec {val}  skipped {rec['skipped']}")
    return 0


def cmd_eval(args):
    with open(_require(args.checkpoint), "rb") as fh:
        config, params = read_checkpoint(fh)
    store = FeatureStore.open(_require(args.features))
    labels = _load_labels(args.labels)
    split = _load_split(args.split)
    if store.channels != config.channels:
        raise ConfigMismatch(f"checkpoint expects {config.channels} channels, store has {store.channels}")
    if labels.cols != config.num_classes:
        raise ConfigMismatch(f"checkpoint predicts {config.num_classes} labels, matrix has {labels.cols}")
    vocab_path = args.vocab or os.path.join(os.path.dirname(os.path.abspath(args.labels)), "vocab.json")
    if os.path.exists(vocab_path):
        vocab = _load_vocab(vocab_path)
        if vocab.num_attributes != labels.cols:
            raise ConfigMismatch(f"vocabulary has {vocab.num_attributes} attributes, matrix has {labels.cols}")
        groups, names = vocab.groups(), vocab.names
    else:
        vocab_path = None
        groups, names = {"all": list(range(labels.cols))}, []

    ids = split.subset(args.subset)
    logits = predict(params, store, ids, config.bcnn_normalize, args.threads)
    report = evaluate(logits, labels.rows_for(ids), groups, names, ties=args.ties)

    os.makedirs(args.out, exist_ok=True)
    outputs = {
        "summary.json": report.summary_json(),
        "per_label.csv": report.per_label_csv(),
        "per_group.csv": report.per_group_csv(),
        "ap_vs_frequency.csv": report.ap_vs_frequency_csv(),
    }
    for name, text in outputs.items():
        _write_text(os.path.join(args.out, name), text)
    inputs = {"checkpoint": args.checkpoint, "features": args.features, "labels": args.labels, "split": args.split}
    if vocab_path:
        inputs["vocab"] = vocab_path
    _write_manifest(os.path.join(args.out, "manifest.json"), "eval", {"subset": args.subset, "ties": args.ties},
                    inputs, [os.path.join(args.out, n) for n in outputs])
    wmap = "undefined" if report.wmap_overall is None else f"{report.wmap_overall:.4f}"
    print(f"{args.subset}: {len(ids)} images  AVGPREC {report.avgprec_mean:.4f}  W_MAP {wmap}  "
          f"skipped {report.skipped_images}")
    return 0


def cmd_param_count(args):
    for name in ("channels", "components", "num_classes"):
        if getattr(args, name) < 1:
            raise FineTagError(f"--{name.replace('_', '-')} must be positive")
    config = ModelConfig(args.channels, args.components, args.num_classes)
    rep = ratio_report(config)
    print(f"{'head (projection + bilinear FC)':<34}{rep['head']:>14,d}")
    print(f"{'baseline VGG16 FC layers':<34}{rep['baseline_fc']:>14,d}")
    print(f"{'ratio':<34}{rep['ratio']:>14.2f}")
    if 35 <= rep["ratio"] <= 42:
        print("consistent with the reported 40x reduction")
    return 0


def cmd_synth(args):
    """Planted toy bundle: ids 1..train train, then val, then test."""
    from .oracles import make_planted

    total = args.train + args.val + args.test
    ds = make_planted(num_images=total, channels=args.channels, height=args.size, width=args.size,
                      num_labels=args.num_labels, seed=args.seed)
    ids = ds.image_ids
    os.makedirs(args.out, exist_ok=True)
    save_store([FeatureMap(i, f) for i, f in zip(ids, ds.features)], os.path.join(args.out, "features.ftns"))
    with open(os.path.join(args.out, "labels.ftlm"), "wb") as fh:
        write_label_matrix(LabelMatrix(ds.labels, ids), fh)
    split = DatasetSplit(ids[:args.train], ids[args.train:args.train + args.val], ids[args.train + args.val:],
                         args.seed)
    _write_text(os.path.join(args.out, "split.json"), split.dumps())
    half = (args.num_labels + 1) // 2
    vocab = AttributeVocabulary([(j + 1, "group_a" if j < half else "group_b", f"v{j + 1}")
                                 for j in range(args.num_labels)])
    _write_text(os.path.join(args.out, "vocab.json"), json.dumps(vocab.to_json(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {total} planted images ({args.channels}x{args.size}x{args.size}, {args.num_labels} labels) "
          f"to {args.out}")
    return 0


# -- argument parsing -------------------------------------------------------

def _threads_default():
    try:
        return max(1, int(os.environ.get("FINETAG_THREADS", "1")))
    except ValueError:
        return 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_threads_default(),
                        help="worker threads (default $FINETAG_THREADS or 1; 1 is bit-reproducible)")
    common.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="finetag", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"finetag {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", parents=[common], help="CUB annotations -> label matrix, split, vocabulary")
    s.add_argument("--cub-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--val-size", type=int, default=700)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--strict", action="store_true", help="require all five annotation columns")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("fit-projection", parents=[common], help="fit the ICA/PCA 1x1 projection")
    s.add_argument("--features", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--method", choices=("ica", "pca"), default="ica")
    s.add_argument("--components", type=int, default=DEFAULT_COMPONENTS, choices=range(3, 101),
                   metavar="{3..100}")
    s.add_argument("--per-image", type=int, default=DEFAULT_PER_IMAGE)
    s.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_projection)

    s = sub.add_parser("train", parents=[common], help="train the head")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--projection", required=True)
    s.add_argument("--loss", choices=("smooth", "hinge"), default="smooth")
    s.add_argument("--hinge-sum", action="store_true", help="sum the hinge over all pairs instead of the worst pair")
    s.add_argument("--optimizer", choices=("adam", "momentum"), default="adam")
    s.add_argument("--lr", type=float, default=None,
                   help=f"default {DEFAULT_LR['adam']:g} for adam, {DEFAULT_LR['momentum']:g} for momentum")
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--bcnn-normalize", action="store_true", help="signed sqrt + L2 after pooling")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--debug", action="store_true", help="check parameters are finite after every step")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True, help="split JSON written by convert")
    s.add_argument("--subset", choices=("train", "val", "test"), default="test")
    s.add_argument("--vocab", default=None, help="vocabulary JSON (default: vocab.json next to --labels)")
    s.add_argument("--ties", choices=("index", "optimistic", "pessimistic"), default="index")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("param-count", parents=[common], help="head vs VGG16-FC parameter counts")
    s.add_argument("--channels", type=int, default=512)
    s.add_argument("--components", type=int, default=20)
    s.add_argument("--num-classes", type=int, default=312)
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("synth", parents=[common], help="write a planted toy bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", type=int, default=200)
    s.add_argument("--val", type=int, default=50)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--size", type=int, default=2)
    s.add_argument("--num-labels", type=int, default=6)
    s.set_defaults(func=cmd_synth)
    return p


def _report_error(args, exc, code):
    if getattr(args, "json_errors", False):
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"finetag: error: {exc}", file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FineTagError as exc:
        _report_error(args, exc, exc.exit_code)
        return exc.exit_code
    except FileNotFoundError as exc:
        _report_error(args, MissingFile(str(exc)), 2)
        return 2
    except (OSError, ValueError) as exc:
        _report_error(args, exc, 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
