"""Train on the planted toy set for several seeds and report loss reduction and validation AVGPREC.

    python3 scripts/planted_seed_sweep.py --seeds 0-7 --epochs 30 --lr 1e-3
"""

import argparse
import time
import warnings

from finetag.data import DatasetSplit, LabelMatrix
from finetag.features import FeatureMap, FeatureStore, write_store
from finetag.model import ModelConfig, init_params
from finetag.oracles import make_planted
from finetag.projection import fit_fastica, fit_pca, sample_locations
from finetag.trainer import TrainConfig, mean_loss, train


def seed_range(text):
    lo, _, hi = text.partition("-")
    return list(range(int(lo), int(hi or lo) + 1))


def build(seed, n_train, n_val):
    import io

    ds = make_planted(num_images=n_train + n_val, seed=seed)
    ids = ds.image_ids
    buf = io.BytesIO()
    write_store([FeatureMap(i, f) for i, f in zip(ids, ds.features)], buf)
    split = DatasetSplit(ids[:n_train], ids[n_train:], [], seed)
    return FeatureStore(buf.getvalue()), LabelMatrix(ds.labels, ids), split


def run_one(seed, args, loss):
    store, labels, split = build(seed, args.train, args.val)
    config = ModelConfig(store.channels, args.components, labels.cols)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bank = sample_locations(store, split.train_ids, 4, seed=0)
        if args.method == "ica":
            basis = fit_fastica(bank, args.components, seed=0)
        else:
            basis = fit_pca(bank, args.components)
    params = init_params(config, basis, seed=0)
    initial = mean_loss(params, store, labels, split.train_ids, loss)
    tcfg = TrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs, loss=loss, seed=0)
    start = time.perf_counter()
    params, history = train(config, params, store, labels, split, tcfg)
    final = mean_loss(params, store, labels, split.train_ids, loss)
    return initial, final, history[-1]["val_avgprec"], time.perf_counter() - start


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=seed_range, default=seed_range("0-7"))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--method", choices=("ica", "pca"), default="ica")
    args = p.parse_args()

    print(f"{'seed':>4} {'loss':>6} {'init':>8} {'final':>8} {'ratio':>6} {'val':>7} {'secs':>5}")
    for seed in args.seeds:
        for loss in ("smooth", "hinge"):
            initial, final, val, secs = run_one(seed, args, loss)
            print(f"{seed:>4} {loss:>6} {initial:8.4f} {final:8.4f} {final / initial:6.3f} {val:7.4f} {secs:5.1f}")


if __name__ == "__main__":
    main()
