"""Pack per-image conv feature maps saved as ``<image_id>.npy`` (C x H x W) into one FTNS store.

Use it with maps exported from any VGG16 implementation (last conv + ReLU,
512 x 14 x 14 for 224 x 224 inputs):

    python3 scripts/npy_to_ftns.py maps/ features.ftns
"""

import argparse
import os
import sys

import numpy as np

from finetag.features import FeatureMap, save_store


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("src", help="directory of <image_id>.npy files")
    p.add_argument("out", help="FTNS file to write")
    args = p.parse_args()

    names = sorted((n for n in os.listdir(args.src) if n.endswith(".npy")), key=lambda n: int(n[:-4]))
    if not names:
        sys.exit(f"no .npy files in {args.src}")
    maps = (FeatureMap(int(n[:-4]), np.load(os.path.join(args.src, n)).astype(np.float32)) for n in names)
    count = save_store(maps, args.out)
    print(f"wrote {count} feature maps to {args.out}")


if __name__ == "__main__":
    main()
