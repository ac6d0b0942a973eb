"""Build gzip IDX files from the digit JSON shipped in the npm `mnist` package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist

Writes a stratified-shuffled training subset and a disjoint test set.
"""

import argparse
import gzip
import hashlib
import json
import pathlib
import struct

import numpy as np


def load(digits_dir):
    images, labels = [], []
    for d in range(10):
        raw = json.loads((digits_dir / f"{d}.json").read_text())["data"]
        arr = np.rint(np.asarray(raw, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)
        arr = arr.reshape(-1, 28 * 28)
        images.append(arr)
        labels.append(np.full(len(arr), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(path, images, labels):
    with gzip.GzipFile(path / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(path / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = load(args.digits_dir)
    order = np.random.RandomState(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]
    splits = {
        "train": slice(0, args.train),
        "test": slice(args.train, args.train + args.test),
    }
    for name, sl in splits.items():
        out = args.out_dir / name
        out.mkdir(parents=True, exist_ok=True)
        write_idx(out, images[sl], labels[sl])
    sums = []
    for p in sorted(args.out_dir.rglob("*.gz")):
        sums.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(args.out_dir)}")
    (args.out_dir / "SHA256SUMS").write_text("\n".join(sums) + "\n")


if __name__ == "__main__":
    main()
