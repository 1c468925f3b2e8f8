#!/usr/bin/env python3
"""Rebuild data/mnist/ from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist

Pixels are stored there as 3-decimal floats in [0, 1]; round(v * 255) recovers
the original bytes. The digits are shuffled with a fixed seed and split
8000 train / 2000 test. Output files are gzipped IDX (big-endian, magic
0x00000803 for images and 0x00000801 for labels).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main():
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784])
            samples.append((px, digit))
    random.Random(20211206).shuffle(samples)
    splits = {"train": samples[:8000], "t10k": samples[8000:]}
    for name, rows in splits.items():
        with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
            for px, _ in rows:
                f.write(px)
        with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x00000801, len(rows)))
            f.write(bytes(label for _, label in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
