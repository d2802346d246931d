#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package (10,000 MNIST
samples, pixels stored as floats in [0, 1]) into gzipped IDX files.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, dst, n_test=2000, seed=2018):
    samples = []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((px, digit))
    random.Random(seed).shuffle(samples)
    test, train = samples[:n_test], samples[n_test:]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("t10k", test)):
        imgs = [p for px, _ in part for p in px]
        labels = [d for _, d in part]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(part), 28, 28], imgs)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(part)], labels)
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
