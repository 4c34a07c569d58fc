#!/usr/bin/env python3
"""Build the desk-scale MNIST subset used by the training runs.

Source: the `mnist` npm package (v1.1.0), which bundles 10,000 MNIST digits
as JSON arrays of pixel intensities in [0, 1] rounded to three decimals.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_desk.py package/src/digits data/mnist-desk

The digits are shuffled with a fixed seed and split 8,000 / 2,000 into
gzipped IDX files (magic 0x00000803 for images, 0x00000801 for labels).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

ROWS = COLS = 28
TRAIN = 8000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(data) // (ROWS * COLS)
        for i in range(n):
            px = data[i * ROWS * COLS:(i + 1) * ROWS * COLS]
            samples.append((digit, [min(255, max(0, round(v * 255))) for v in px]))
    random.Random(20200712).shuffle(samples)
    splits = {"train": samples[:TRAIN], "t10k": samples[TRAIN:]}
    for name, rows in splits.items():
        images = [p for _, row in rows for p in row]
        labels = [d for d, _ in rows]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(rows), ROWS, COLS], images)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)], labels)
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
