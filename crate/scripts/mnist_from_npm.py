#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

The package ships 10,000 MNIST training digits as JSON arrays of pixel
intensities quantised to 1/255 steps. This script restores the byte values,
interleaves the ten classes, applies a fixed shuffle and writes

    train-images-idx3-ubyte
    train-labels-idx1-ubyte

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
PIXELS = SIDE * SIDE


def main(digits_dir: Path, out_dir: Path) -> None:
    per_class = []
    for label in range(10):
        raw = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        assert len(raw) % PIXELS == 0
        per_class.append(
            [raw[i * PIXELS:(i + 1) * PIXELS] for i in range(len(raw) // PIXELS)]
        )

    order = [
        (label, i)
        for i in range(max(len(c) for c in per_class))
        for label in range(10)
        if i < len(per_class[label])
    ]
    random.Random(20160101).shuffle(order)

    images = bytearray()
    labels = bytearray()
    for label, i in order:
        images.extend(min(255, max(0, round(v * 255))) for v in per_class[label][i])
        labels.append(label)

    out_dir.mkdir(parents=True, exist_ok=True)
    count = len(order)
    with open(out_dir / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, count, SIDE, SIDE))
        f.write(images)
    with open(out_dir / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, count))
        f.write(labels)
    print(f"wrote {count} samples to {out_dir}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
