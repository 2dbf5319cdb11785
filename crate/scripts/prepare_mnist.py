#!/usr/bin/env python3
"""Build IDX files from the 10,000-digit MNIST sample bundled in the `mnist` npm package.

Usage:
    npm pack mnist            # fetches mnist-1.1.0.tgz
    python3 scripts/prepare_mnist.py mnist-1.1.0.tgz data/mnist

Pixels in the package are byte/255 rounded to three decimals, so rounding
value*255 recovers the original bytes exactly. The 10,000 digits are shuffled
with a fixed seed and split 8,000 train / 2,000 test.
"""

import json
import random
import struct
import sys
import tarfile
from pathlib import Path

TRAIN = 8000


def read_digits(src: Path):
    samples = []
    if src.is_dir():
        def load(d):
            return json.loads((src / "src" / "digits" / f"{d}.json").read_text())
    else:
        tar = tarfile.open(src)

        def load(d):
            return json.load(tar.extractfile(f"package/src/digits/{d}.json"))

    for digit in range(10):
        flat = load(digit)["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pixels = bytes(int(round(v * 255.0)) for v in flat[i : i + 784])
            samples.append((pixels, digit))
    return samples


def write_idx(out: Path, prefix: str, samples):
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = read_digits(src)
    random.Random(0).shuffle(samples)
    write_idx(out, "train", samples[:TRAIN])
    write_idx(out, "t10k", samples[TRAIN:])
    print(f"wrote {TRAIN} train / {len(samples) - TRAIN} test samples to {out}")


if __name__ == "__main__":
    main()
