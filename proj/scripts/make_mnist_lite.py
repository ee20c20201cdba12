#!/usr/bin/env python3
"""Write the 5,000-image MNIST subset bundled with mlxtend as an IDX file pair.

Usage: make_mnist_lite.py <mlxtend wheel or mnist_5k.csv.gz> <out dir>

The csv rows are 784 pixel values (0..255) followed by the label. The output
is the pair mnist5k-images-idx3-ubyte / mnist5k-labels-idx1-ubyte that
data/mnist-lite/ ships with.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

CSV_IN_WHEEL = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path) -> np.ndarray:
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(CSV_IN_WHEEL)
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    return np.loadtxt(io.StringIO(text), delimiter=",")


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 1
    rows = read_rows(Path(sys.argv[1]))
    pixels = rows[:, :-1].astype(np.uint8)
    labels = rows[:, -1].astype(np.uint8)
    n = pixels.shape[0]
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "mnist5k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(out / "mnist5k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} images to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
