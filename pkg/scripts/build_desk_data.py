"""Build the desk-scale MNIST / FashionMNIST IDX files under data/.

The raw pixels come from the ``mnist`` (10,000 digits, pixels stored as
3-decimal floats) and ``fashion-mnist`` (70,000 images, uint8) npm packages.
Samples are shuffled with a fixed seed and written as gzip IDX files:

    data/mnist-desk-{images-idx3,labels-idx1}-ubyte.gz    10,000 samples
    data/fmnist-desk-{images-idx3,labels-idx1}-ubyte.gz    2,000 samples

Usage::

    python scripts/build_desk_data.py            # runs `npm pack` in a temp dir
    python scripts/build_desk_data.py --mnist DIR --fmnist DIR   # unpacked packages
"""

import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from energy_ood.data import read_idx, write_idx  # noqa: E402

FMNIST_KEEP = 2000


def fetch(package: str, workdir: Path) -> Path:
    subprocess.run(["npm", "pack", package], cwd=workdir, check=True, capture_output=True)
    tgz = next(workdir.glob(f"{package}-*.tgz"))
    dest = workdir / package
    with tarfile.open(tgz) as tar:
        tar.extractall(dest)
    return dest / "package"


def read_classes(folder: Path):
    images, labels = [], []
    for digit in range(10):
        data = json.loads((folder / f"{digit}.json").read_text())["data"]
        if data and isinstance(data[0], list):
            data = [row for row in data if len(row) == 784]  # package has empty rows
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 784)
        images.append(arr)
        labels.append(np.full(len(arr), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def to_uint8(arr):
    # mnist package stores v/255 rounded to 3 decimals; 1/255 > 0.001 makes rounding exact
    if arr.max() <= 1.0:
        arr = np.rint(arr * 255.0)
    return np.clip(arr, 0, 255).astype(np.uint8).reshape(-1, 28, 28)


def write_pair(prefix: str, images, labels, out: Path):
    img_path = out / f"{prefix}-images-idx3-ubyte.gz"
    lab_path = out / f"{prefix}-labels-idx1-ubyte.gz"
    write_idx(img_path, images, compress=True)
    write_idx(lab_path, labels, compress=True)
    assert np.array_equal(read_idx(img_path), images)
    print(f"{img_path.name}: {len(images)} samples")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mnist", type=Path, help="unpacked mnist npm package")
    ap.add_argument("--fmnist", type=Path, help="unpacked fashion-mnist npm package")
    ap.add_argument("--out", type=Path, default=ROOT / "data")
    ap.add_argument("--seed", type=int, default=20231)
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        mnist_dir = args.mnist or fetch("mnist", tmp)
        fmnist_dir = args.fmnist or fetch("fashion-mnist", tmp)
        rng = np.random.default_rng(args.seed)

        x, y = read_classes(mnist_dir / "src" / "digits")
        order = rng.permutation(len(x))
        write_pair("mnist-desk", to_uint8(x[order]), y[order], args.out)

        x, y = read_classes(fmnist_dir / "src" / "clothes")
        order = rng.permutation(len(x))[:FMNIST_KEEP]
        write_pair("fmnist-desk", to_uint8(x[order]), y[order], args.out)


if __name__ == "__main__":
    main()
