#!/usr/bin/env python3
"""Build the bundled datasets under data/ and the CLI test fixture.

MNIST: the 5,000-image MNIST subset shipped in the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit) is split with a
fixed seed into a 2,000-image training pool and a 3,000-image held-out test
set, written as gzip-compressed IDX files.

Letters: a notMNIST-style out-of-distribution set. Letters A-J are rendered
white-on-black into 28x28 grayscale PNGs from every TrueType font found on the
system, with seeded jitter in size and position.

Usage: python3 scripts/prepare_data.py path/to/mlxtend-*.whl
"""

import glob
import gzip
import io
import os
import struct
import sys
import zipfile

import numpy as np
from PIL import Image, ImageDraw, ImageFont

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SEED = 20200701


def write_idx_images(path, images):
    n = images.shape[0]
    header = struct.pack(">IIII", 0x00000803, n, 28, 28)
    payload = header + images.astype(np.uint8).tobytes()
    write_bytes(path, payload)


def write_idx_labels(path, labels):
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    write_bytes(path, header + labels.astype(np.uint8).tobytes())


def write_bytes(path, payload):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    if path.endswith(".gz"):
        # mtime=0 keeps the archive byte-stable across rebuilds.
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


def build_mnist(wheel):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    x = table[:, :-1].reshape(-1, 28, 28)
    y = table[:, -1].astype(int)

    rng = np.random.default_rng(SEED)
    perm = rng.permutation(len(y))
    pool, test = perm[:2000], perm[2000:]

    out = os.path.join(ROOT, "data", "mnist5k")
    write_idx_images(os.path.join(out, "pool-images-idx3-ubyte.gz"), x[pool])
    write_idx_labels(os.path.join(out, "pool-labels-idx1-ubyte.gz"), y[pool])
    write_idx_images(os.path.join(out, "test-images-idx3-ubyte.gz"), x[test])
    write_idx_labels(os.path.join(out, "test-labels-idx1-ubyte.gz"), y[test])

    fixture = os.path.join(ROOT, "crates", "cli", "tests", "fixtures")
    mini = perm[:200]
    write_idx_images(os.path.join(fixture, "mini-images-idx3-ubyte"), x[mini])
    write_idx_labels(os.path.join(fixture, "mini-labels-idx1-ubyte"), y[mini])


def fonts():
    found = set()
    for pattern in ["/usr/share/fonts/**/*.ttf", "/usr/local/lib/python3*/dist-packages/matplotlib/mpl-data/fonts/ttf/*.ttf"]:
        for path in glob.glob(pattern, recursive=True):
            name = os.path.basename(path)
            # symbol-only faces do not carry Latin capitals
            if name.startswith(("STIXSiz", "cmex", "cmsy", "pdf")) or "Display" in name:
                continue
            found.add((name, path))
    # one path per face name, sorted for determinism
    return [p for _, p in sorted(dict(found).items())]


def render_letter(letter, font_path, rng):
    size = int(rng.integers(18, 27))
    font = ImageFont.truetype(font_path, size)
    canvas = Image.new("L", (56, 56), 0)
    draw = ImageDraw.Draw(canvas)
    left, top, right, bottom = draw.textbbox((0, 0), letter, font=font)
    w, h = right - left, bottom - top
    if w <= 0 or h <= 0:
        return None
    dx = int(rng.integers(-2, 3))
    dy = int(rng.integers(-2, 3))
    draw.text((28 - w / 2 - left + dx, 28 - h / 2 - top + dy), letter, fill=255, font=font)
    img = canvas.crop((14, 14, 42, 42))
    if np.asarray(img).max() == 0:
        return None
    return img


def build_letters():
    out = os.path.join(ROOT, "data", "letters")
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(SEED + 1)
    faces = fonts()
    count = 0
    for letter in "ABCDEFGHIJ":
        for k in range(50):
            img = render_letter(letter, faces[k % len(faces)], rng)
            if img is None:
                continue
            img.save(os.path.join(out, f"{letter}_{k:03d}.png"), optimize=True)
            count += 1
    mini = os.path.join(ROOT, "crates", "cli", "tests", "fixtures", "letters")
    os.makedirs(mini, exist_ok=True)
    for letter in "ABCDE":
        Image.open(os.path.join(out, f"{letter}_000.png")).save(os.path.join(mini, f"{letter}.png"))
    print(f"{count} letter images from {len(faces)} faces")


if __name__ == "__main__":
    build_mnist(sys.argv[1])
    build_letters()
