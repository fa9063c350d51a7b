#!/usr/bin/env python3
"""Build the 10k-digit IDX files under data/ from the `mnist` npm package.

The package ships 10,000 MNIST digits as JSON (pixel values already scaled to
[0, 1], three decimals). They are converted back to bytes, shuffled with a fixed
seed so the first 8000 / last 2000 split is class-balanced, and written in the
standard IDX ubyte layout.

    python3 scripts/fetch_digits.py [--package mnist-1.1.0.tgz]
"""
import argparse
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--package", help="existing npm tarball (skips `npm pack`)")
    ap.add_argument("--out", default=str(ROOT / "data"))
    ap.add_argument("--seed", type=int, default=20200)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.package
        if tgz is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True)
            tgz = str(Path(tmp) / "mnist-1.1.0.tgz")
        with tarfile.open(tgz) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            path = Path(tmp) / "package" / "src" / "digits" / f"{digit}.json"
            flat = json.loads(path.read_text())["data"]
            assert len(flat) % 784 == 0
            for i in range(len(flat) // 784):
                px = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
                samples.append((px, digit))

    random.Random(args.seed).shuffle(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "digits-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for px, _ in samples:
            f.write(px)
    with open(out / "digits-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} digits to {out}")


if __name__ == "__main__":
    main()
