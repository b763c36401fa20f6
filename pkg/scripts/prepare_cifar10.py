#!/usr/bin/env python3
"""Unpack the CIFAR-10 binary distribution into data/ and check it loads.

    python scripts/prepare_cifar10.py path/to/cifar-10-binary.tar.gz

The archive is the official "CIFAR-10 binary version" (cifar-10-binary.tar.gz);
any tarball containing the six ``*.bin`` batch files works.
"""
import argparse
import shutil
import sys
import tarfile
import tempfile
from pathlib import Path

from distillpool.data import CLASS_NAMES, TEST_FILES, TRAIN_FILES, load_cifar10

REPO = Path(__file__).resolve().parents[1]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("archive", help="cifar-10-binary.tar.gz, or a directory that already holds the .bin files")
    p.add_argument("--dest", default=str(REPO / "data" / "cifar-10-batches-bin"))
    args = p.parse_args(argv)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    wanted = set(TRAIN_FILES + TEST_FILES)

    src = Path(args.archive)
    if src.is_dir():
        for name in wanted:
            shutil.copyfile(src / name, dest / name)
    else:
        with tarfile.open(src) as tar, tempfile.TemporaryDirectory() as tmp:
            members = [m for m in tar.getmembers() if Path(m.name).name in wanted and m.isfile()]
            tar.extractall(tmp, members=members, filter="data")
            for m in members:
                shutil.move(str(Path(tmp) / m.name), dest / Path(m.name).name)

    train, test = load_cifar10(dest)
    print(f"{dest}: {len(train)} train / {len(test)} test images, {len(CLASS_NAMES)} classes")
    print("channel means:", ", ".join(f"{m:.4f}" for m in train.norm_stats.mean))
    return 0


if __name__ == "__main__":
    sys.exit(main())
