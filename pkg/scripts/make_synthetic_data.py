#!/usr/bin/env python3
"""Generate the synthetic stand-in datasets in their on-disk binary formats.

Writes rendered-digit images in MNIST IDX layout and colored-shape images in
CIFAR-10 batch layout so the regular ingestion path exercises real parsers.
"""

import argparse
from pathlib import Path

from augbackdoor.synth import write_synthetic_cifar10, write_synthetic_mnist


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=Path, help="output directory for the dataset trees")
    parser.add_argument("--n-train", type=int, default=12000)
    parser.add_argument("--n-test", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--cifar", action="store_true", help="also write the CIFAR-style set")
    args = parser.parse_args()

    write_synthetic_mnist(args.root, n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    print(f"wrote mnist-style set under {args.root / 'mnist'}")
    if args.cifar:
        write_synthetic_cifar10(args.root, n_train=args.n_train, n_test=args.n_test,
                                seed=args.seed)
        print(f"wrote cifar10-style set under {args.root / 'cifar10'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
