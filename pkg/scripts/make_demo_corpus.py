#!/usr/bin/env python3
"""Generate a small synthetic corpus for exercising the full workflow.

Creates three model directories of per-organ soft predictions plus a
ground-truth label directory. Each case contains two box-shaped organs;
injected disagreement regions make some cases need revision while others
are already clean, so the ranking has a visible knee.

Usage:
    python scripts/make_demo_corpus.py out/corpus [--cases 12] [--dim 32] [--seed 0]
"""

import argparse
from pathlib import Path

import numpy as np

from segqa.nifti import write_volume
from segqa.volume import VolumeGrid


def make_case(rng: np.random.Generator, dim: int, dirty: bool):
    """Truth channels plus three model variants for one case."""
    organ1 = np.zeros((dim, dim, dim), dtype=np.float32)
    organ2 = np.zeros((dim, dim, dim), dtype=np.float32)
    q = dim // 4
    organ1[q : 2 * q + 2, q : 2 * q + 2, q : 2 * q + 2] = 1.0
    organ2[2 * q + 4 : dim - 2, 2 * q + 4 : dim - 2, 2 * q + 4 : dim - 2] = 1.0

    models = []
    for k in range(3):
        a = organ1.copy()
        b = organ2.copy()
        if dirty and k < 2:
            # two models miss a random chunk of organ 1
            x0 = int(rng.integers(q, q + 4))
            size = int(rng.integers(2, q))
            a[x0 : x0 + size, q : q + size, q : q + size] = 0.0
        if dirty and k == 2:
            # the third model hallucinates a bit of organ 2
            b[2 : 2 + 3, 2 : 2 + 3, 2 : 2 + 3] = 1.0
        models.append((a, b))
    return (organ1, organ2), models


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="corpus root directory")
    parser.add_argument("--cases", type=int, default=12)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--dirty-fraction", type=float, default=0.25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    root = Path(args.out)
    model_dirs = [root / f"model{k}" for k in range(3)]
    truth_dir = root / "truth"
    for d in (*model_dirs, truth_dir):
        d.mkdir(parents=True, exist_ok=True)

    n_dirty = max(1, int(round(args.cases * args.dirty_fraction)))
    for i in range(args.cases):
        case_id = f"case{i:03d}"
        dirty = i < n_dirty
        (t1, t2), models = make_case(rng, args.dim, dirty)

        label = np.zeros(t1.shape, dtype=np.uint8)
        label[t1 > 0.5] = 1
        label[t2 > 0.5] = 2
        write_volume(VolumeGrid(label), truth_dir / f"{case_id}.nii.gz")

        for model_dir, (a, b) in zip(model_dirs, models):
            write_volume(VolumeGrid(a), model_dir / f"{case_id}_organ1.nii.gz")
            write_volume(VolumeGrid(b), model_dir / f"{case_id}_organ2.nii.gz")
        print(f"{case_id}: {'dirty' if dirty else 'clean'}")

    print(f"wrote {args.cases} cases under {root}")


if __name__ == "__main__":
    main()
