#!/usr/bin/env python3
"""Convert an official RegDB index split to a manifest CSV.

Expected layout under --root:
    idx/{train,test}_{visible,thermal}_<trial>.txt  ("relative/path label")
    plus the image directories those index files point to.

The dataset has one camera per modality; visible rows get camera 1 and
thermal (infrared) rows camera 2.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from vireid.data import Sample, write_manifest  # noqa: E402

MODALITY_CAMERA = {"visible": 1, "thermal": 2}


def read_index(root: Path, split: str, channel: str, trial: int) -> list:
    index = root / "idx" / f"{split}_{channel}_{trial}.txt"
    rows = []
    for line in index.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rel, label = line.rsplit(" ", 1)
        rows.append((rel, int(label)))
    return rows


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", required=True, help="dataset root directory")
    parser.add_argument("--split", default="train", choices=["train", "test"])
    parser.add_argument("--trial", type=int, default=1)
    parser.add_argument("--out", required=True, help="manifest CSV to write")
    args = parser.parse_args()

    root = Path(args.root)
    samples = []
    for channel, camera in MODALITY_CAMERA.items():
        modality = "infrared" if channel == "thermal" else "visible"
        for rel, label in read_index(root, args.split, channel, args.trial):
            samples.append(Sample(identity=label, modality=modality, camera=camera,
                                  path=str((root / rel).resolve())))
    if not samples:
        print(f"no rows found under {root}", file=sys.stderr)
        return 2
    write_manifest(samples, args.out)
    print(f"wrote {len(samples)} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
