#!/usr/bin/env python3
"""Convert the official SYSU-MM01 directory tree to a manifest CSV.

Expected layout under --root:
    cam1/ ... cam6/<pid>/<frame>.jpg
    exp/train_id.txt, exp/val_id.txt, exp/test_id.txt  (comma-separated ids)

Cameras 3 and 6 are infrared, the rest visible. Identity labels are written
as found; the loader re-indexes them densely.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from vireid.data import Sample, write_manifest  # noqa: E402

IR_CAMERAS = {3, 6}


def read_ids(root: Path, split: str) -> list:
    ids = []
    for line in (root / "exp" / f"{split}_id.txt").read_text().splitlines():
        line = line.strip()
        if line:
            ids.extend(int(tok) for tok in line.split(","))
    return sorted(set(ids))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", required=True, help="dataset root directory")
    parser.add_argument("--split", default="train", choices=["train", "val", "test"])
    parser.add_argument("--out", required=True, help="manifest CSV to write")
    args = parser.parse_args()

    root = Path(args.root)
    ids = read_ids(root, args.split)
    samples = []
    for cam in range(1, 7):
        modality = "infrared" if cam in IR_CAMERAS else "visible"
        for pid in ids:
            id_dir = root / f"cam{cam}" / f"{pid:04d}"
            if not id_dir.is_dir():
                continue
            for img in sorted(id_dir.iterdir()):
                if img.suffix.lower() in (".jpg", ".jpeg", ".png", ".bmp"):
                    samples.append(Sample(identity=pid, modality=modality, camera=cam,
                                          path=str(img.resolve())))
    if not samples:
        print(f"no images found under {root} for split {args.split}", file=sys.stderr)
        return 2
    write_manifest(samples, args.out)
    print(f"wrote {len(samples)} rows ({len(ids)} identities) to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
