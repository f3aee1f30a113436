"""Rate-distortion sweep over depths on freshly generated synthetic scenes.

One octree per scene is built at the deepest depth and truncated; every depth
is encoded, decoded and scored (bpp, symmetric chamfer, point-to-plane PSNR,
voxel IoU, max error against its bound).

    python3 scripts/rd_curve.py --model parent-histogram --depths 6-12 --out rd.csv
"""
import argparse
import csv

import numpy as np

from octsqueeze.cli import RD_FIELDS, _parse_depths, rd_rows
from octsqueeze.octree import Mode
from octsqueeze.synth import SceneSpec, generate_scene, scene_specs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="parent-histogram", help="builtin name or checkpoint path")
    ap.add_argument("--depths", default="6-12")
    ap.add_argument("--mode", choices=["full", "early"], default="full")
    ap.add_argument("--scenes", type=int, default=4)
    ap.add_argument("--points", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=2000)
    ap.add_argument("--out", default="rd.csv")
    args = ap.parse_args()

    depths = _parse_depths(args.depths)
    rows = []
    for spec in scene_specs(SceneSpec(seed=args.seed, points=args.points), args.scenes):
        rows += rd_rows(generate_scene(spec), args.model, depths, Mode.parse(args.mode), name=f"seed{spec.seed}")
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RD_FIELDS)
        w.writeheader()
        w.writerows(rows)
    print(f"{'depth':>5s} {'bpp':>8s} {'chamfer':>10s} {'psnr':>8s} {'iou':>6s}")
    for d in depths:
        sel = [r for r in rows if r["depth"] == d]
        print(f"{d:5d} {np.mean([r['bpp'] for r in sel]):8.3f} {np.mean([r['chamfer'] for r in sel]):10.5f} "
              f"{np.mean([r['psnr'] for r in sel]):8.2f} {np.mean([r['iou'] for r in sel]):6.3f}")


if __name__ == "__main__":
    main()
