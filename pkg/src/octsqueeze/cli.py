"""``octsqueeze {synth|train|encode|decode|eval|rd-curve}``.

Every flag can also come from a JSON ``--config`` file (same names, dashes or
underscores); explicit flags win. Exit status: 0 success, 2 invalid input,
3 corrupt stream.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec, metrics
from .entropy import TrainConfig, TrainingDiverged, save_checkpoint, train, write_history_csv
from .errors import CorruptStreamError
from .octree import Mode, build_octree, truncate
from .pointcloud import (CloudFormatError, _atomic_write, fit_quant_params, guess_format, lattice_coords, load_cloud,
                         quantize, save_cloud)
from .synth import SceneSpec, generate_scene, scene_specs

log = logging.getLogger("octsqueeze")

CLOUD_SUFFIXES = (".xyz", ".txt", ".bin")


def corpus_files(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix in CLOUD_SUFFIXES)
    if not files:
        raise ValueError(f"no point clouds ({', '.join(CLOUD_SUFFIXES)}) in {directory}")
    return files


def read_cloud(path):
    return load_cloud(path, guess_format(path))


# --------------------------------------------------------------------------
# subcommands as plain functions


def cmd_synth(spec: SceneSpec, count: int, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(scene_specs(spec, count)):
        path = out / f"scene_{i:04d}.xyz"
        save_cloud(path, generate_scene(s))
        paths.append(path)
    return paths


def load_corpus_trees(files, depth: int, mode=Mode.FULL):
    trees = []
    for f in files:
        pts = read_cloud(f)
        trees.append(build_octree(quantize(pts, fit_quant_params(pts, depth)), mode))
    return trees


def cmd_train(corpus_dir, config: TrainConfig, checkpoint_out, depth: int | None = None, loss_csv=None):
    files = corpus_files(corpus_dir)
    if len(files) < 2:
        raise ValueError("training needs at least 2 scenes (train/validation split)")
    depth = depth or config.k_max
    trees = load_corpus_trees(files, depth)
    result = train(config, trees)
    save_checkpoint(result.model, checkpoint_out)
    loss_csv = Path(loss_csv) if loss_csv else Path(str(checkpoint_out) + ".loss.csv")
    write_history_csv(result.history, loss_csv)
    return result


def cmd_encode(input_path, model, depth: int, mode, out_path) -> codec.EncodeStats:
    data, stats = codec.encode_cloud(read_cloud(input_path), model, depth, mode)
    _atomic_write(Path(out_path), data)
    return stats


def cmd_decode(container_path, out_path, model=None) -> np.ndarray:
    pts = codec.decode_cloud(Path(container_path).read_bytes(), model)
    save_cloud(out_path, pts)
    return pts


def evaluate_pair(original, reconstructed, anchor=None) -> dict:
    if anchor is None:
        anchor = tuple(original.min(axis=0))
    row = {
        "chamfer": metrics.chamfer_sym(original, reconstructed),
        "iou": metrics.voxel_iou(original, reconstructed, anchor=anchor),
    }
    try:
        row["psnr"] = metrics.psnr_sym(original, reconstructed)
    except ValueError:  # too few points for normals
        row["psnr"] = float("nan")
    return row


def cmd_eval(pairs) -> list[dict]:
    rows = []
    for orig_path, rec_path in pairs:
        if guess_format(orig_path) != guess_format(rec_path):
            raise ValueError(f"format mismatch: {orig_path} vs {rec_path}")
        row = evaluate_pair(read_cloud(orig_path), read_cloud(rec_path))
        rows.append({"original": str(orig_path), "reconstructed": str(rec_path), **row})
    return rows


RD_FIELDS = ["scene", "depth", "bpp", "payload_bpp", "chamfer", "psnr", "iou", "max_error", "error_bound"]


def rd_rows(points, model, depths, mode=Mode.FULL, name="scene") -> list[dict]:
    """Encode one cloud at every depth by truncating a single deepest octree."""
    model = codec.resolve_model(model)
    k = max(depths)
    params = fit_quant_params(points, k)
    qc = quantize(points, params)
    lattice = lattice_coords(points, params)
    full = build_octree(qc, mode)
    rows = []
    for d in sorted(depths):
        tree = truncate(full, d)
        data, stats = codec.encode_tree_container(tree, model, len(points))
        rec = codec.decode_cloud(data, model)
        # each input point against the center of the depth-d cell it falls in
        center = np.asarray(params.origin) + ((lattice >> (k - d)) + 0.5) * tree.params.cell
        err = float(np.max(np.linalg.norm(center - points, axis=1)))
        rows.append({
            "scene": name, "depth": d, "bpp": stats.bpp, "payload_bpp": stats.payload_bpp,
            **evaluate_pair(points, rec, params.origin),
            "max_error": err, "error_bound": float(np.sqrt(3) / 2 * tree.params.cell),
        })
    return rows


def cmd_rd_curve(corpus_dir, model, depths, out_csv, mode=Mode.FULL) -> list[dict]:
    rows = []
    for f in corpus_files(corpus_dir):
        rows += rd_rows(read_cloud(f), model, depths, mode, name=f.name)
    write_csv(out_csv, rows, RD_FIELDS)
    return rows


def write_csv(path, rows, fields):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)


# --------------------------------------------------------------------------
# argument handling


def _merge(args, config: dict, name, default=None):
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    for key in (name, name.replace("-", "_"), name.replace("_", "-")):
        if key in config:
            return config[key]
    return default


def _parse_depths(text) -> list[int]:
    if isinstance(text, list):
        return [int(d) for d in text]
    out = []
    for part in str(text).split(","):
        if "-" in part:
            a, b = part.split("-")
            out += list(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octsqueeze", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default values for any flag")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("synth", help="generate synthetic LiDAR-like scenes"))
    s.add_argument("--count", type=int)
    s.add_argument("--points", type=int)

    s = common(sub.add_parser("train", help="train a deep entropy model"))
    s.add_argument("corpus")
    s.add_argument("--depth", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--K", type=int, dest="K")
    s.add_argument("--features", help="comma list of level,parent,octant,location (or L,P,O,LL)")
    s.add_argument("--aggregation", choices=["parent", "self"])
    s.add_argument("--k-max", type=int)
    s.add_argument("--loss-csv")

    s = common(sub.add_parser("encode", help="compress a point cloud"))
    s.add_argument("input")
    s.add_argument("--depth", type=int)
    s.add_argument("--mode", choices=["full", "early"])
    s.add_argument("--model", help="uniform | histogram | parent-histogram | checkpoint path")

    s = common(sub.add_parser("decode", help="decompress a container to xyz text"))
    s.add_argument("input")
    s.add_argument("--model", help="checkpoint path (deep streams only)")

    s = common(sub.add_parser("eval", help="quality metrics for original/reconstruction pairs"))
    s.add_argument("files", nargs="+", help="original1 recon1 [original2 recon2 ...]")

    s = common(sub.add_parser("rd-curve", help="rate/distortion over several depths"))
    s.add_argument("corpus")
    s.add_argument("--depths", help="e.g. 6-12 or 6,8,10")
    s.add_argument("--mode", choices=["full", "early"])
    s.add_argument("--model")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    config = json.loads(Path(args.config).read_text()) if args.config else {}
    cmd = args.command
    if cmd == "synth":
        spec = SceneSpec.from_dict(config)
        seed = _merge(args, config, "seed", spec.seed)
        spec = replace(spec, seed=seed, points=_merge(args, config, "points", spec.points))
        paths = cmd_synth(spec, _merge(args, config, "count", 1), _merge(args, config, "out", "scenes"))
        print(f"wrote {len(paths)} scenes")
    elif cmd == "train":
        depth = _merge(args, config, "depth", 10)
        features = _merge(args, config, "features", "level,parent,octant,location")
        if isinstance(features, str):
            features = features.split(",")
        cfg = TrainConfig(
            steps=_merge(args, config, "steps", 2000),
            batch=_merge(args, config, "batch", 2),
            lr=_merge(args, config, "lr", 1e-4),
            seed=_merge(args, config, "seed", 0),
            K=_merge(args, config, "K", 4),
            features=frozenset(features),
            k_max=_merge(args, config, "k-max", depth),
            aggregation=_merge(args, config, "aggregation", "parent"),
            val_fraction=_merge(args, config, "val_fraction", 0.2),
            eval_every=_merge(args, config, "eval_every", 100),
        )
        out = _merge(args, config, "out", "model.ckpt")
        t0 = time.perf_counter()
        try:
            res = cmd_train(args.corpus, cfg, out, depth, _merge(args, config, "loss-csv"))
        except TrainingDiverged as e:
            print(f"error: training diverged: {e}", file=sys.stderr)
            return 2
        print(f"val_bits_per_symbol={res.final_val_bps:.6f} hash={res.model.model_hash:08x} "
              f"seconds={time.perf_counter() - t0:.1f}")
    elif cmd == "encode":
        stats = cmd_encode(args.input, _merge(args, config, "model", "parent-histogram"),
                           _merge(args, config, "depth", 12), Mode.parse(_merge(args, config, "mode", "full")),
                           _merge(args, config, "out", str(args.input) + ".ocsq"))
        print(stats.line())
    elif cmd == "decode":
        out = _merge(args, config, "out", str(args.input) + ".xyz")
        pts = cmd_decode(args.input, out, _merge(args, config, "model"))
        print(f"points={len(pts)}")
    elif cmd == "eval":
        if len(args.files) % 2:
            raise ValueError("eval takes original/reconstruction pairs")
        rows = cmd_eval(list(zip(args.files[::2], args.files[1::2])))
        for r in rows:
            print(f"{r['reconstructed']}: chamfer={r['chamfer']:.6f} psnr={r['psnr']:.4f} iou={r['iou']:.6f}")
        if _merge(args, config, "out"):
            write_csv(_merge(args, config, "out"), rows, ["original", "reconstructed", "chamfer", "psnr", "iou"])
    elif cmd == "rd-curve":
        rows = cmd_rd_curve(args.corpus, _merge(args, config, "model", "parent-histogram"),
                            _parse_depths(_merge(args, config, "depths", "6-12")),
                            _merge(args, config, "out", "rd.csv"), Mode.parse(_merge(args, config, "mode", "full")))
        print(f"wrote {len(rows)} rows")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except CorruptStreamError as e:
        print(f"error[{getattr(e, 'code', 'E_CORRUPT')}]: {e}", file=sys.stderr)
        return 3
    except (ValueError, CloudFormatError, FileNotFoundError) as e:
        print(f"error[{getattr(e, 'code', 'E_INPUT')}]: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
