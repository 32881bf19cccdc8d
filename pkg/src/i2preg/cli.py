"""Command-line entry point: ``i2preg <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck
from .config import PipelineConfig
from .geom import Pose
from .io import (DataError, load_scene, read_correspondences, read_jsonl, record_error, result_to_record,
                 save_scene, write_correspondences, write_jsonl, write_pgm, write_ppm)
from .pipeline import SceneIndex, oracle_sample, register_image, run_scene
from .plotting import error_cdf_figure, inlier_histogram, save_png
from .pose import EvalConfig
from .scenegen import (SceneSpec, associate_images, generate_scene, partition_voxels, testing_split,
                       training_split)
from .viz import correspondence_image, depth_image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
# which statistic each benchmark protocol reports
PROTOCOL_STATISTIC = {"carla": "median", "kitti": "mean", "nuscenes": "mean"}

log = logging.getLogger("i2preg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p):
    p.add_argument("--config", type=Path, help="INI-style pipeline configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")


def _add_oracle(p):
    p.add_argument("--noise", type=float, help="descriptor noise norm")
    p.add_argument("--outlier-rate", type=float, help="fraction of groups given a wrong patch descriptor")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="i2preg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="generate a scene with a capture-pose split")
    _add_common(p)
    split = p.add_mutually_exclusive_group()
    split.add_argument("--test-split", action="store_true", help="testing pose grid (default)")
    split.add_argument("--train-split", action="store_true", help="training pose grid")
    p.add_argument("--hard", action="store_true", help="use the unseen pitch angles of the hard test split")
    p.add_argument("--positions", type=int, help="camera positions (xy grid points x heights)")

    p = sub.add_parser("synth-features", help="write oracle features for one image")
    _add_common(p)
    _add_oracle(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--image", required=True)

    p = sub.add_parser("pipeline", help="register every image of a scene")
    _add_common(p)
    _add_oracle(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--images", help="comma-separated image ids (default: all)")
    p.add_argument("--bypass-fusion", action="store_true", help="feed oracle features straight to matching")
    p.add_argument("--dump-sim-maps", action="store_true", help="write coarse similarity maps as PGM")
    p.add_argument("--write-correspondences", action="store_true", help="write matched pairs per image")

    p = sub.add_parser("gradcheck", help="finite-difference checks of the loss gradients")
    p.add_argument("--loss", action="append", choices=gradcheck.LOSSES + ("all",),
                   help="loss to check (repeatable; default all)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.add_argument("--inject-sign-flip", action="append", default=[], choices=gradcheck.LOSSES,
                   help="negate this loss's analytic gradient (harness self-test)")
    p.add_argument("--out", type=Path, help="also write the trial table here")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("eval", help="summarize pipeline results and draw error plots")
    p.add_argument("--results", type=Path, required=True, help="results.jsonl from the pipeline")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--protocol", choices=sorted(PROTOCOL_STATISTIC), default="carla",
                   help="benchmark convention deciding median or mean reporting")
    p.add_argument("--tau-r", type=float, default=EvalConfig().tau_r)
    p.add_argument("--tau-t", type=float, default=EvalConfig().tau_t)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("viz", help="render depth and correspondence rasters for one image")
    _add_common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--results", type=Path, help="results.jsonl with the predicted pose")
    p.add_argument("--corr", type=Path, help="correspondence file (default: recompute)")
    p.add_argument("--threshold", type=float, help="pixel error separating green from red")
    p.add_argument("--bypass-fusion", action="store_true", help="match on raw oracle features")
    _add_oracle(p)
    return parser


def _config(args) -> PipelineConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "noise", None) is not None:
        changes["noise_sigma"] = args.noise
    if getattr(args, "outlier_rate", None) is not None:
        changes["outlier_rate"] = args.outlier_rate
    if getattr(args, "bypass_fusion", False):
        changes["bypass_fusion"] = True
    return cfg.replace(**changes) if changes else cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(v) for v in r) + "\n")


def _cell(v):
    if isinstance(v, float):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "nan")
    return str(v)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.train_split:
        poses = training_split(args.positions or 48)
        split = "train"
    else:
        poses = testing_split(args.positions or 18, hard=args.hard)
        split = "test-hard" if args.hard else "test"
    scene = generate_scene(seed, SceneSpec(poses=poses))
    part = partition_voxels(scene.cloud, scene.region)
    assoc = associate_images(part, scene.cloud, scene.cameras)
    voxels = [{"index": v.index, "lo": list(v.box.lo), "hi": list(v.box.hi), "num_points": len(v.indices),
               "images": assoc[v.index]} for v in part.voxels]
    associated = sorted({i for v in voxels for i in v["images"]})
    meta = save_scene(args.out, scene, {
        "split": split, "num_positions": poses.num_positions, "heights": list(poses.heights),
        "pitches": list(poses.pitches), "yaw_count": poses.yaw_count, "num_voxels": len(part.voxels),
        "voxel_candidates": part.num_candidates, "associated_images": len(associated)})
    _write_json(args.out / "voxels.json", voxels)
    print(f"points\t{meta['num_points']}")
    print(f"cameras\t{meta['num_cameras']}")
    print(f"voxels\t{meta['num_voxels']}")
    print(f"associated_images\t{meta['associated_images']}")
    return EXIT_OK


def cmd_synth_features(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    vin, sample, cam = oracle_sample(scene, cfg, args.image)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    f = sample.features
    for name in ("coarse_image", "coarse_points", "fine_image", "fine_points"):
        np.save(out / f"{name}.npy", np.asarray(getattr(f, name), dtype=np.float32))
    np.save(out / "group_centers.npy", vin.groups.centers)
    np.save(out / "point_ids.npy", vin.point_ids)
    gt = sample.gt.subset(np.arange(len(sample.gt)))
    gt.point_index = vin.point_ids[gt.point_index]  # scene-cloud rows
    write_correspondences(out / "gt_correspondences.txt", gt)
    print(f"groups\t{vin.groups.m}")
    print(f"in_frustum\t{int(sample.in_frustum.sum())}")
    print(f"outlier_groups\t{len(sample.outlier_groups)}")
    print(f"fine_collisions\t{len(sample.fine_collisions)}")
    print(f"image_size\t{cam.width}x{cam.height}")
    return EXIT_OK


def summary_rows(records, cfg: EvalConfig, statistic: str):
    rre = np.array([record_error(r["rre"]) for r in records])
    rte = np.array([record_error(r["rte"]) for r in records])
    ok = (rre < cfg.tau_r) & (rte < cfg.tau_t)
    reduce = np.median if statistic == "median" else np.mean
    return {
        "count": len(records),
        "rr": float(ok.mean()) if len(records) else float("nan"),
        "statistic": statistic,
        "rre": float(reduce(rre)) if len(records) else float("nan"),
        "rte": float(reduce(rte)) if len(records) else float("nan"),
        "median_rre": float(np.median(rre)) if len(records) else float("nan"),
        "median_rte": float(np.median(rte)) if len(records) else float("nan"),
        "mean_rre": float(np.mean(rre)) if len(records) else float("nan"),
        "mean_rte": float(np.mean(rte)) if len(records) else float("nan"),
        "tau_r": cfg.tau_r,
        "tau_t": cfg.tau_t,
    }


def _json_safe(summary):
    return {k: (v if not isinstance(v, float) or math.isfinite(v) else str(v)) for k, v in summary.items()}


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    ids = args.images.split(",") if args.images else None
    known = {c.image_id for c in scene.cameras}
    for i in ids or []:
        if i not in known:
            raise DataError(f"unknown image id {i!r}")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "simmaps" if args.dump_sim_maps else None
    outcomes = run_scene(scene, cfg, threads=args.threads, dump_dir=dump, image_ids=ids)
    records = [result_to_record(o.image_id, o.result, o.extra()) for o in outcomes]
    write_jsonl(out / "results.jsonl", records)
    if args.write_correspondences:
        (out / "correspondences").mkdir(exist_ok=True)
        for o in outcomes:
            write_correspondences(out / "correspondences" / f"{o.image_id}.txt", o.correspondences)
    (out / "config.ini").write_text(config_mod.serialize(cfg), encoding="utf-8")
    summary = summary_rows(records, cfg.eval, "median")
    _write_json(out / "summary.json", _json_safe(summary))
    _write_tsv(out / "summary.tsv", ["metric", "value"], list(summary.items()))
    for k, v in summary.items():
        print(f"{k}\t{_cell(v)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    losses = gradcheck.LOSSES if not args.loss or "all" in args.loss else tuple(dict.fromkeys(args.loss))
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results = gradcheck.run(losses, args.trials, args.seed, args.tol, sign_flip=tuple(args.inject_sign_flip))
    header = ["loss", "trial", "size", "rel_error", "status"]
    rows = [[r.loss, r.trial, r.size, r.rel_error, "pass" if r.passed else "FAIL"] for r in results]
    print("\t".join(header))
    for row in rows:
        print("\t".join(_cell(v) for v in row))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        _write_tsv(args.out, header, rows)
    failed = [r for r in results if not r.passed]
    for name in losses:
        mine = [r for r in results if r.loss == name]
        worst = max(r.rel_error for r in mine)
        n_ok = sum(r.passed for r in mine)
        print(f"# {name}: {n_ok}/{len(mine)} within {args.tol:g} (worst {worst:.3e})")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_eval(args) -> int:
    records = read_jsonl(args.results)
    if not records:
        raise DataError(f"{args.results}: no records")
    for lineno, r in enumerate(records, 1):
        missing = {"image_id", "rre", "rte", "success", "inliers"} - set(r)
        if missing:
            raise DataError(f"{args.results}:{lineno}: missing {sorted(missing)}")
    cfg = EvalConfig(args.tau_r, args.tau_t)
    statistic = PROTOCOL_STATISTIC[args.protocol]
    summary = summary_rows(records, cfg, statistic)
    summary["protocol"] = args.protocol
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "summary.json", _json_safe(summary))
    _write_tsv(out / "summary.tsv", ["metric", "value"], list(summary.items()))
    _write_tsv(out / "per_image.tsv", ["image_id", "rre_deg", "rte_m", "inliers", "success"],
               [[r["image_id"], record_error(r["rre"]), record_error(r["rte"]), len(r["inliers"]),
                 int(record_error(r["rre"]) < cfg.tau_r and record_error(r["rte"]) < cfg.tau_t)]
                for r in records])
    rre = [record_error(r["rre"]) for r in records]
    rte = [record_error(r["rte"]) for r in records]
    save_png(error_cdf_figure(rre, rte, cfg.tau_r, cfg.tau_t), out / "error_cdf.png")
    save_png(inlier_histogram([len(r["inliers"]) for r in records]), out / "inliers.png")
    print(f"images\t{summary['count']}")
    print(f"rr\t{summary['rr']!r}")
    print(f"{statistic}_rre_deg\t{_cell(summary['rre'])}")
    print(f"{statistic}_rte_m\t{_cell(summary['rte'])}")
    return EXIT_OK


def cmd_viz(args) -> int:
    cfg = _config(args)
    scene = load_scene(args.scene)
    try:
        j = next(k for k, c in enumerate(scene.cameras) if c.image_id == args.image)
    except StopIteration:
        raise DataError(f"unknown image id {args.image!r}") from None
    index = SceneIndex(scene, cfg)
    cam, gt = index.camera(j), scene.cameras[j].pose
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    rgb, _ = depth_image(cam, gt, scene.cloud.points)
    write_ppm(out / f"{args.image}_depth_gt.ppm", rgb)
    if args.results:
        recs = [r for r in read_jsonl(args.results) if r.get("image_id") == args.image]
        if not recs or recs[0].get("rotation") is None:
            log.warning("no predicted pose for %s; skipping the predicted-pose render", args.image)
        else:
            pred = Pose(np.reshape(recs[0]["rotation"], (3, 3)), recs[0]["translation"])
            write_ppm(out / f"{args.image}_depth_pred.ppm", depth_image(cam, pred, scene.cloud.points)[0])
    if args.corr:
        corr = read_correspondences(args.corr, scene.cloud.points)
    else:
        corr = register_image(index, j).correspondences
    thr = cfg.ransac.reprojection_threshold if args.threshold is None else args.threshold
    img, correct = correspondence_image(cam, gt, corr, thr, background=rgb)
    write_ppm(out / f"{args.image}_matches.ppm", img)
    mask = np.zeros((cam.height, cam.width), dtype=np.uint8)
    mask[np.any(rgb > 0, axis=2)] = 255
    write_pgm(out / f"{args.image}_coverage.pgm", mask)
    print(f"matches\t{len(corr)}")
    print(f"green\t{int(correct.sum())}")
    print(f"red\t{int((~correct).sum())}")
    return EXIT_OK


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "synth-features": cmd_synth_features,
    "pipeline": cmd_pipeline,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "viz": cmd_viz,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("i2preg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"i2preg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"i2preg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # bad config values or inconsistent inputs
        print(f"i2preg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
