"""Command-line pipeline: synth / train / extract / index / eval / plot.

Option precedence is flags > config file (key=value lines) > built-in
defaults; `--print-config` echoes the resolved values. Exit codes: 0 on
success, 1 on runtime failure (message on stderr), 2 on usage errors.
`VXP_SEED` provides the seed when no --seed flag or config entry is given.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import constants, heads, retrieval, trainer
from . import dataio
from .errors import VxpError
from .geometry import default_grid_config
from .synthetic import SyntheticSceneParams, generate_synthetic_scene
from .trainer import StageConfig

log = logging.getLogger(__name__)

_DEFAULTS = {
    "traversals": 2,
    "seed": 0,
    "epochs": 10,
    "lr": 1e-3,
    "lr_decay": 0.9,
    "batch_size": 32,
    "descriptor_dim": 256,
    "feature_dim": 64,
    "vfe_dim": 32,
    "local_loss_mode": "depth_scaled",
    "projection": "perspective",
    "radius": constants.EVAL_SUCCESS_RADIUS_M,
    "metric": "L2",
    "recall": "1,1pct",
}


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VxpError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def _resolve(args: argparse.Namespace, config: dict[str, str],
             key: str, cast=str):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    if key == "seed" and "VXP_SEED" in os.environ:
        return int(os.environ["VXP_SEED"])
    return _DEFAULTS.get(key)


class _Resolved:
    """Precedence-resolved view over flags, config file and defaults."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        self._config = _read_config_file(getattr(args, "config", None))
        self._seen: dict[str, object] = {}

    def get(self, key: str, cast=str):
        value = _resolve(self._args, self._config, key, cast)
        self._seen[key] = value
        return value

    def print_if_requested(self) -> None:
        if getattr(self._args, "print_config", False):
            for key in sorted(self._seen):
                print(f"{key}={self._seen[key]}")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--print-config", action="store_true",
                     help="echo the resolved configuration")


# --- synth ---

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _Resolved(args)
    scenes = args.scenes
    seed = cfg.get("seed", int)
    traversals = cfg.get("traversals", int)
    out = Path(args.out)
    cfg.print_if_requested()

    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    params = SyntheticSceneParams(seed=seed)
    rows = []
    for scene in range(scenes):
        for t in range(traversals):
            sample = generate_synthetic_scene(params, scene, t)
            sid = sample.cloud.sample_id
            cloud_rel = f"clouds/{sid}.bin"
            image_rel = f"images/{sid}.img"
            dataio.write_point_cloud_bin(out / cloud_rel, sample.cloud.points)
            dataio.write_image_raw(out / image_rel, sample.image)
            rows.append(dataio.SampleManifestRow(
                sample_id=sid, timestamp_s=t * 10_000.0 + scene * 20.0,
                position=sample.position, cloud_path=cloud_rel,
                image_path=image_rel, run_id=f"t{t}"))
    dataio.write_manifest(out / "manifest.csv", rows)
    dataio.write_calibration(out / "calib.vxpcal",
                             generate_synthetic_scene(params, 0, 0).projection)
    print(f"wrote {len(rows)} samples under {out}")
    return 0


# --- train ---

def _stage_config(args: argparse.Namespace, cfg: _Resolved) -> StageConfig:
    return StageConfig(
        stage=args.stage,
        epochs=cfg.get("epochs", int),
        base_lr=cfg.get("lr", float),
        lr_decay=cfg.get("lr_decay", float),
        batch_size=cfg.get("batch_size", int),
        seed=cfg.get("seed", int),
        local_loss_mode=cfg.get("local_loss_mode"),
        projection=cfg.get("projection"),
        descriptor_dim=cfg.get("descriptor_dim", int),
        feature_dim=cfg.get("feature_dim", int),
        vfe_dim=cfg.get("vfe_dim", int),
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _Resolved(args)
    stage_cfg = _stage_config(args, cfg)
    cfg.print_if_requested()
    dataset = dataio.load_training_set(args.manifest, args.calib,
                                       default_grid_config())
    if args.stage == "image":
        result = trainer.train_stage_image(dataset, stage_cfg)
    else:
        if not args.resume:
            raise VxpError(f"stage {args.stage!r} needs --resume with the "
                           "previous stage's checkpoint")
        prev = dataio.read_checkpoint(args.resume)
        if args.stage == "local":
            result = trainer.train_stage_local(dataset, prev, stage_cfg)
        else:
            result = trainer.train_stage_global(dataset, prev, prev, stage_cfg)
    dataio.write_checkpoint(args.out, result.params)
    trainer.write_loss_history(str(args.out) + ".loss.csv", result.history)
    print(f"stage {args.stage}: {len(result.history)} steps, "
          f"final loss {result.history[-1][2]:.6g}, checkpoint {args.out}")
    return 0


# --- extract ---

def cmd_extract(args: argparse.Namespace) -> int:
    cfg = _Resolved(args)
    seed = cfg.get("seed", int)
    cfg.print_if_requested()
    params = dataio.read_checkpoint(args.ckpt)
    rows = dataio.parse_manifest(args.manifest)
    base = Path(args.manifest).parent

    descriptors = []
    if args.modality == "2d":
        encoder, head = trainer.image_branch_from(params)
        for row in rows:
            image = dataio.load_image_raw(base / row.image_path)
            desc = heads.image_global_descriptor(image[..., None], encoder, head,
                                                 row.sample_id)
            descriptors.append(desc.numpy())
    else:
        trainer.require_groups(params, ["pc.backbone.", "pc.head."], "extract 3d")
        backbone = trainer.backbone_from(params)
        head = trainer.pc_head_from(params)
        voxel_config = default_grid_config()
        for row in rows:
            cloud = dataio.load_point_cloud_bin(base / row.cloud_path)
            cloud.sample_id = row.sample_id
            _, desc = heads.point_cloud_encode(
                cloud, backbone, head, voxel_config,
                trainer.sample_voxel_seed(row.sample_id, seed))
            descriptors.append(desc.numpy())
    ids = np.arange(len(rows), dtype=np.uint64)  # manifest row ordinals
    dataio.write_descriptors(args.out, ids, np.asarray(descriptors))
    print(f"extracted {len(rows)} {args.modality} descriptors to {args.out}")
    return 0


# --- index ---

def cmd_index(args: argparse.Namespace) -> int:
    ids, descs = dataio.read_descriptors(args.db)
    order = np.argsort(ids, kind="stable")
    dataio.write_descriptors(args.out, ids[order], descs[order])
    print(f"indexed {len(ids)} descriptors to {args.out}")
    return 0


# --- eval ---

def _rows_for(ids, rows, label):
    # descriptor ids are manifest row ordinals (assigned by `extract`)
    if any(int(i) >= len(rows) for i in ids):
        raise VxpError(f"{label}: descriptor id exceeds manifest length; "
                       "descriptors and manifest do not match")
    return rows


def _query_set(ids, descs, rows) -> retrieval.QuerySet:
    rows = _rows_for(ids, rows, "query")
    positions = np.asarray([rows[int(i)].position for i in ids])
    timestamps = np.asarray([rows[int(i)].timestamp_s for i in ids])
    return retrieval.QuerySet(descriptors=descs, positions=positions,
                              ids=ids, timestamps=timestamps)


def _index_for(ids, descs, rows, metric) -> retrieval.RetrievalIndex:
    rows = _rows_for(ids, rows, "database")
    positions = np.asarray([rows[int(i)].position for i in ids])
    timestamps = np.asarray([rows[int(i)].timestamp_s for i in ids])
    return retrieval.build_index(descs, ids, positions, timestamps, metric)


def _parse_recall_spec(spec: str) -> tuple[list[int], bool, bool]:
    ks: list[int] = []
    one_percent = False
    curve = False
    for token in spec.split(","):
        token = token.strip()
        if token == "1pct":
            one_percent = True
        elif token == "curve25":
            curve = True
        elif token:
            ks.append(int(token))
    return ks, one_percent, curve


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _Resolved(args)
    radius = cfg.get("radius", float)
    metric = cfg.get("metric")
    recall_spec = cfg.get("recall")
    cfg.print_if_requested()

    q_ids, q_descs = dataio.read_descriptors(args.query)
    db_ids, db_descs = dataio.read_descriptors(args.db)
    q_rows = dataio.parse_manifest(args.query_manifest)
    db_rows = dataio.parse_manifest(args.db_manifest)
    ks, one_percent, curve = _parse_recall_spec(recall_spec)
    protocol = retrieval.EvalProtocol(success_radius_m=radius,
                                      k_list=tuple(ks) or (1,),
                                      one_percent=one_percent)

    results: list[tuple[str, str, float]] = []
    if args.protocol == "plain":
        queries = _query_set(q_ids, q_descs, q_rows)
        index = _index_for(db_ids, db_descs, db_rows, metric)
        for k in ks:
            results.append(("plain", str(k),
                            retrieval.recall_at_k(queries, index, protocol, k)))
        if one_percent:
            results.append(("plain", "1pct",
                            retrieval.recall_at_one_percent(queries, index, protocol)))
        if curve:
            curve_rows = retrieval.recall_curve(queries, index, protocol)
            curve_path = args.curve_out or (str(args.out) + ".curve.csv")
            retrieval.write_curve_csv(curve_path, curve_rows)
    elif args.protocol == "oxford":
        run_ids = sorted({r.run_id for r in q_rows} & {r.run_id for r in db_rows})
        runs = []
        for run in run_ids:
            q_sel = np.asarray([i for i, qi in enumerate(q_ids)
                                if q_rows[int(qi)].run_id == run], dtype=np.int64)
            d_sel = np.asarray([i for i, di in enumerate(db_ids)
                                if db_rows[int(di)].run_id == run], dtype=np.int64)
            if q_sel.size == 0 or d_sel.size == 0:
                continue
            runs.append((_query_set(q_ids[q_sel], q_descs[q_sel], q_rows),
                         _index_for(db_ids[d_sel], db_descs[d_sel], db_rows, metric)))
        out = retrieval.oxford_pairwise_eval(runs, protocol)
        results.extend(("oxford", k, v) for k, v in out.items())
    else:  # kitti
        queries = _query_set(q_ids, q_descs, q_rows)
        index = _index_for(db_ids, db_descs, db_rows, metric)
        out = retrieval.kitti_revisit_eval(queries, index, protocol)
        results.extend(("kitti", k, v) for k, v in out.items())

    retrieval.write_results_csv(args.out, results)
    for name, k, value in results:
        print(f"{name} recall@{k}: {value:.4f}")
    return 0


# --- plot ---

def _render_svg_curve(points: list[tuple[int, float]], title: str) -> str:
    width, height, margin = 480, 320, 48
    xs = [k for k, _ in points]
    x_max = max(xs)

    def px(k: float) -> float:
        return margin + (k - 1) / max(1, x_max - 1) * (width - 2 * margin)

    def py(r: float) -> float:
        return height - margin - r * (height - 2 * margin)

    poly = " ".join(f"{px(k):.1f},{py(r):.1f}" for k, r in points)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<polyline points="{poly}" fill="none" stroke="#1f6fb2" stroke-width="2"/>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="12">retrieved places K (1..{x_max})</text>',
        f'<text x="14" y="{height / 2:.0f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.0f})">recall</text>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" '
        f'font-size="13">{title}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{margin - 6}" y="{py(frac) + 4:.1f}" '
                     f'text-anchor="end" font-size="10">{frac:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_plot(args: argparse.Namespace) -> int:
    lines = Path(args.input).read_text().splitlines()
    if not lines or lines[0] != "k,recall":
        raise VxpError(f"{args.input}: expected a `k,recall` curve CSV")
    points = []
    for line in lines[1:]:
        k, _, r = line.partition(",")
        points.append((int(k), float(r)))
    if not points:
        raise VxpError(f"{args.input}: no data rows")
    Path(args.out).write_text(_render_svg_curve(points, Path(args.input).stem))
    print(f"wrote recall curve to {args.out}")
    return 0


# --- parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vxp",
        description="cross-modal place recognition pipeline (desk scale)")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--traversals", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("image", "local", "global"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float, dest="lr_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--descriptor-dim", type=int, dest="descriptor_dim")
    p.add_argument("--feature-dim", type=int, dest="feature_dim")
    p.add_argument("--vfe-dim", type=int, dest="vfe_dim")
    p.add_argument("--local-loss-mode", choices=("depth_scaled", "collision_normalized"),
                   dest="local_loss_mode")
    p.add_argument("--projection", choices=("perspective", "orthographic"))
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("extract", help="encode a manifest into descriptors")
    p.add_argument("--modality", choices=("2d", "3d"), required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = subs.add_parser("index", help="validate and sort a descriptor file")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = subs.add_parser("eval", help="recall evaluation")
    p.add_argument("--query", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--query-manifest", required=True, dest="query_manifest")
    p.add_argument("--db-manifest", required=True, dest="db_manifest")
    p.add_argument("--protocol", choices=("oxford", "kitti", "plain"), default="plain")
    p.add_argument("--recall")
    p.add_argument("--radius", type=float)
    p.add_argument("--metric", choices=("L2", "L1"))
    p.add_argument("--out", required=True)
    p.add_argument("--curve-out", dest="curve_out")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("plot", help="render a recall curve CSV as SVG")
    p.add_argument("--in", required=True, dest="input")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (VxpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
