"""Batch command-line front end.

Subcommands: ``gen`` (synthetic dataset), ``train`` (contrastive
training), ``embed`` (features to a database file), ``query`` (top-N
dump), ``eval`` (recall / max-F1 / PR curves), ``plot`` (SVG charts from
the CSVs).

Configuration starts from a profile (``desk`` by default, ``paper`` for
full-scale settings), optionally merges a JSON config file, then applies
individual flag and ``--set key=value`` overrides, in that order. The
effective configuration is echoed into every output directory. Exit
codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

The environment variable ``I2P_THREADS`` caps numeric-library
parallelism; it must be honored before numpy loads, so heavy imports
stay inside the command handlers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field


@dataclass
class RunConfig:
    """Flat bag of every knob, serializable as JSON."""

    profile: str = "desk"
    seed: int = 0
    # encoder
    patch_size: int = 8
    blocks: int = 2
    image_heads: int = 4
    cloud_heads: int = 2
    image_dim: int = 64
    cloud_dim: int = 64
    cloud_tokens: int = 128
    neighbors: int = 16
    ffn_mult: int = 2
    tokenizer_hidden: list = field(default_factory=lambda: [32, 64])
    trainable_blocks: int | None = None
    # aggregation / model
    clusters: int = 16
    global_dim: int = 64
    intra_norm: bool = True
    use_saliency: bool = True
    ground_removal: bool = True
    assign_sharpness: float = 15.0
    projection_decorrelation: bool = True
    # rendering / dataset
    image_height: int = 64
    image_width: int = 256
    extent_m: float = 240.0
    landmark_count: int = 80
    cloud_points: int = 2048
    noise_sigma_m: float = 0.02
    window_m: float = 40.0
    trajectory: str = "walk"  # or "line"
    step_m: float = 2.0
    spacing_m: float = 3.0
    revisit_fraction: float = 0.0
    # loss
    temperature: float = 0.07
    euclidean_weight: float = 1.0
    hyperbolic_weight: float = 2.0
    curvature: float = 1.0
    relation_metric: str = "dot"
    symmetrize_infonce: bool = False
    # optimizer
    optimizer: str = "adam"
    lr_image: float = 1e-3
    lr_cloud: float = 3e-5
    lr_aggregator: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 120
    warmup_epochs: int = 3
    batch_size: int = 8
    accum_steps: int = 1
    cosine_schedule: bool = True
    cloud_freeze_epochs: int = 40


PAPER_PROFILE = dict(
    profile="paper",
    patch_size=16,
    blocks=12,
    image_heads=6,
    cloud_heads=3,
    image_dim=384,
    cloud_dim=384,
    cloud_tokens=3072,
    neighbors=32,
    ffn_mult=4,
    tokenizer_hidden=[128, 1024],
    clusters=64,
    global_dim=256,
    image_height=512,
    image_width=1024,
    cloud_points=16384,
    optimizer="sgd",
    lr_image=1e-4,
    lr_cloud=1e-5,
    lr_aggregator=5e-4,
    weight_decay=1e-3,
    epochs=100,
    warmup_epochs=3,
    batch_size=4,
    accum_steps=64,
    cosine_schedule=True,
    cloud_freeze_epochs=0,
    projection_decorrelation=False,
)

PROFILES = {"desk": {}, "paper": PAPER_PROFILE}


def _parse_value(raw: str, current):
    """Parse a --set value against the type of the current field value."""
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, int) and current is not None:
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return json.loads(raw)
    if current is None:
        return None if raw.lower() in ("none", "null") else int(raw)
    return raw


def build_run_config(args) -> RunConfig:
    from .errors import ConfigError

    profile = getattr(args, "profile", None) or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (have: {sorted(PROFILES)})")
    cfg = RunConfig(**{**PROFILES[profile]})
    cfg.profile = profile

    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path!r}: {exc}") from exc
        for key, value in doc.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, value)

    for key in vars(cfg):
        if hasattr(args, key) and getattr(args, key) is not None and key != "profile":
            setattr(cfg, key, getattr(args, key))

    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set wants key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _parse_value(raw, getattr(RunConfig(), key)))
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return cfg


def encoder_config(rc: RunConfig):
    from .encoders import EncoderConfig

    return EncoderConfig(
        patch_size=rc.patch_size,
        blocks=rc.blocks,
        image_heads=rc.image_heads,
        cloud_heads=rc.cloud_heads,
        image_dim=rc.image_dim,
        cloud_dim=rc.cloud_dim,
        cloud_tokens=rc.cloud_tokens,
        neighbors=rc.neighbors,
        ffn_mult=rc.ffn_mult,
        tokenizer_hidden=tuple(rc.tokenizer_hidden),
        trainable_blocks=rc.trainable_blocks,
    )


def model_config(rc: RunConfig):
    from .model import ModelConfig

    return ModelConfig(
        encoder=encoder_config(rc),
        clusters=rc.clusters,
        global_dim=rc.global_dim,
        intra_norm=rc.intra_norm,
        use_saliency=rc.use_saliency,
        image_hw=(rc.image_height, rc.image_width, 3),
        ground_removal=rc.ground_removal,
    )


def loss_config(rc: RunConfig):
    from .losses import LossConfig

    return LossConfig(
        temperature=rc.temperature,
        euclidean_weight=rc.euclidean_weight,
        hyperbolic_weight=rc.hyperbolic_weight,
        curvature=rc.curvature,
        relation_metric=rc.relation_metric,
        symmetrize_infonce=rc.symmetrize_infonce,
    )


def optim_settings(rc: RunConfig):
    from .training import OptimSettings

    return OptimSettings(
        optimizer=rc.optimizer,
        lr_image=rc.lr_image,
        lr_cloud=rc.lr_cloud,
        lr_aggregator=rc.lr_aggregator,
        weight_decay=rc.weight_decay,
        epochs=rc.epochs,
        warmup_epochs=rc.warmup_epochs,
        batch_size=rc.batch_size,
        accum_steps=rc.accum_steps,
        cosine_schedule=rc.cosine_schedule,
        cloud_freeze_epochs=rc.cloud_freeze_epochs,
    )


def render_config(rc: RunConfig):
    from .datapipe import RenderConfig

    return RenderConfig(
        image_height=rc.image_height,
        image_width=rc.image_width,
        cloud_points=rc.cloud_points,
        noise_sigma_m=rc.noise_sigma_m,
        window_m=rc.window_m,
    )


def echo_config(rc: RunConfig, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(dataclasses.asdict(rc), fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- commands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .datapipe import generate_scene, make_dataset, trajectory_line, trajectory_random_walk, write_dataset
    from .errors import ConfigError, DataError

    rc = build_run_config(args)
    if args.poses is None or args.poses < 2:
        raise ConfigError("gen needs --poses >= 2")
    scene = generate_scene(rc.seed, extent_m=rc.extent_m, landmark_count=rc.landmark_count)
    if rc.trajectory == "line":
        start = -rc.step_m * (args.poses - 1) / 2.0
        traj = trajectory_line(args.poses, step_m=rc.step_m, start=(start, 0.0))
    elif rc.trajectory == "walk":
        traj = trajectory_random_walk(
            rc.seed, args.poses, rc.extent_m, step_m=rc.step_m, revisit_fraction=rc.revisit_fraction
        )
    else:
        raise ConfigError(f"unknown trajectory kind {rc.trajectory!r}")
    pairs, query_ids, database_ids = make_dataset(scene, traj, rc.spacing_m, render_config(rc))
    if not database_ids:
        raise DataError(
            "every pose became a query; lower --set step_m or raise spacing_m so the database is non-empty"
        )
    write_dataset(args.out, pairs, query_ids, database_ids)
    echo_config(rc, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out} ({len(query_ids)} queries, {len(database_ids)} database)")
    return 0


def _precompute_patches(pairs, mcfg):
    import numpy as np

    from .model import cloud_patches_for_sample, image_patches_for_sample

    images = np.stack([image_patches_for_sample(p.image, mcfg) for p in pairs])
    clouds = np.stack([cloud_patches_for_sample(p.cloud, mcfg, p.pose.id) for p in pairs])
    return images, clouds


def cmd_train(args) -> int:
    import numpy as np

    from .datapipe import load_dataset
    from .model import decorrelate_projections, init_model, load_model, save_model
    from .nncore import load_checkpoint, save_checkpoint
    from .training import Optimizer, train

    from .nncore import Tensor

    rc = build_run_config(args)
    mcfg = model_config(rc)
    lcfg = loss_config(rc)
    settings = optim_settings(rc)
    pairs, _, _ = load_dataset(args.data)

    start_epoch = 0
    if args.resume:
        params, extra = load_model(args.resume, rc.seed, mcfg)
        start_epoch = int(extra.get("epoch", 0))
    else:
        params = init_model(rc.seed, mcfg)
    named = dict(params.named())
    optimizer = Optimizer(named, settings)
    if args.resume:
        opt_base = args.resume + ".opt"
        if os.path.exists(opt_base + ".json"):
            arrays, opt_extra = load_checkpoint(opt_base)
            optimizer.load_state(arrays, opt_extra)

    image_patches, cloud_patches = _precompute_patches(pairs, mcfg)
    if rc.projection_decorrelation and not args.resume:
        decorrelate_projections(params, image_patches, cloud_patches, mcfg)

    os.makedirs(args.out, exist_ok=True)
    echo_config(rc, args.out)

    def save(base: str, epoch: int) -> None:
        save_model(base, params, extra={"epoch": epoch, "config": dataclasses.asdict(rc)})
        arrays, opt_extra = optimizer.state_arrays()
        save_checkpoint(base + ".opt", {k: Tensor(v) for k, v in arrays.items()}, extra=opt_extra)

    log_path = os.path.join(args.out, "train_log.csv")
    with open(log_path, "w") as log:
        log.write("epoch,total,infonce,relation,lr_factor\n")

        def on_epoch(stats):
            log.write(
                f"{stats.epoch},{stats.total:.8f},{stats.infonce:.8f},{stats.relation:.8f},{stats.lr_factor:.6f}\n"
            )
            log.flush()
            if args.save_every and stats.epoch % args.save_every == 0 and stats.epoch < settings.epochs:
                save(os.path.join(args.out, f"checkpoint_ep{stats.epoch}"), stats.epoch)
            if not args.quiet:
                print(
                    f"epoch {stats.epoch}/{settings.epochs} total={stats.total:.5f} "
                    f"infonce={stats.infonce:.5f} relation={stats.relation:.5f}"
                )

        train(
            params,
            image_patches,
            cloud_patches,
            mcfg,
            lcfg,
            settings,
            seed=rc.seed,
            start_epoch=start_epoch,
            optimizer=optimizer,
            on_epoch=on_epoch,
        )

    ckpt = os.path.join(args.out, "checkpoint")
    save(ckpt, settings.epochs)
    print(f"checkpoint written to {ckpt}.bin / {ckpt}.json")
    return 0


def _config_from_checkpoint(base_path: str, args) -> RunConfig:
    """Effective config: checkpoint's stored config, then flag overrides."""
    from .errors import DataError
    from .nncore import load_checkpoint

    _, extra = load_checkpoint(base_path)
    stored = extra.get("config")
    if not stored:
        raise DataError(f"checkpoint {base_path!r} carries no config echo")
    rc = RunConfig(**{k: v for k, v in stored.items() if hasattr(RunConfig(), k)})
    for key in vars(rc):
        if hasattr(args, key) and getattr(args, key) is not None and key != "profile":
            setattr(rc, key, getattr(args, key))
    return rc


def cmd_embed(args) -> int:
    import numpy as np

    from .aggregation import GlobalFeature
    from .datapipe import load_dataset
    from .errors import ConfigError
    from .evaluation import build_database, save_database
    from .model import forward_cloud, forward_image, load_model
    from .nncore import Tensor

    if args.modality not in ("image", "cloud"):
        raise ConfigError(f"--modality must be image or cloud, got {args.modality!r}")
    rc = _config_from_checkpoint(args.checkpoint, args)
    mcfg = model_config(rc)
    params, _ = load_model(args.checkpoint, rc.seed, mcfg)
    pairs, query_ids, database_ids = load_dataset(args.data)

    subset = args.subset or ("query" if args.modality == "image" else "database")
    if subset == "query":
        wanted = set(query_ids)
    elif subset == "database":
        wanted = set(database_ids)
    elif subset == "all":
        wanted = {p.pose.id for p in pairs}
    else:
        raise ConfigError(f"--subset must be query, database, or all, got {subset!r}")
    chosen = [p for p in pairs if p.pose.id in wanted]
    if not chosen:
        raise ConfigError(f"subset {subset!r} selects no samples")

    image_patches, cloud_patches = _precompute_patches(chosen, mcfg)
    feats = []
    for lo in range(0, len(chosen), args.batch):
        hi = lo + args.batch
        if args.modality == "image":
            out = forward_image(Tensor(image_patches[lo:hi]), params, mcfg).data
        else:
            out = forward_cloud(Tensor(cloud_patches[lo:hi]), params, mcfg).data
        for row, pair in zip(out, chosen[lo:hi]):
            feats.append(GlobalFeature(row.astype(np.float32), args.modality, pair.pose.id))
    db = build_database(feats, [p.pose for p in chosen], modality=args.modality)
    save_database(db, args.out)
    print(f"embedded {len(feats)} {args.modality} samples into {args.out}.bin / {args.out}.json")
    return 0


def _load_pair_of_databases(args):
    from .errors import DataError
    from .evaluation import load_database

    database = load_database(args.database)
    queries = load_database(args.queries)
    if database.modality != "cloud":
        raise DataError(f"--database file holds {database.modality!r} features, expected 'cloud'")
    if queries.modality != "image":
        raise DataError(f"--queries file holds {queries.modality!r} features, expected 'image'")
    return database, queries


def _run_queries(database, queries, n):
    from .evaluation import query_topn

    results = []
    for row, qid in zip(queries.features, queries.ids):
        res = query_topn(database, row, n)
        res.query_id = int(qid)
        results.append(res)
    return results


def cmd_query(args) -> int:
    from .evaluation import write_rankings_csv

    database, queries = _load_pair_of_databases(args)
    n = min(args.topn, len(database))
    results = _run_queries(database, queries, n)
    write_rankings_csv(args.out, results)
    print(f"wrote rankings for {len(results)} queries to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import max_f1, pr_curve, recall_at_n, write_metrics_csv, write_pr_csv, write_rankings_csv

    database, queries = _load_pair_of_databases(args)
    topn = sorted({int(v) for v in args.topn.split(",")})
    if not topn or topn[0] < 1:
        from .errors import ConfigError

        raise ConfigError(f"bad --topn list {args.topn!r}")
    n_max = min(topn[-1], len(database))
    results = _run_queries(database, queries, n_max)
    poses = {**database.poses, **queries.poses}

    recalls = {n: recall_at_n(results, poses, eta_m=args.eta, n=n) for n in topn}
    f1, threshold = max_f1(results, poses, eta_m=args.eta)
    points = pr_curve(results, poses, eta_m=args.eta)

    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), recalls, f1, threshold)
    write_pr_csv(os.path.join(args.out, "pr.csv"), points)
    write_rankings_csv(os.path.join(args.out, "rankings.csv"), results)
    for n in topn:
        print(f"recall@{n} = {recalls[n]:.4f}")
    print(f"max F1 = {f1:.4f} at threshold {threshold:.4f}")
    return 0


# -- plotting ------------------------------------------------------------------------


def _svg_chart(path, series, x_label, y_label, title, y_range=(0.0, 1.05)):
    """Minimal deterministic SVG line chart; series is {name: [(x, y), ...]}."""
    width, height, margin = 520, 360, 50
    xs = [x for pts in series.values() for x, _ in pts]
    if not xs:
        raise ValueError("nothing to plot")
    x_min, x_max = min(xs), max(xs)
    if x_max == x_min:
        x_max = x_min + 1.0
    y_min, y_max = y_range

    def sx(x):
        return margin + (x - x_min) / (x_max - x_min) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_min) / (y_max - y_min) * (height - 2 * margin)

    colors = ["#1f6fb2", "#c23b22", "#3a7d44", "#8a5db0"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="14" y="{height / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.0f})">{y_label}</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(y_min + tick * (y_max - y_min))
        val = y_min + tick * (y_max - y_min)
        out.append(f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{val:.2f}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(
            f'<text x="{width - margin:.0f}" y="{margin + 14 * i:.0f}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def cmd_plot(args) -> int:
    import csv as csv_mod

    from .errors import DataError

    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.metrics:
        try:
            rows = list(csv_mod.DictReader(open(args.metrics)))
        except OSError as exc:
            raise DataError(f"cannot read {args.metrics!r}: {exc}") from exc
        pts = [(float(r["N"]), float(r["value"])) for r in rows if r["metric"] == "recall"]
        if pts:
            path = os.path.join(args.out, "topn.svg")
            _svg_chart(path, {"recall@N": sorted(pts)}, "N", "recall", "Top-N recall")
            wrote.append(path)
    if args.pr:
        try:
            rows = list(csv_mod.DictReader(open(args.pr)))
        except OSError as exc:
            raise DataError(f"cannot read {args.pr!r}: {exc}") from exc
        pts = [(float(r["recall"]), float(r["precision"])) for r in rows]
        if pts:
            path = os.path.join(args.out, "pr.svg")
            _svg_chart(path, {"precision": pts}, "recall", "precision", "Precision-recall")
            wrote.append(path)
    if not wrote:
        raise DataError("nothing to plot; pass --metrics and/or --pr")
    print("wrote " + ", ".join(wrote))
    return 0


# -- argument parsing -------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--profile", choices=sorted(PROFILES), default=None, help="configuration profile")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i2ploc", description="cross-modal place recognition pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic paired dataset")
    _add_common(p)
    p.add_argument("--poses", type=int, required=True, help="trajectory length (>= 2)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the dual-tower model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint base path to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--tau", dest="temperature", type=float, default=None)
    p.add_argument("--save-every", dest="save_every", type=int, default=0,
                   help="also snapshot the checkpoint every N epochs")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="encode one modality into a feature database")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint base path")
    p.add_argument("--modality", required=True)
    p.add_argument("--out", required=True, help="output database base path")
    p.add_argument("--subset", default=None, help="query | database | all")
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("query", help="dump top-N rankings for query features")
    p.add_argument("--database", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--topn", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="compute retrieval metrics and PR curve")
    p.add_argument("--database", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--eta", type=float, default=20.0)
    p.add_argument("--topn", default="1,5,10,15,20")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="emit SVG charts from metric CSVs")
    p.add_argument("--metrics", default=None)
    p.add_argument("--pr", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("I2P_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)

    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import I2PError

    try:
        return args.func(args)
    except I2PError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
