"""Command-line surface: feature extraction, gradient checking, and the
source-structure comparison.

Exit codes: 0 success, 1 input or config error, 2 internal invariant
failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, numcore
from .attention import init_augmentator, sarfe_forward
from .cloudgeom import PointCloud, clip_range, voxel_centers, voxelize
from .config import SarfeConfig
from .errors import (
    ConfigError,
    DomainError,
    EmptyInputError,
    FormatError,
    ParseError,
)
from .ingest import (
    default_scene_spec,
    generate_scene,
    identity_calib,
    load_config,
    load_scene_spec,
    read_calib,
    read_labels,
    read_point_bin,
    to_lidar_box,
)
from .roipool import Box3D, generate_grid_points, init_set_abstraction_mlp, set_abstraction

_INPUT_ERRORS = (ConfigError, FormatError, ParseError, EmptyInputError, DomainError, OSError)


@dataclass(frozen=True)
class CommandOutcome:
    exit_code: int
    message: str
    outputs: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# shared input loading
# ---------------------------------------------------------------------------


def _load_config(config_path, seed_override) -> SarfeConfig:
    config = load_config(config_path) if config_path else SarfeConfig()
    if seed_override is not None:
        config = replace(config, seed=int(seed_override))
    return config


def _load_scene_and_boxes(cloud_path, synth, labels_path, calib_path, config, seed_override):
    if (cloud_path is None) == (synth is None):
        raise ConfigError("give exactly one input: a cloud path or --synth")
    if synth is not None:
        if synth == "default":
            spec = default_scene_spec(seed=config.seed if seed_override is None else seed_override)
        else:
            spec = load_scene_spec(synth)
        scene, boxes = generate_scene(spec)
    else:
        scene = read_point_bin(cloud_path)
        boxes = []
        if labels_path:
            calib = read_calib(calib_path) if calib_path else identity_calib()
            boxes = [
                to_lidar_box(r, calib) for r in read_labels(labels_path) if not r.is_dontcare
            ]
    return clip_range(scene, config.scene_range), boxes


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def build_sources(scene: PointCloud, config: SarfeConfig) -> list[PointCloud]:
    """Voxel-center clouds at doubling voxel sizes, one per configured radius.

    Coarser grids stand in for deeper backbone stages the way stride-2
    convolution stages would.
    """
    sources = []
    for level in range(config.source_count):
        size = tuple(s * (2.0**level) for s in config.voxel_size)
        sources.append(voxel_centers(voxelize(scene, config.scene_range, size)))
    return sources


def extract_roi_features(
    scene: PointCloud, boxes: list[Box3D], config: SarfeConfig, jobs: int = 1
) -> list[np.ndarray]:
    """Per proposal: pool each source at its radius, augment, concatenate.

    Output per box is (g^3, source_count * channel_width). Worker order
    never affects results; outputs are returned in box order.
    """
    sources = build_sources(scene, config)
    rng = np.random.default_rng(config.seed)
    heads = []
    for source in sources:
        mlp = init_set_abstraction_mlp(
            rng, source.feature_width + 3, config.sa_hidden_width, config.channel_width
        )
        aug = init_augmentator(rng, config.channel_width, config.attention_depth)
        heads.append((mlp, aug))

    def one_box(box: Box3D) -> np.ndarray:
        grid = generate_grid_points(box, config.grid_resolution)
        pooled = [
            set_abstraction(grid, source, radius, mlp, config.max_neighbors)
            for source, radius, (mlp, _) in zip(sources, config.radii, heads)
        ]
        return sarfe_forward(pooled, [aug for _, aug in heads]).data

    if jobs > 1 and len(boxes) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one_box, boxes))
    return [one_box(box) for box in boxes]


def _write_feature_csv(arr: np.ndarray, path) -> None:
    with open(path, "w") as f:
        for row in arr:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def run_extract(
    cloud_path=None,
    synth=None,
    labels_path=None,
    calib_path=None,
    config_path=None,
    out_dir=None,
    seed=None,
    as_bin=False,
    jobs=1,
) -> CommandOutcome:
    config = _load_config(config_path, seed)
    scene, boxes = _load_scene_and_boxes(
        cloud_path, synth, labels_path, calib_path, config, seed
    )
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    features = extract_roi_features(scene, boxes, config, jobs=jobs)
    outputs = []
    summary_lines = ["box_id,cx,cy,cz,length,width,height,yaw,tokens,channels"]
    for i, (box, arr) in enumerate(zip(boxes, features)):
        if as_bin:
            path = out / f"roi_{i:03d}.bin"
            numcore.save_checkpoint({"features": arr}, path)
        else:
            path = out / f"roi_{i:03d}.csv"
            _write_feature_csv(arr, path)
        outputs.append(str(path))
        summary_lines.append(
            ",".join(
                [str(i)]
                + [repr(float(v)) for v in box.center]
                + [repr(float(v)) for v in box.size]
                + [repr(float(box.yaw)), str(arr.shape[0]), str(arr.shape[1])]
            )
        )
    summary = out / "summary.csv"
    summary.write_text("\n".join(summary_lines) + "\n")
    outputs.append(str(summary))
    return CommandOutcome(
        exit_code=0,
        message=(
            f"extracted {len(boxes)} RoI feature matrices "
            f"({config.token_count}x{config.source_count * config.channel_width}) to {out}"
        ),
        outputs=tuple(outputs),
    )


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def run_gradcheck(
    config_path=None, trials=100, tol=1e-4, seed=None, corrupt=False
) -> CommandOutcome:
    if tol <= 0:
        raise ConfigError(f"--tol must be > 0, got {tol}")
    if trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {trials}")
    config = _load_config(config_path, seed)
    result = gradcheck.run_suite(trials=trials, tol=tol, seed=config.seed, corrupt=corrupt)
    if result.passed:
        return CommandOutcome(exit_code=0, message=result.summary)
    return CommandOutcome(exit_code=2, message=result.summary)


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def run_analyze(
    cloud_path=None,
    synth=None,
    labels_path=None,
    calib_path=None,
    config_path=None,
    fps_count=None,
    out_csv=None,
    seed=None,
) -> CommandOutcome:
    config = _load_config(config_path, seed)
    if fps_count is not None and fps_count < 1:
        raise ConfigError(f"--fps-count must be >= 1, got {fps_count}")
    scene, boxes = _load_scene_and_boxes(
        cloud_path, synth, labels_path, calib_path, config, seed
    )
    reports = analysis.bottleneck_experiment(scene, boxes, config, fps_count=fps_count)
    analysis.write_reports_csv(reports, out_csv)
    return CommandOutcome(
        exit_code=0,
        message=f"wrote {len(reports)} structure reports for {len(boxes)} proposals to {out_csv}",
        outputs=(str(out_csv),),
    )


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_scene_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("cloud", nargs="?", help="point binary (.bin) of f32 x,y,z,intensity")
    parser.add_argument(
        "--synth",
        nargs="?",
        const="default",
        metavar="SPEC",
        help="use a synthetic scene: omit the value for the built-in default "
        "scene, or give a scene spec TOML",
    )
    parser.add_argument("--labels", help="KITTI label file providing proposal boxes")
    parser.add_argument(
        "--calib", help="3x4 camera-to-lidar calibration file (default: identity)"
    )
    parser.add_argument("--config", help="config TOML; omit for built-in defaults")
    parser.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sarfe",
        description="RoI feature extraction over point-cloud proposals: grid "
        "pooling, offset-attention augmentation, and neighborhood-structure "
        "analysis of point- vs voxel-fed sources.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pe = sub.add_parser(
        "extract", help="pool and augment RoI features, one matrix file per proposal"
    )
    _add_scene_args(pe)
    pe.add_argument("--out", required=True, help="output directory")
    pe.add_argument(
        "--bin",
        action="store_true",
        help="write features in the binary checkpoint container instead of CSV",
    )
    pe.add_argument("--jobs", type=int, default=1, help="parallel RoI workers (default 1)")

    pg = sub.add_parser("gradcheck", help="finite-difference check of every layer gradient")
    pg.add_argument("--config", help="config TOML; its seed drives the random trials")
    pg.add_argument("--seed", type=int, help="override the config seed")
    pg.add_argument("--trials", type=int, default=100, help="random trials (default 100)")
    pg.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    pg.add_argument(
        "--self-test-corrupt",
        action="store_true",
        help="deliberately corrupt one analytic gradient; the check must then fail",
    )

    pa = sub.add_parser(
        "analyze", help="compare neighborhood structure of sampled-point vs voxel sources"
    )
    _add_scene_args(pa)
    pa.add_argument("--fps-count", type=int, help="sampling budget (default: config fps_count)")
    pa.add_argument("--out", required=True, help="output CSV path")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            outcome = run_extract(
                cloud_path=args.cloud,
                synth=args.synth,
                labels_path=args.labels,
                calib_path=args.calib,
                config_path=args.config,
                out_dir=args.out,
                seed=args.seed,
                as_bin=args.bin,
                jobs=args.jobs,
            )
        elif args.command == "gradcheck":
            outcome = run_gradcheck(
                config_path=args.config,
                trials=args.trials,
                tol=args.tol,
                seed=args.seed,
                corrupt=args.self_test_corrupt,
            )
        else:
            outcome = run_analyze(
                cloud_path=args.cloud,
                synth=args.synth,
                labels_path=args.labels,
                calib_path=args.calib,
                config_path=args.config,
                fps_count=args.fps_count,
                out_csv=args.out,
                seed=args.seed,
            )
    except _INPUT_ERRORS as exc:
        outcome = CommandOutcome(exit_code=1, message=f"error: {exc}")
    except Exception as exc:  # broken invariant somewhere inside the pipeline
        outcome = CommandOutcome(exit_code=2, message=f"internal error: {exc}")
    print(outcome.message)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
