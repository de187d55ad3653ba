"""
Street Height Estimation - Command Line
Subcommands: gen, train, eval-classifier, estimate, calibrate, rectify
"""

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .candidates import CORNER_CLASSES, ROOFLINE_CLASSES
from .config import PipelineConfig, TrainingConfig, load_config
from .edgemap import EdgeMap, read_gray, read_mask
from .embedding import (
    ClassifierModel,
    ModelBundle,
    cross_validate_head,
    embed_batch,
    fit_head,
    load_net,
    open_set_metrics,
    save_net,
    scale_patches,
    train,
)
from .errors import ErrorCategorizer, InputError, StreetHeightError
from .geometry import CameraPose
from .logging_config import RunContext, configure_logging, get_logger, run_id_for_seed
from .pipeline import (
    SceneInputs,
    make_classifier,
    rectified,
    run_calibration,
    run_multi_sample,
    run_tall_building,
    write_overlay,
)
from .rectify import pitch_homography, rectify_image
from .scene import (
    CORNER_NEGATIVE,
    ROOFLINE_NEGATIVE,
    generate_patch_dataset,
    load_scene,
    load_scene_spec,
    random_scene_spec,
    read_footprint_file,
    read_patch_set,
    render,
    save_scene,
    tall_building_spec,
)

logger = get_logger(__name__)

FAMILIES = {
    "corner": (CORNER_CLASSES, CORNER_NEGATIVE),
    "roofline": (ROOFLINE_CLASSES, ROOFLINE_NEGATIVE),
}


def _emit(document: Dict[str, Any]) -> None:
    print(json.dumps(document, indent=2, sort_keys=True))


def _write_json(path: Path, document: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def _configs(args: argparse.Namespace) -> Tuple[PipelineConfig, TrainingConfig]:
    """Config file, then environment, then command-line flags"""
    pipeline, training = load_config(args.config)
    classifier = None
    if getattr(args, "model", None):
        classifier = str(args.model)
    if args.oracle_classifier:
        classifier = "oracle"
    pipeline = pipeline.with_overrides(seed=args.seed, classifier=classifier,
                                       method=getattr(args, "method", None))
    training = training.with_overrides(seed=args.seed)
    return pipeline, training


def _split_family(patches: np.ndarray, labels: Sequence[str],
                  family: str) -> Tuple[np.ndarray, List[str], np.ndarray]:
    """Labeled patches of a family and its unknown-class patches"""
    classes, negative = FAMILIES[family]
    labels = np.asarray(labels)
    known = np.isin(labels, classes)
    unknown = labels == negative
    return patches[known], labels[known].tolist(), patches[unknown]


def cmd_gen(args: argparse.Namespace, config: PipelineConfig, context: RunContext) -> Dict[str, Any]:
    out = Path(args.out)
    seed = config.seed
    if args.spec:
        spec = load_scene_spec(args.spec)
    elif args.tall:
        spec = tall_building_spec(seed)
    else:
        spec = random_scene_spec(seed, n_buildings=args.buildings, gps_noise_sigma=args.gps_sigma,
                                 n_trees=args.trees)
    rendered = render(spec)
    scene_dir = save_scene(rendered, out / "scene")
    context.log_info("scene written", path=str(scene_dir), buildings=len(spec.buildings))

    document: Dict[str, Any] = {"scene": str(scene_dir), "buildings": len(spec.buildings)}
    if args.scenes > 0:
        specs = [
            random_scene_spec(seed + k, gps_noise_sigma=args.gps_sigma, n_trees=args.trees)
            for k in range(args.scenes)
        ]
        summary = generate_patch_dataset(specs, out / "dataset", config)
        document["dataset"] = {"root": str(summary.root), "counts": summary.counts}
    return document


def _train_family(family: str, patches: np.ndarray, labels: List[str], unknown: np.ndarray,
                  training: TrainingConfig, out: Path, context: RunContext) -> Tuple[ClassifierModel, Dict[str, Any]]:
    context.log_info("training started", family=family, labeled=len(labels), unlabeled=len(unknown))
    result = train(training, scale_patches(patches), labels,
                   unlabeled=scale_patches(unknown) if len(unknown) else None, context=context)
    net_path = out / f"{family}.net"
    save_net(result.net, net_path)
    # the head is fitted on what a later run will actually load
    net = load_net(net_path)
    head = fit_head(embed_batch(net, scale_patches(patches)), labels, training.reject_quantile,
                    training.validation_fraction, training.seed)
    head.save(out / f"{family}.head.json")
    smoothed = result.moving_average(100)
    return ClassifierModel(net, head), {
        "classes": list(result.classes),
        "iterations": len(result.losses),
        "final_loss": float(smoothed[-1]) if len(smoothed) else None,
    }


def cmd_train(args: argparse.Namespace, training: TrainingConfig, context: RunContext) -> Dict[str, Any]:
    data = Path(args.data)
    split = data / "train" if (data / "train").is_dir() else data
    patches, labels = read_patch_set(split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.iterations is not None:
        training = training.with_overrides(iterations=args.iterations)

    models = {}
    document: Dict[str, Any] = {"model": str(out)}
    for family in FAMILIES:
        known, family_labels, unknown = _split_family(patches, labels, family)
        models[family], document[family] = _train_family(family, known, family_labels, unknown,
                                                         training, out, context)
    ModelBundle(corner=models["corner"], roofline=models["roofline"]).save(out)
    return document


def cmd_eval_classifier(args: argparse.Namespace, training: TrainingConfig, context: RunContext) -> Dict[str, Any]:
    data = Path(args.data)
    split = data / "test" if (data / "test").is_dir() else data
    patches, labels = read_patch_set(split)
    bundle = ModelBundle.load(args.model)
    document: Dict[str, Any] = {}
    for family, model in (("corner", bundle.corner), ("roofline", bundle.roofline)):
        classes, negative = FAMILIES[family]
        labels_arr = np.asarray(labels)
        in_family = np.isin(labels_arr, classes) | (labels_arr == negative)
        if not in_family.any():
            continue
        family_patches = patches[in_family]
        truth = labels_arr[in_family].tolist()
        known = list(model.head.classes)
        metrics = open_set_metrics(truth, model.classify(family_patches), known)
        entry: Dict[str, Any] = {"samples": len(truth), **metrics}
        if args.folds:
            embeddings = embed_batch(model.net, scale_patches(family_patches))
            folds = cross_validate_head(embeddings, truth, known, args.folds,
                                        training.reject_quantile, training.seed)
            entry["folds"] = folds.to_dict(orient="records")
            entry["fold_mean"] = folds.drop(columns="fold").mean().to_dict()
        document[family] = entry
        context.log_info("classifier evaluated", family=family, accuracy=round(metrics["accuracy"], 2))
    return document


def _estimate_inputs(args: argparse.Namespace) -> SceneInputs:
    if args.footprints:
        if not args.edge_map:
            raise InputError("--footprints needs --edge-map")
        buildings, camera, _ = read_footprint_file(args.footprints)
        if camera is None:
            raise InputError(f"{args.footprints}: footprint file needs a camera entry")
        edge_map = EdgeMap(read_gray(args.edge_map))
        trees = read_mask(args.tree_mask) if args.tree_mask else np.zeros(edge_map.shape, dtype=bool)
        return SceneInputs(edge_map, trees, tuple(buildings), camera)
    if not args.scene:
        raise InputError("estimate needs --scene or --footprints/--edge-map")
    scene = Path(args.scene)
    rendered = render(load_scene_spec(scene)) if scene.is_file() else load_scene(scene)
    return SceneInputs.from_rendered(rendered)


def cmd_estimate(args: argparse.Namespace, config: PipelineConfig, context: RunContext) -> Dict[str, Any]:
    inputs = _estimate_inputs(args)
    if args.multi and args.multi > 1:
        if not args.scene:
            raise InputError("--multi re-renders the block and needs --scene")
        scene = Path(args.scene)
        spec = load_scene_spec(scene if scene.is_file() else scene / "scene.json")
        bundle = None if config.uses_oracle else ModelBundle.load(config.classifier)
        report = run_multi_sample(spec, config, args.multi, bundle, context)
    else:
        classifier = None if config.method == "roofline_only" else make_classifier(config, inputs)
        report = run_tall_building(inputs, config, classifier, context)

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "report.json")
        write_overlay(out / "overlay.ppm", rectified(inputs), report)
        context.log_info("report written", path=str(out / "report.json"))
    return report.to_dict()


def cmd_calibrate(args: argparse.Namespace, config: PipelineConfig, context: RunContext) -> Dict[str, Any]:
    inputs = _estimate_inputs(args)
    calibration = run_calibration(inputs, config, context=context)
    document = {"schema": 1, "calibration": calibration.to_dict()}
    if args.out:
        _write_json(Path(args.out) / "calibration.json", document)
    return document


def cmd_rectify(args: argparse.Namespace, config: PipelineConfig, context: RunContext) -> Dict[str, Any]:
    edge_map = EdgeMap.read_pgm(args.input)
    pose = CameraPose(
        position=(0.0, 0.0),
        heading=0.0,
        pitch=math.radians(args.pitch),
        focal_length=args.focal_length,
        image_width=edge_map.width,
        image_height=edge_map.height,
    )
    h = pitch_homography(pose)
    output = Path(args.output) if args.output else Path(args.out or ".") / "rectified.pgm"
    output.parent.mkdir(parents=True, exist_ok=True)
    rectify_image(edge_map, h).write_pgm(output)
    context.log_info("view rectified", output=str(output), pitch_deg=args.pitch)
    return {"output": str(output), "homography": h.matrix.tolist()}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Random seed (overrides config)")
    common.add_argument("--config", help="JSON config with pipeline/training sections")
    common.add_argument("--oracle-classifier", action="store_true",
                        help="Validate candidates from ground truth instead of a trained model")
    common.add_argument("--out", help="Output directory")

    parser = argparse.ArgumentParser(prog="street-height",
                                     description="Building heights from street-level edge maps and footprints")
    parser.add_argument("--log-level", default=None, help="Logging level (default STREET_HEIGHT_LOG_LEVEL or INFO)")
    parser.add_argument("--json-logs", action="store_true", help="Write logs as JSON lines")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="Render a synthetic scene and a patch dataset")
    gen.add_argument("--spec", help="Render this scene.json instead of a random block")
    gen.add_argument("--tall", action="store_true", help="Render the single tall-building scene")
    gen.add_argument("--buildings", type=int, help="Buildings in the random block (default 3-8)")
    gen.add_argument("--trees", type=int, default=0, help="Trees per scene")
    gen.add_argument("--gps-sigma", type=float, default=1.5, help="GPS noise standard deviation in metres")
    gen.add_argument("--scenes", type=int, default=5, help="Scenes in the patch dataset (0 to skip)")

    tr = commands.add_parser("train", parents=[common], help="Train corner and roofline classifiers")
    tr.add_argument("--data", required=True, help="Dataset directory (with train/) or a split directory")
    tr.add_argument("--iterations", type=int, help="Training iterations (overrides config)")

    ev = commands.add_parser("eval-classifier", parents=[common], help="Open-set metrics on a test split")
    ev.add_argument("--model", required=True, help="Model directory written by train")
    ev.add_argument("--data", required=True, help="Dataset directory (with test/) or a split directory")
    ev.add_argument("--folds", type=int, default=0, help="Also report stratified k-fold head metrics")

    for name, help_text in (("estimate", "Estimate building heights"),
                            ("calibrate", "Calibrate the camera position only")):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--scene", help="Scene directory written by gen, or a scene.json")
        sub.add_argument("--model", help="Model directory written by train")
        sub.add_argument("--footprints", help="Footprint JSON with a camera entry")
        sub.add_argument("--edge-map", help="Edge map PGM for --footprints")
        sub.add_argument("--tree-mask", help="Tree mask PGM for --footprints")
        if name == "estimate":
            sub.add_argument("--multi", type=int, default=1, help="Median over n stepped-back camera samples")
            sub.add_argument("--method", choices=["corner", "roofline_only"], help="Estimation method")

    rect = commands.add_parser("rectify", parents=[common], help="Rectify an upward-looking edge map")
    rect.add_argument("--input", required=True, help="Edge map PGM")
    rect.add_argument("--pitch", type=float, required=True, help="Camera pitch in degrees, positive looking up")
    rect.add_argument("--focal-length", type=float, default=320.0, help="Focal length in pixels")
    rect.add_argument("--output", help="Output PGM (default <out>/rectified.pgm)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or os.environ.get("STREET_HEIGHT_LOG_LEVEL", "INFO"), args.json_logs)

    context = RunContext(component="cli")
    try:
        pipeline_config, training_config = _configs(args)
        context = RunContext(run_id_for_seed(pipeline_config.seed), component="cli")
        context.log_info("command started", command=args.command)
        if args.command in ("train",) and not args.out:
            raise InputError("train needs --out")
        if args.command == "gen" and not args.out:
            raise InputError("gen needs --out")
        handlers = {
            "gen": lambda: cmd_gen(args, pipeline_config, context),
            "train": lambda: cmd_train(args, training_config, context),
            "eval-classifier": lambda: cmd_eval_classifier(args, training_config, context),
            "estimate": lambda: cmd_estimate(args, pipeline_config, context),
            "calibrate": lambda: cmd_calibrate(args, pipeline_config, context),
            "rectify": lambda: cmd_rectify(args, pipeline_config, context),
        }
        _emit(handlers[args.command]())
        context.log_info("command finished", command=args.command, elapsed_s=round(context.get_duration(), 3))
        return 0
    except (StreetHeightError, FileNotFoundError) as e:
        category = ErrorCategorizer.categorize_error(e)
        context.log_error("command failed", command=args.command, category=category, error=str(e))
        return ErrorCategorizer.exit_code(e)
    except KeyboardInterrupt:
        context.log_warning("command cancelled", command=args.command)
        return 1
    except Exception as e:
        logger.exception("unexpected error", command=args.command, error=str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
