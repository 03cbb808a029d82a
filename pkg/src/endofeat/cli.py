"""Command-line harness wiring the pipeline into reproducible batch runs.

Subcommands: pseudolabel | train | detect | match | eval | report.
Each command reads a `key = value` config file (--config) with optional
--set key=value overrides (flags win), validates its inputs up front, and
writes outputs atomically under the configured output directory. Commands
that produce per-frame files skip existing outputs unless --force is
given, log per-item failures, and keep going.

Exit codes: 0 success, 1 partial per-item failure (or training abort),
2 configuration/input error. All randomness derives from the single
`seed` config key, which the evaluation report records in its metadata.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from . import config as runcfg
from . import data, geometry, matching, metrics, network, train
from .config import ConfigError, RunConfig
from .ioutil import atomic_write_text, fmt
from .tensor import Tensor

_INPUT_ERRORS = (
    ConfigError,
    ValueError,
    OSError,
    data.FrameError,
    network.WeightsVersionError,
    network.WeightsTruncatedError,
    network.WeightsShapeError,
)


def _warn(msg: str) -> None:
    print(msg, file=sys.stderr)


def _require_file(path: str, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} is not configured")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _frame_list(config: RunConfig):
    if not config.frames_dir:
        raise ConfigError("frames_dir is not configured")
    if not os.path.isdir(config.frames_dir):
        raise ConfigError(f"frames_dir not found: {config.frames_dir}")
    frames = data.list_frames(config.frames_dir)
    if not frames:
        raise ConfigError(f"no frame_XXXXXX.pgm files in {config.frames_dir}")
    return frames


def _load_weights(config: RunConfig):
    return network.load_weights(_require_file(config.weights_path, "weights file"))


def _load_mask(config: RunConfig):
    if not config.mask_path:
        return None
    return data.load_roi_mask(_require_file(config.mask_path, "mask file"))


def _check_mask(mask, image, frame_id: int) -> None:
    if mask is not None and mask.shape != image.shape:
        raise data.FrameError(
            f"frame {frame_id}: mask shape {mask.shape} != image shape {image.shape}"
        )


def _map_jobs(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _summarize(command: str, results, destination: str) -> int:
    """Count (status, item, message) outcomes; exit 1 when any item failed."""
    wrote = sum(1 for s, _, _ in results if s == "ok")
    skipped = sum(1 for s, _, _ in results if s == "skip")
    failures = [(item, msg) for s, item, msg in results if s == "fail"]
    for item, msg in failures:
        _warn(f"{command}: {item} failed: {msg}")
    print(
        f"{command}: wrote {wrote}, skipped {skipped}, failed {len(failures)}"
        f" -> {destination}"
    )
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_pseudolabel(config: RunConfig, args) -> int:
    frames = _frame_list(config)
    teacher = _load_weights(config)
    mask = _load_mask(config)
    out_dir = runcfg.labels_dir(config)
    os.makedirs(out_dir, exist_ok=True)

    def work(item):
        frame_id, path = item
        out = data.label_path(out_dir, frame_id)
        if os.path.exists(out) and not args.force:
            return ("skip", f"frame {frame_id}", "")
        try:
            image = data.read_pgm(path)
            _check_mask(mask, image, frame_id)
            label = data.generate_pseudolabels(
                teacher,
                image,
                mask,
                config.label_threshold,
                config.label_nms_window,
                config.label_max_points,
            )
            data.save_label(out, label)
            return ("ok", f"frame {frame_id}", "")
        except Exception as exc:  # log per-frame failures, keep going
            return ("fail", f"frame {frame_id}", str(exc))

    return _summarize("pseudolabel", _map_jobs(work, frames, config.jobs), out_dir)


def cmd_train(config: RunConfig, args) -> int:
    frames = _frame_list(config)
    params = _load_weights(config)
    label_dir = runcfg.labels_dir(config)
    missing = [fid for fid, _ in frames if not os.path.isfile(data.label_path(label_dir, fid))]
    if missing:
        raise ConfigError(
            "missing label files for frames "
            + ", ".join(str(m) for m in missing)
            + " (run the pseudolabel command first)"
        )
    samples = [
        train.TrainingSample(data.read_pgm(path), data.load_label(data.label_path(label_dir, fid)))
        for fid, path in frames
    ]

    os.makedirs(config.output_dir, exist_ok=True)
    out_weights = os.path.join(config.output_dir, "trained.weights")
    out_history = os.path.join(config.output_dir, "train_history.csv")
    if os.path.exists(out_weights) and os.path.exists(out_history) and not args.force:
        print(f"train: outputs exist, skipping (use --force to retrain) -> {out_weights}")
        return 0

    train_config = runcfg.train_config(config)
    loss_config = runcfg.loss_config(config)
    checkpoint_dir = None
    if train_config.checkpoint_every > 0:
        checkpoint_dir = os.path.join(config.output_dir, "checkpoints")
        os.makedirs(checkpoint_dir, exist_ok=True)

    try:
        tuned, history = train.finetune(params, samples, train_config, loss_config, checkpoint_dir)
    except train.TrainingDivergedError as exc:
        _warn(f"train: aborted, loss became non-finite at iteration {exc.iteration}")
        return 1
    network.save_weights(tuned, out_weights)
    atomic_write_text(out_history, train.history_csv(history))
    last = history[-1]
    print(
        f"train: {len(history)} iterations, final loss {fmt(last.total)}"
        f" -> {out_weights}"
    )
    return 0


def cmd_detect(config: RunConfig, args) -> int:
    frames = _frame_list(config)
    params = _load_weights(config)
    mask = _load_mask(config)
    out_dir = runcfg.features_dir(config, config.method)
    os.makedirs(out_dir, exist_ok=True)

    def work(item):
        frame_id, path = item
        out = matching.feature_path(out_dir, frame_id)
        if os.path.exists(out) and os.path.exists(out + ".desc") and not args.force:
            return ("skip", f"frame {frame_id}", "")
        try:
            image = data.read_pgm(path)
            _check_mask(mask, image, frame_id)
            heads = network.forward(params, Tensor(image, dtype=params.dtype()))
            dense = network.densify(heads)
            keypoints, descriptors = matching.extract_keypoints(
                dense,
                mask,
                config.detection_threshold,
                config.detection_nms_window,
                config.max_features,
                frame_id,
            )
            matching.save_features(out, keypoints, descriptors)
            return ("ok", f"frame {frame_id}", "")
        except Exception as exc:  # log per-frame failures, keep going
            return ("fail", f"frame {frame_id}", str(exc))

    return _summarize("detect", _map_jobs(work, frames, config.jobs), out_dir)


def cmd_match(config: RunConfig, args) -> int:
    exit_code = 0
    for method in runcfg.method_names(config):
        feat_dir = runcfg.features_dir(config, method)
        if not os.path.isdir(feat_dir):
            raise ConfigError(f"no feature directory for method {method!r}: {feat_dir}")
        ids = matching.list_feature_ids(feat_dir)
        if not ids:
            raise ConfigError(f"no feature files in {feat_dir}")
        id_set = set(ids)
        for step in config.steps:
            out_dir = runcfg.matches_dir(config, method, step)
            os.makedirs(out_dir, exist_ok=True)
            pairs = [(fa, fa + step) for fa in ids if fa + step in id_set and step != 0]

            def work(pair):
                fa, fb = pair
                out = os.path.join(out_dir, f"pair_{fa:06d}_{fb:06d}.matches")
                if os.path.exists(out) and not args.force:
                    return ("skip", f"pair {fa}-{fb}", "")
                try:
                    _, desc_a = matching.load_features(matching.feature_path(feat_dir, fa), fa)
                    _, desc_b = matching.load_features(matching.feature_path(feat_dir, fb), fb)
                    matching.save_matches(out, matching.match_mutual(desc_a, desc_b))
                    return ("ok", f"pair {fa}-{fb}", "")
                except Exception as exc:  # log per-pair failures, keep going
                    return ("fail", f"pair {fa}-{fb}", str(exc))

            results = _map_jobs(work, pairs, config.jobs)
            exit_code = max(exit_code, _summarize(f"match[{method} step {step}]", results, out_dir))
    return exit_code


def _report_paths(config: RunConfig):
    return (
        os.path.join(config.output_dir, "report.json"),
        os.path.join(config.output_dir, "report.csv"),
        os.path.join(config.output_dir, "rotation_histogram.csv"),
    )


def cmd_eval(config: RunConfig, args) -> int:
    frames = _frame_list(config)
    images = {}
    shape = None
    for frame_id, path in frames:
        image = data.read_pgm(path)
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise ConfigError(
                f"frame {frame_id} has shape {image.shape}, expected {shape}"
            )
        images[frame_id] = image
    specular_masks = {fid: data.specularity_mask(img) for fid, img in images.items()}

    poses = None
    if config.pose_path:
        poses = geometry.load_pose_file(_require_file(config.pose_path, "pose file"))
    intrinsics = None
    if config.intrinsics_path:
        intrinsics = geometry.load_intrinsics(
            _require_file(config.intrinsics_path, "intrinsics file")
        )

    methods = runcfg.method_names(config)
    tags = runcfg.model_tags(config)

    features_by_method = {}
    missing = []
    for method in methods:
        feat_dir = runcfg.features_dir(config, method)
        features = {}
        for frame_id, _ in frames:
            path = matching.feature_path(feat_dir, frame_id)
            if not (os.path.isfile(path) and os.path.isfile(path + ".desc")):
                missing.append(f"method {method!r}: frame {frame_id}")
            else:
                features[frame_id] = matching.load_features(path, frame_id)
        features_by_method[method] = features
    if missing:
        raise ConfigError(
            "inconsistent frame coverage, missing feature files:\n  " + "\n  ".join(missing)
        )

    method_evaluations = {}
    reports = []
    for method in methods:
        by_step = {}
        for step in config.steps:
            evaluations, _ = metrics.evaluate_pairs(
                features_by_method[method],
                step,
                shape,
                poses,
                intrinsics,
                tags,
                config.ransac_confidence,
                config.ransac_threshold_px,
                config.seed,
                specular_masks,
            )
            if not evaluations:
                raise ConfigError(f"step {step} leaves no frame pairs to evaluate")
            by_step[step] = evaluations
            reports.append(metrics.aggregate(evaluations, method))
        method_evaluations[method] = by_step

    os.makedirs(config.output_dir, exist_ok=True)
    json_path, csv_path, hist_path = _report_paths(config)
    metadata = {
        "seed": config.seed,
        "ransac_confidence": config.ransac_confidence,
        "ransac_threshold_px": config.ransac_threshold_px,
        "models": "auto" if tags == "auto" else list(tags),
        "steps": list(config.steps),
        "methods": list(methods),
        "grid_coverage": "computed on the first image of each pair",
    }
    metrics.write_report_json(json_path, method_evaluations, metadata)
    csv_text = metrics.report_csv(reports)
    atomic_write_text(csv_path, csv_text)
    atomic_write_text(hist_path, metrics.histogram_csv(reports))
    print(csv_text, end="")
    print(f"eval: {len(reports)} report rows -> {json_path}")
    return 0


def cmd_report(config: RunConfig, args) -> int:
    json_path, csv_path, hist_path = _report_paths(config)
    _require_file(json_path, "report.json (run the eval command first)")
    doc = metrics.read_report_json(json_path)
    reports = []
    for method in sorted(doc.get("methods", {})):
        for step_key in sorted(doc["methods"][method], key=int):
            evaluations = [
                metrics.evaluation_from_dict(e) for e in doc["methods"][method][step_key]
            ]
            if evaluations:
                reports.append(metrics.aggregate(evaluations, method))
    if not reports:
        raise ConfigError(f"{json_path} holds no evaluations")
    csv_text = metrics.report_csv(reports)
    atomic_write_text(csv_path, csv_text)
    atomic_write_text(hist_path, metrics.histogram_csv(reports))
    print(csv_text, end="")
    return 0


_COMMANDS = {
    "pseudolabel": cmd_pseudolabel,
    "train": cmd_train,
    "detect": cmd_detect,
    "match": cmd_match,
    "eval": cmd_eval,
    "report": cmd_report,
}

_HELP = {
    "pseudolabel": "run the teacher network and cache one label file per frame",
    "train": "fine-tune weights on cached labels with warped-pair losses",
    "detect": "extract keypoints + descriptors into per-frame feature files",
    "match": "write mutual-nearest-neighbor match files for frame pairs",
    "eval": "match, fit robust models, and write report.json/report.csv",
    "report": "re-render report.csv and the histogram from report.json",
}


def _parse_args(argv):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable; flags win over the file)",
    )
    common.add_argument("--jobs", type=int, metavar="N", help="parallel workers for per-item work")
    common.add_argument("--force", action="store_true", help="recompute outputs that already exist")

    parser = argparse.ArgumentParser(
        prog="endofeat",
        description="Self-supervised keypoint pipeline for endoscopic image matching.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        subparsers.add_parser(name, parents=[common], help=_HELP[name])
    return parser.parse_args(argv)


def _build_config(args) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = runcfg.load_config(args.config, config)
    if args.set:
        config = runcfg.apply_overrides(config, args.set)
    if args.jobs is not None:
        config = dataclasses.replace(config, jobs=args.jobs)
    if config.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    return config


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        config = _build_config(args)
        return _COMMANDS[args.command](config, args)
    except _INPUT_ERRORS as exc:
        _warn(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
