"""Command-line entry point.

Grammar:
    sbl <command> [--config PATH] [--set KEY=VALUE ...] [--out DIR] [--seed N] [--force]

Commands: synth, stats, train, eval, rank, predict, ablate. Configuration is a
JSON file with sections (synth, train, detector, data, extractor, eval, rank,
predict, ablate) plus top-level stats_path / checkpoint / output_dir keys;
unknown keys are rejected. --set overrides use dotted paths
(e.g. --set train.new_min=0.3) and take precedence over the file. Relative
paths inside the config resolve against the config file's directory. Every run
writes the merged configuration snapshot next to its outputs.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 stale salience statistics.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .data import (
    DataError,
    Dataset,
    SynthConfig,
    load_dataset,
    save_dataset,
    synthesize_dataset,
    to_chips,
)
from .evaluation import evaluate_dataset
from .geometry import Box, Detection, nms
from .model import DetectorConfig, load_checkpoint, predict
from .salience import (
    TAPS,
    FrozenExtractor,
    StaleStatsError,
    compute_stats,
    load_stats,
    rank_images,
    save_stats,
)
from .train import TrainConfig, Trainer

COMMANDS = ("synth", "stats", "train", "eval", "rank", "predict", "ablate")


class ConfigError(Exception):
    """Raised for unknown keys, bad values, or missing required settings."""


_SECTION_KEYS = {
    "synth": {f.name for f in dataclasses.fields(SynthConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "detector": {f.name for f in dataclasses.fields(DetectorConfig)},
    "data": {"train_dir", "eval_dir", "format", "class_names"},
    "extractor": {"seed", "channels", "weights_path"},
    "eval": {"iou_threshold", "eleven_point", "score_threshold", "nms_threshold", "max_detections"},
    "rank": {"k", "tap"},
    "predict": {"input", "chip_overlap", "score_threshold"},
    "ablate": {"variants", "seeds"},
}
_TOP_LEVEL_KEYS = set(_SECTION_KEYS) | {"stats_path", "checkpoint", "output_dir"}

_DEFAULTS = {
    "data": {"train_dir": None, "eval_dir": None, "format": "native-json", "class_names": None},
    "extractor": {"seed": 0, "channels": [8, 16, 32, 64], "weights_path": None},
    "eval": {
        "iou_threshold": 0.5,
        "eleven_point": True,
        "score_threshold": 0.05,
        "nms_threshold": 0.3,
        "max_detections": 300,
    },
    "rank": {"k": 10, "tap": None},
    "predict": {"input": None, "chip_overlap": 32, "score_threshold": None},
    "ablate": {"variants": None, "seeds": None},
}


def _validate_keys(raw: dict) -> None:
    for key, value in raw.items():
        if key not in _TOP_LEVEL_KEYS:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {sorted(_TOP_LEVEL_KEYS)}")
        if key in _SECTION_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            for sub in value:
                if sub not in _SECTION_KEYS[key]:
                    raise ConfigError(
                        f"unknown config key '{key}.{sub}'; "
                        f"valid keys: {sorted(_SECTION_KEYS[key])}"
                    )


def _apply_set(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    path, text = assignment.split("=", 1)
    parts = path.strip().split(".")
    if not all(parts):
        raise ConfigError(f"--set has an empty path component: {assignment!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {path!r} descends into a non-object")
    node[parts[-1]] = value


class RunConfig:
    """Merged, validated configuration for one CLI invocation."""

    def __init__(self, raw: dict, base_dir: str):
        _validate_keys(raw)
        self.raw = raw
        self.base_dir = base_dir
        merged = {name: dict(defaults) for name, defaults in _DEFAULTS.items()}
        for section, defaults in merged.items():
            defaults.update(raw.get(section, {}))
        self.data = merged["data"]
        self.extractor_cfg = merged["extractor"]
        self.eval_params = merged["eval"]
        self.rank_params = merged["rank"]
        self.predict_params = merged["predict"]
        self.ablate_params = merged["ablate"]
        self.stats_path = raw.get("stats_path", "salience_stats.json")
        self.checkpoint = raw.get("checkpoint")
        self.output_dir = raw.get("output_dir")
        try:
            self.synth = SynthConfig(**{
                k: tuple(v) if isinstance(v, list) else v for k, v in raw.get("synth", {}).items()
            })
            self.train = TrainConfig(**raw.get("train", {}))
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        self._detector_overrides = raw.get("detector", {})

    def resolve(self, path: str | None) -> str | None:
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def detector_config(self, num_classes: int, input_size: int | None = None) -> DetectorConfig:
        payload = {
            k: tuple(v) if isinstance(v, list) else v for k, v in self._detector_overrides.items()
        }
        payload.setdefault("num_classes", num_classes)
        if input_size is not None:
            payload.setdefault("input_size", input_size)
        try:
            return DetectorConfig(**payload)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def build_extractor(self) -> FrozenExtractor:
        weights = self.resolve(self.extractor_cfg.get("weights_path"))
        if weights:
            if not os.path.exists(weights):
                raise DataError(f"{weights}: extractor weights file not found")
            return FrozenExtractor.from_weights(weights)
        return FrozenExtractor(
            seed=int(self.extractor_cfg["seed"]), channels=tuple(self.extractor_cfg["channels"])
        )

    def load_split(self, which: str) -> Dataset:
        dir_key = f"{which}_dir"
        path = self.data.get(dir_key)
        if not path:
            raise ConfigError(f"config is missing data.{dir_key}")
        names = self.data.get("class_names")
        return load_dataset(
            self.resolve(path),
            format=self.data.get("format", "native-json"),
            class_names=tuple(names) if names else None,
        )


def load_config(path: str | None, sets: list[str], seed: int | None) -> RunConfig:
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base_dir = os.path.dirname(os.path.abspath(path))
    else:
        raw = {}
        base_dir = os.getcwd()
    for assignment in sets:
        _apply_set(raw, assignment)
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
        raw.setdefault("synth", {})["seed"] = seed
    return RunConfig(raw, base_dir)


def _out_dir(args, config: RunConfig, command: str) -> str:
    out = args.out or config.output_dir or os.path.join("runs", command)
    os.makedirs(out, exist_ok=True)
    return out


def _write_snapshot(config: RunConfig, out_dir: str) -> None:
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_trained(config: RunConfig):
    path = config.resolve(config.checkpoint)
    if not path:
        raise ConfigError("no checkpoint configured; set the top-level 'checkpoint' key")
    if not os.path.exists(path):
        raise DataError(f"{path}: checkpoint not found")
    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_net()


def cmd_synth(args, config: RunConfig) -> int:
    out = _out_dir(args, config, "synth")
    _write_snapshot(config, out)
    dataset = synthesize_dataset(config.synth)
    save_dataset(dataset, out)
    boxes = sum(len(img.boxes) for img in dataset)
    print(f"wrote {len(dataset)} images ({boxes} boxes, classes {list(dataset.class_names)}) to {out}")
    return 0


def cmd_stats(args, config: RunConfig) -> int:
    dataset = config.load_split("train")
    extractor = config.build_extractor()
    stats = compute_stats(
        dataset, extractor, taps=TAPS, new_min=config.train.new_min, new_max=config.train.new_max
    )
    path = config.resolve(config.stats_path)
    try:
        save_stats(stats, path, force=args.force)
    except FileExistsError:
        raise ConfigError(f"{path} already exists; rerun with --force to replace it") from None
    for tap, (mn, mx) in sorted(stats.tap_stats.items()):
        print(f"{tap}: raw salience range [{mn:.6f}, {mx:.6f}]")
    print(f"wrote statistics for {len(dataset)} images to {path}")
    return 0


def _stats_for_training(config: RunConfig, dataset: Dataset, extractor: FrozenExtractor):
    path = config.resolve(config.stats_path)
    if not os.path.exists(path):
        raise DataError(f"{path}: salience statistics not found; run `sbl stats` first")
    stats = load_stats(path)
    if (stats.new_min, stats.new_max) != (config.train.new_min, config.train.new_max):
        # The band is part of the statistics; rebuild around the stored ranges.
        stats = dataclasses.replace(
            stats, new_min=config.train.new_min, new_max=config.train.new_max
        )
    return stats


def cmd_train(args, config: RunConfig) -> int:
    out = _out_dir(args, config, "train")
    _write_snapshot(config, out)
    dataset = config.load_split("train")
    detector = config.detector_config(
        num_classes=len(dataset.class_names), input_size=dataset[0].width
    )
    extractor = stats = None
    if config.train.sbl_enabled:
        extractor = config.build_extractor()
        stats = _stats_for_training(config, dataset, extractor)
    trainer = Trainer(dataset, detector, config.train, stats=stats, extractor=extractor)
    result = trainer.run(out_dir=out)
    final = result.log[-1]["batch_loss"] if result.log else float("nan")
    print(
        f"trained {config.train.total_steps} steps on {len(dataset)} images "
        f"(final batch loss {final:.6f}, lr {result.final_lr:g})"
    )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _predictions_for(dataset: Dataset, net, eval_params: dict) -> list[list[Detection]]:
    from .anchors import generate_anchors

    cfg = net.config
    anchors = generate_anchors(cfg.input_size, cfg.input_size, cfg.anchor_config)
    return [
        predict(
            net,
            img.pixels,
            anchors=anchors,
            score_threshold=eval_params["score_threshold"],
            nms_threshold=eval_params["nms_threshold"],
            max_detections=eval_params["max_detections"],
        )
        for img in dataset
    ]


def cmd_eval(args, config: RunConfig) -> int:
    out = _out_dir(args, config, "eval")
    _write_snapshot(config, out)
    dataset = config.load_split("eval")
    _, net = _load_trained(config)
    result = evaluate_dataset(
        _predictions_for(dataset, net, config.eval_params),
        dataset,
        iou_threshold=config.eval_params["iou_threshold"],
        eleven_point=config.eval_params["eleven_point"],
    )
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(result.to_text() + "\n")
    for name, ce in result.per_class.items():
        with open(os.path.join(out, f"pr_curve_{name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["score", "precision", "recall"])
            for row in zip(ce.scores, ce.precisions, ce.recalls):
                writer.writerow([f"{v:.6f}" for v in row])
    print(result.to_text())
    return 0


def cmd_rank(args, config: RunConfig) -> int:
    out = _out_dir(args, config, "rank")
    _write_snapshot(config, out)
    dataset = config.load_split("train")
    extractor = config.build_extractor()
    tap = config.rank_params.get("tap") or config.train.tap
    stats = None
    stats_path = config.resolve(config.stats_path)
    if stats_path and os.path.exists(stats_path):
        candidate = load_stats(stats_path)
        if tap in candidate.tap_stats:
            stats = candidate
    try:
        ranking = rank_images(dataset, extractor, tap=tap, k=int(config.rank_params["k"]), stats=stats)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    with open(os.path.join(out, "ranking.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "raw_salience", "normalized"])
        for entry in ranking.entries:
            writer.writerow([entry.image_id, f"{entry.raw:.8f}", f"{entry.normalized:.8f}"])
    with open(os.path.join(out, "histogram.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, count in zip(
            ranking.histogram_edges[:-1], ranking.histogram_edges[1:], ranking.histogram_counts
        ):
            writer.writerow([f"{lo:.8f}", f"{hi:.8f}", int(count)])
    print(f"tap {tap}: {len(ranking.entries)} images ranked")
    print("most salient:")
    for entry in ranking.top:
        print(f"  {entry.image_id}  raw={entry.raw:.6f}  weight={entry.normalized:.6f}")
    print("least salient:")
    for entry in ranking.bottom:
        print(f"  {entry.image_id}  raw={entry.raw:.6f}  weight={entry.normalized:.6f}")
    if ranking.saturated:
        print("warning: salience distribution is saturated at its extremes")
    return 0


def cmd_predict(args, config: RunConfig) -> int:
    from PIL import Image

    out = _out_dir(args, config, "predict")
    _write_snapshot(config, out)
    source = config.resolve(config.predict_params.get("input"))
    if not source:
        raise ConfigError("config is missing predict.input")
    if os.path.isdir(source):
        paths = sorted(
            os.path.join(source, name)
            for name in os.listdir(source)
            if name.lower().endswith(".png")
        )
    elif os.path.exists(source):
        paths = [source]
    else:
        raise DataError(f"{source}: predict input not found")
    if not paths:
        raise DataError(f"{source}: no .png images found")
    _, net = _load_trained(config)
    size = net.config.input_size
    overlap = int(config.predict_params["chip_overlap"])
    threshold = config.predict_params.get("score_threshold")
    if threshold is None:
        threshold = config.eval_params["score_threshold"]
    results = {}
    from .anchors import generate_anchors

    anchors = generate_anchors(size, size, net.config.anchor_config)
    for path in paths:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).astype(np.float32) / np.float32(255.0)
        h, w = pixels.shape[:2]
        merged: list[Detection] = []
        for chip in to_chips(pixels, os.path.basename(path), size, overlap):
            for det in predict(
                net,
                chip.pixels,
                anchors=anchors,
                score_threshold=threshold,
                nms_threshold=config.eval_params["nms_threshold"],
                max_detections=config.eval_params["max_detections"],
            ):
                ox, oy = chip.offset
                merged.append(
                    Detection(
                        box=Box(
                            min(det.box.x_min + ox, w),
                            min(det.box.y_min + oy, h),
                            min(det.box.x_max + ox, w),
                            min(det.box.y_max + oy, h),
                        ),
                        score=det.score,
                        class_id=det.class_id,
                    )
                )
        final = nms(merged, config.eval_params["nms_threshold"])
        results[os.path.basename(path)] = [
            {
                "box": [det.box.x_min, det.box.y_min, det.box.x_max, det.box.y_max],
                "score": det.score,
                "class_id": det.class_id,
            }
            for det in final
        ]
        print(f"{os.path.basename(path)}: {len(final)} detections")
    with open(os.path.join(out, "detections.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _default_variants() -> list[dict]:
    return [
        {"name": "baseline", "overrides": {"train.sbl_enabled": False}},
        {"name": "sbl_raw", "overrides": {"train.normalize": False}},
        {"name": "sbl_min03", "overrides": {"train.new_min": 0.3}},
        {"name": "sbl_min05", "overrides": {"train.new_min": 0.5}},
        {"name": "sbl_min07", "overrides": {"train.new_min": 0.7}},
        {"name": "sbl_min10", "overrides": {"train.new_min": 1.0}},
    ]


def cmd_ablate(args, config: RunConfig) -> int:
    out = _out_dir(args, config, "ablate")
    _write_snapshot(config, out)
    variants = config.ablate_params.get("variants") or _default_variants()
    seeds = config.ablate_params.get("seeds") or [config.train.seed]
    for variant in variants:
        if not isinstance(variant, dict) or "name" not in variant:
            raise ConfigError("each ablate variant needs a 'name' and an 'overrides' object")
    train_data = config.load_split("train")
    eval_data = config.load_split("eval")
    detector = config.detector_config(
        num_classes=len(train_data.class_names), input_size=train_data[0].width
    )
    extractor = config.build_extractor()
    rows = []
    for variant in variants:
        scores = []
        for seed in seeds:
            raw = copy.deepcopy(config.raw)
            for path, value in variant.get("overrides", {}).items():
                _apply_set(raw, f"{path}={json.dumps(value)}")
            _apply_set(raw, f"train.seed={int(seed)}")
            sub_config = RunConfig(raw, config.base_dir)
            stats = run_extractor = None
            if sub_config.train.sbl_enabled:
                run_extractor = extractor
                stats = compute_stats(
                    train_data,
                    extractor,
                    taps=(sub_config.train.tap,),
                    new_min=sub_config.train.new_min,
                    new_max=sub_config.train.new_max,
                )
            sub_dir = os.path.join(out, variant["name"], f"seed{seed}")
            trainer = Trainer(train_data, detector, sub_config.train, stats=stats, extractor=run_extractor)
            result = trainer.run(out_dir=sub_dir)
            eval_result = evaluate_dataset(
                _predictions_for(eval_data, result.net, config.eval_params),
                eval_data,
                iou_threshold=config.eval_params["iou_threshold"],
                eleven_point=config.eval_params["eleven_point"],
            )
            scores.append(eval_result.mean_ap)
            print(f"{variant['name']} seed {seed}: mAP {eval_result.mean_ap:.4f}")
        cfg = RunConfig(
            _applied(config.raw, variant.get("overrides", {})), config.base_dir
        ).train
        rows.append(
            {
                "variant": variant["name"],
                "sbl": cfg.sbl_enabled,
                "normalized": cfg.normalize if cfg.sbl_enabled else False,
                "new_min": cfg.new_min if cfg.sbl_enabled and cfg.normalize else None,
                "tap": cfg.tap if cfg.sbl_enabled else None,
                "seed_map": {str(seed): score for seed, score in zip(seeds, scores)},
                "mean_map": float(np.mean(scores)),
            }
        )
    _write_ablation_table(rows, seeds, out)
    return 0


def _applied(raw: dict, overrides: dict) -> dict:
    merged = copy.deepcopy(raw)
    for path, value in overrides.items():
        _apply_set(merged, f"{path}={json.dumps(value)}")
    return merged


def _write_ablation_table(rows: list[dict], seeds: list[int], out: str) -> None:
    with open(os.path.join(out, "ablation.json"), "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    seed_cols = [f"seed{seed}" for seed in seeds]
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "sbl", "normalized", "new_min", "tap", *seed_cols, "mean_map"])
        for row in rows:
            writer.writerow(
                [
                    row["variant"],
                    row["sbl"],
                    row["normalized"],
                    "" if row["new_min"] is None else row["new_min"],
                    row["tap"] or "",
                    *[f"{row['seed_map'][str(s)]:.4f}" for s in seeds],
                    f"{row['mean_map']:.4f}",
                ]
            )
    lines = [
        f"{'variant':<12} {'SBL':<5} {'norm':<5} {'new_min':<8} {'tap':<4} "
        + " ".join(f"{c:>8}" for c in seed_cols)
        + f" {'mean mAP':>9}"
    ]
    for row in rows:
        lines.append(
            f"{row['variant']:<12} {'Y' if row['sbl'] else 'N':<5} "
            f"{'Y' if row['normalized'] else 'N':<5} "
            f"{row['new_min'] if row['new_min'] is not None else '-':<8} "
            f"{row['tap'] or '-':<4} "
            + " ".join(f"{row['seed_map'][str(s)]:>8.4f}" for s in seeds)
            + f" {row['mean_map']:>9.4f}"
        )
    table = "\n".join(lines)
    with open(os.path.join(out, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbl",
        description="Train and evaluate a one-stage detector with salience-weighted loss.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "render a synthetic detection dataset"),
        ("stats", "compute salience statistics over the training corpus"),
        ("train", "train the detector"),
        ("eval", "evaluate a checkpoint and write reports"),
        ("rank", "rank corpus images by salience"),
        ("predict", "run a checkpoint over images, chipping large ones"),
        ("ablate", "train/eval a grid of loss variants and tabulate mAP"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", default=None, help="JSON configuration file")
        cmd.add_argument(
            "--set",
            dest="sets",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value by dotted path",
        )
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="override train and synth seeds")
        cmd.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "stats": cmd_stats,
        "train": cmd_train,
        "eval": cmd_eval,
        "rank": cmd_rank,
        "predict": cmd_predict,
        "ablate": cmd_ablate,
    }
    try:
        config = load_config(args.config, args.sets, args.seed)
        return handlers[args.command](args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except StaleStatsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
