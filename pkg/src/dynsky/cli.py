"""Command-line driver: ``dynsky make-synthetic | train | synthesize | evaluate | histogram``.

Exit codes: 0 success, 2 usage or configuration error, 3 unmet precondition,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

log = logging.getLogger("dynsky")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PRECONDITION = 3
EXIT_NUMERIC = 4

CONFIG_VERSION = 1
HOME_ENV = "DYNSKY_HOME"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --- configuration ----------------------------------------------------------


@dataclass
class PipelineConfig:
    resolution: int = 128
    dt: float = 10.0
    substeps: int = 30
    keyframes: int = 1
    tone_curve: dict = field(default_factory=lambda: {"kind": "identity"})
    peak: float = 1.0
    farneback: dict = field(default_factory=dict)
    cloud_threshold: float = 0.46
    inpaint_iterations: int = 50
    width_scale: float = 1.0
    train: dict = field(default_factory=dict)
    train_fraction: float = 0.8
    dataset: str | None = None
    checkpoints: str | None = None
    output: str | None = None
    deterministic: bool = True
    seed: int = 0
    version: int = CONFIG_VERSION

    def projection(self):
        from .sphere_map import FisheyeProjection

        return FisheyeProjection(self.resolution)

    def curve(self):
        from .sky_image import ToneCurve

        return ToneCurve(**self.tone_curve)

    def farneback_params(self):
        from .optical_flow import FarnebackParams

        return FarnebackParams(**self.farneback)

    def train_config(self):
        from .neural_predictor import TrainConfig

        d = {"seed": self.seed, "deterministic": self.deterministic}
        d.update(self.train)
        return TrainConfig(**d)

    def sequence_config(self):
        from .temporal_engine import SequenceConfig

        return SequenceConfig(
            dt=self.dt,
            keyframes=self.keyframes,
            substeps=self.substeps,
            projection=self.projection(),
            tone_curve=self.curve(),
            peak=self.peak,
            farneback=self.farneback_params(),
            cloud_threshold=self.cloud_threshold,
            inpaint_iterations=self.inpaint_iterations,
        )

    def checkpoint_dir(self) -> Path:
        if self.checkpoints:
            return Path(self.checkpoints)
        return Path(os.environ.get(HOME_ENV, ".dynsky")) / "checkpoints"


def _json_error(path: Path, exc: json.JSONDecodeError) -> CliError:
    return CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the JSON file, then non-None ``overrides``; paths resolve against the file."""
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise CliError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise _json_error(path, exc) from exc
        if not isinstance(data, dict):
            raise CliError(f"{path}: top level must be a JSON object")
        base = path.parent
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise CliError(f"unsupported config version {data.get('version')}")
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise CliError(f"unknown config field(s): {', '.join(unknown)}")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in ("dataset", "checkpoints", "output"):
        if data.get(key) and not Path(data[key]).is_absolute():
            data[key] = str(base / data[key])
    try:
        cfg = PipelineConfig(**data)
        cfg.sequence_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return cfg


# --- commands ---------------------------------------------------------------


def cmd_make_synthetic(spec_path: str | Path, frames: int, out_dir: str | Path) -> int:
    from .dataset import SyntheticSceneSpec, generate_synthetic_sequence
    from .optical_flow import write_flow
    from .sky_image import save_png

    if frames < 2:
        raise CliError(f"--frames must be >= 2, got {frames}")
    spec_path = Path(spec_path)
    try:
        raw = json.loads(spec_path.read_text())
    except FileNotFoundError:
        raise CliError(f"spec file {spec_path} not found")
    except json.JSONDecodeError as exc:
        raise _json_error(spec_path, exc) from exc
    try:
        spec = SyntheticSceneSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{spec_path}: invalid scene spec: {exc}") from exc
    seq, flows = generate_synthetic_sequence(spec, frames)
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    for k, (img, flow) in enumerate(zip(seq.frames, flows)):
        save_png(img, out / "frames" / f"{k:06d}.png")
        write_flow(out / "flow" / f"{k:06d}.skfl", flow)
    manifest = {
        "interval": seq.interval,
        "device": seq.device,
        "location": seq.location,
        "frames": frames,
        "spec": spec.to_dict(),
    }
    (out / "sequence.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d frames to %s", frames, out)
    return EXIT_OK


def _load_dataset(cfg: PipelineConfig):
    from .dataset import load_sequence, split_train_test

    if not cfg.dataset or not Path(cfg.dataset).is_dir():
        raise CliError(f"dataset directory {cfg.dataset!r} does not exist")
    try:
        seq = load_sequence(cfg.dataset)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if cfg.train_fraction >= 1.0:
        return seq, None
    try:
        return split_train_test(seq, cfg.train_fraction)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PRECONDITION) from exc


def _check_resolution(seq, cfg: PipelineConfig) -> None:
    if seq.resolution != cfg.resolution:
        raise CliError(
            f"dataset resolution {seq.resolution} differs from configured {cfg.resolution}",
            EXIT_PRECONDITION,
        )


def cmd_train(cfg: PipelineConfig, role: str) -> int:
    from .dataset import build_cloudnet_pairs, build_flownet_pairs
    from .neural_predictor import (
        TrainingDivergedError,
        build_unet,
        default_config,
        load_checkpoint,
        save_checkpoint,
        train_cloudnet,
        train_flownet,
    )

    if role not in ("flownet", "cloudnet"):
        raise CliError(f"unknown role {role!r}")
    ckdir = cfg.checkpoint_dir()
    flow_ckpt = ckdir / "flownet.ckpt"
    if role == "cloudnet" and not flow_ckpt.is_file():
        raise CliError(f"cloudnet training needs a flownet checkpoint at {flow_ckpt}", EXIT_PRECONDITION)
    train, _ = _load_dataset(cfg)
    _check_resolution(train, cfg)
    tcfg = cfg.train_config()
    model = build_unet(default_config(role, cfg.resolution, cfg.width_scale), seed=tcfg.seed)
    try:
        if role == "flownet":
            result = train_flownet(build_flownet_pairs(train, cfg.farneback_params(), cfg.cloud_threshold), tcfg, model=model)
        else:
            flownet, _ = load_checkpoint(flow_ckpt)
            result = train_cloudnet(build_cloudnet_pairs(train, flownet), tcfg, model=model)
    except TrainingDivergedError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    ckdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckdir / f"{role}.ckpt", extra={"train": tcfg.to_dict()})
    with open(ckdir / f"{role}_loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "total", "mse"])
        for e, (t, m) in enumerate(zip(result.history, result.mse_history)):
            w.writerow([e, repr(t), repr(m)])
    log.info("%s: final loss %.6g", role, result.history[-1])
    return EXIT_OK


def _load_models(cfg: PipelineConfig):
    from .neural_predictor import load_checkpoint

    ckdir = cfg.checkpoint_dir()
    models = []
    for role in ("flownet", "cloudnet"):
        path = ckdir / f"{role}.ckpt"
        if not path.is_file():
            raise CliError(f"missing checkpoint {path}")
        model, _ = load_checkpoint(path)
        if model.role != role:
            raise CliError(f"{path} holds a {model.role} model")
        models.append(model)
    return models


def _load_input(path: Path, cfg: PipelineConfig):
    from .sky_image import load_png, normalize_hdr, read_pfm

    if not path.is_file():
        raise CliError(f"input image {path} not found")
    if path.suffix.lower() == ".pfm":
        return normalize_hdr(read_pfm(path), cfg.curve(), cfg.peak)
    return load_png(path)


def cmd_synthesize(cfg: PipelineConfig, input_path: str | Path) -> int:
    from .sky_image import expand_ldr, save_png, write_pfm
    from .temporal_engine import synthesize_sequence

    flownet, cloudnet = _load_models(cfg)
    img = _load_input(Path(input_path), cfg)
    if img.width != flownet.config.resolution or img.width != cloudnet.config.resolution:
        raise CliError(
            f"input is {img.width}px but models expect {flownet.config.resolution}px",
            EXIT_PRECONDITION,
        )
    if not cfg.output:
        raise CliError("no output directory configured")
    seq_cfg = cfg.sequence_config()
    frames = synthesize_sequence(img, flownet, cloudnet, seq_cfg)
    out = Path(cfg.output)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    curve = cfg.curve()
    for fr in frames:
        stem = f"frame_{fr.index:06d}"
        save_png(fr.image, out / "frames" / f"{stem}.png")
        write_pfm(out / "frames" / f"{stem}.pfm", expand_ldr(fr.image, curve, cfg.peak))
        entries.append({"index": fr.index, "time": fr.time, "kind": fr.kind,
                        "png": f"frames/{stem}.png", "pfm": f"frames/{stem}.pfm"})
    manifest = {
        "version": CONFIG_VERSION,
        "dt": cfg.dt,
        "keyframes": cfg.keyframes,
        "substeps": cfg.substeps,
        "resolution": cfg.resolution,
        "frames": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d frames to %s", len(frames), out)
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, test_dir: str | Path, perfect_stub: bool = False) -> int:
    from .dataset import load_sequence
    from .evaluation import evaluate_test_set

    test_dir = Path(test_dir)
    if not test_dir.is_dir():
        raise CliError(f"test directory {test_dir} does not exist")
    try:
        test = load_sequence(test_dir)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PRECONDITION) from exc
    if perfect_stub:
        frames = test.frames
        report = evaluate_test_set(test, predictor=lambda i, img: frames[i + 1])
    else:
        flownet, cloudnet = _load_models(cfg)
        _check_resolution(test, PipelineConfig(resolution=flownet.config.resolution))
        report = evaluate_test_set(test, flownet, cloudnet)
    out = Path(cfg.output or test_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _parse_edges(text: str) -> list[float]:
    try:
        edges = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"bad --bins value {text!r}") from exc
    return edges


def _histogram_frames(directory: Path, keyframes_only: bool):
    from .sky_image import load_png

    if not directory.is_dir():
        raise CliError(f"directory {directory} does not exist")
    manifest = directory / "manifest.json"
    if keyframes_only and manifest.is_file():
        entries = json.loads(manifest.read_text())["frames"]
        paths = [directory / e["png"] for e in entries if e["kind"] == "keyframe"]
    else:
        sub = directory / "frames"
        paths = sorted((sub if sub.is_dir() else directory).glob("*.png"))
    if not paths:
        raise CliError(f"no PNG frames in {directory}")
    if len(paths) < 2:
        raise CliError(f"{directory} holds fewer than 2 frames")
    return [load_png(p) for p in paths]


def cmd_histogram(
    cfg: PipelineConfig,
    real_dir: str | Path,
    generated_dir: str | Path,
    edges: list[float],
    keyframes_only: bool = True,
) -> int:
    from .evaluation import flow_histogram_compare

    real = _histogram_frames(Path(real_dir), keyframes_only)
    gen = _histogram_frames(Path(generated_dir), keyframes_only)
    try:
        cmp = flow_histogram_compare(real, gen, edges, cfg.farneback_params(), cfg.cloud_threshold)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_PRECONDITION) from exc
    out = Path(cfg.output or generated_dir)
    out.mkdir(parents=True, exist_ok=True)
    cmp.write_csv(out / "histogram.csv")
    summary = {"edges": list(map(float, cmp.edges)), "distances": cmp.distances,
               "mean_distance": cmp.mean_distance}
    (out / "histogram_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    sys.stdout.write(f"frames compared: {len(cmp.distances)}\nmean L1 distance: {cmp.mean_distance:.6f}\n")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsky", description="Dynamic cloudy-sky lighting sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="pipeline config JSON")
        sp.add_argument("--checkpoints", help="checkpoint directory")
        sp.add_argument("--out", dest="output", help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("make-synthetic", help="render a procedural sky sequence")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train FlowNet or CloudNet")
    common(sp)
    sp.add_argument("--role", choices=("flownet", "cloudnet"), required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("synthesize", help="generate a frame sequence from one sky image")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--frames", dest="keyframes", type=int, help="number of predicted keyframes")
    sp.add_argument("--substeps", type=int)

    sp = sub.add_parser("evaluate", help="next-frame metrics over a test sequence")
    common(sp)
    sp.add_argument("--test", required=True)
    sp.add_argument("--perfect-stub", action="store_true", help="use the ground-truth next frame")

    sp = sub.add_parser("histogram", help="compare flow-magnitude distributions")
    common(sp)
    sp.add_argument("--real", required=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--bins", default="0,0.05,0.1,0.25,0.5,1,2,4,8,16")
    sp.add_argument("--all-frames", action="store_true", help="include substep frames of a synthesis run")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "make-synthetic":
            return cmd_make_synthetic(args.spec, args.frames, args.out)
        overrides = {"checkpoints": args.checkpoints, "output": args.output, "seed": args.seed}
        if args.command == "train":
            overrides["dataset"] = args.dataset
            cfg = load_config(args.config, overrides)
            if args.epochs is not None:
                cfg.train = {**cfg.train, "epochs": args.epochs}
            return cmd_train(cfg, args.role)
        if args.command == "synthesize":
            overrides.update(keyframes=args.keyframes, substeps=args.substeps)
            return cmd_synthesize(load_config(args.config, overrides), args.input)
        if args.command == "evaluate":
            return cmd_evaluate(load_config(args.config, overrides), args.test, args.perfect_stub)
        if args.command == "histogram":
            cfg = load_config(args.config, overrides)
            return cmd_histogram(cfg, args.real, args.generated, _parse_edges(args.bins), not args.all_frames)
    except CliError as exc:
        sys.stderr.write(f"dynsky: error: {exc}\n")
        return exc.code
    except FloatingPointError as exc:
        sys.stderr.write(f"dynsky: numeric failure: {exc}\n")
        return EXIT_NUMERIC
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
