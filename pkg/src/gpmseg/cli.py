"""Command-line entry point.

Subcommands: train, eval, ablate, complexity, depth-metrics. Every
training-style command resolves one config (file plus --set overrides),
writes its outputs under a per-run directory, and drops a run_manifest.json
there before any real work starts, finalizing it on exit either way.

Exit codes: 0 ok, 2 config problem, 3 data problem, 4 checkpoint problem.
"""

import argparse
import dataclasses
import json
import os
import sys
import time

from . import __version__
from .backbone import build_model
from .checkpoint import model_from_checkpoint
from .complexity import (
    chain_overhead_note,
    count_flops,
    format_complexity_table,
    write_complexity_csv,
    write_complexity_report,
)
from .data import ManifestDataset, SyntheticPolypDataset
from .depth_io import depth_metrics, load_depth
from .errors import CheckpointError, ConfigError, DataError
from .metrics import aggregate, write_score_report, write_scores_csv
from .train import TrainConfig, build_seeded_model, evaluate_model, load_config, train_run

DATA_ROOT_ENV = "GPMSEG_DATA_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    code_version: str
    out_dir: str
    started: str
    finished: str = ""
    status: str = "running"
    error: str = ""

    def write(self) -> None:
        path = os.path.join(self.out_dir, "run_manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def make_run_dir(out_root: str, seeds, run_name: str = "") -> str:
    if not run_name:
        stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
        run_name = f"{stamp}-seed{'-'.join(str(s) for s in seeds)}"
    path = os.path.join(out_root, run_name)
    os.makedirs(path, exist_ok=True)
    return path


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _resolve_data_path(path: str) -> str:
    if os.path.isabs(path):
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return os.path.join(root, path) if root else path


def _load_dataset(config: TrainConfig):
    if config.data_manifest:
        return ManifestDataset(_resolve_data_path(config.data_manifest), config.image_size)
    if config.synthetic_samples > 0:
        return SyntheticPolypDataset(
            config.synthetic_samples, image_size=config.image_size, seed=config.dataset_seed
        )
    raise ConfigError("config needs data_manifest or synthetic_samples > 0")


def _run_with_manifest(command: str, config_dict: dict, seeds, run_dir: str, work):
    """Write the manifest, run `work`, finalize the manifest either way."""
    manifest = RunManifest(
        command=command,
        config=config_dict,
        seeds=list(seeds),
        code_version=__version__,
        out_dir=run_dir,
        started=_utc_now(),
    )
    manifest.write()
    try:
        result = work(manifest)
    except BaseException as exc:
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.finished = _utc_now()
        manifest.write()
        raise
    manifest.status = "ok"
    manifest.finished = _utc_now()
    manifest.write()
    return result


def cmd_train(args) -> int:
    config = load_config(args.config, _parse_overrides(args.set))
    dataset = _load_dataset(config)
    run_dir = make_run_dir(args.out, config.seeds, args.run_name)

    def work(manifest):
        for seed in config.seeds:
            model = build_seeded_model(config, seed)
            state = train_run(config, model, dataset, seed, out_dir=os.path.join(run_dir, f"seed{seed}"))
            print(
                f"seed {seed}: best val DSC {state.best_val_dsc:.4f} at epoch "
                f"{state.best_epoch} ({state.epoch + 1} epochs run)"
            )
        print(f"outputs in {run_dir}")

    _run_with_manifest("train", config.as_dict(), config.seeds, run_dir, work)
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset_name = args.dataset_name or os.path.splitext(os.path.basename(args.manifest))[0]
    out_dir = make_run_dir(args.out, [0], args.run_name) if args.out else None

    def work(_manifest):
        per_checkpoint = []
        rows = []
        for ckpt_path in args.checkpoint:
            model, manifest = model_from_checkpoint(ckpt_path)
            image_size = manifest.get("extra", {}).get("train_config", {}).get("image_size", args.image_size)
            dataset = ManifestDataset(_resolve_data_path(args.manifest), image_size)
            scores = evaluate_model(model, dataset, threshold=args.threshold)
            method = os.path.splitext(os.path.basename(ckpt_path))[0]
            per_checkpoint.append((method, scores))
            rows.append((dataset_name, method, scores.dsc, scores.iou))
            print(f"{dataset_name}  {method}  DSC {scores.dsc:.4f}  IoU {scores.iou:.4f}")
        agg = aggregate([s for _, s in per_checkpoint])
        rows.append((dataset_name, "mean", agg.mean_dsc, agg.mean_iou))
        print(f"{dataset_name}  mean  DSC {agg.mean_dsc:.4f}  IoU {agg.mean_iou:.4f}")
        if out_dir:
            write_scores_csv(os.path.join(out_dir, "scores.csv"), rows)
            write_score_report(
                os.path.join(out_dir, "scores.txt"),
                {f"{dataset_name}/{m}": s for m, s in per_checkpoint},
            )
            print(f"outputs in {out_dir}")

    eval_config = {
        "checkpoints": list(args.checkpoint),
        "manifest": args.manifest,
        "dataset_name": dataset_name,
        "threshold": args.threshold,
    }
    if out_dir:
        _run_with_manifest("eval", eval_config, [], out_dir, work)
    else:
        work(None)
    return EXIT_OK


ABLATION_ARMS = (
    ("baseline", {"with_gpm": False}),
    ("gpm_bottom_to_top", {"with_gpm": True, "ordering": "bottom_to_top"}),
    ("gpm_top_to_bottom", {"with_gpm": True, "ordering": "top_to_bottom"}),
)


def run_ablation(config: TrainConfig, dataset, run_dir: str) -> list:
    """Train all three arms on one dataset; returns (arm, mean_dsc, per-seed)."""
    results = []
    for arm_name, overrides in ABLATION_ARMS:
        arm_config = dataclasses.replace(config, **overrides)
        per_seed = []
        for seed in arm_config.seeds:
            model = build_seeded_model(arm_config, seed)
            state = train_run(
                arm_config, model, dataset, seed,
                out_dir=os.path.join(run_dir, arm_name, f"seed{seed}"),
            )
            per_seed.append(state.best_val_dsc)
        mean_dsc = sum(per_seed) / len(per_seed)
        results.append((arm_name, mean_dsc, per_seed))
    return results


def cmd_ablate(args) -> int:
    config = load_config(args.config, _parse_overrides(args.set))
    dataset = _load_dataset(config)
    run_dir = make_run_dir(args.out, config.seeds, args.run_name)
    arm_configs = {
        name: dataclasses.replace(config, **ov).as_dict() for name, ov in ABLATION_ARMS
    }

    def work(manifest):
        results = run_ablation(config, dataset, run_dir)
        lines = ["arm,mean_dsc," + ",".join(f"seed{s}_dsc" for s in config.seeds)]
        for arm_name, mean_dsc, per_seed in results:
            print(f"{arm_name}: mean val DSC {mean_dsc:.4f} (seeds: "
                  + ", ".join(f"{v:.4f}" for v in per_seed) + ")")
            lines.append(f"{arm_name},{mean_dsc:.6f}," + ",".join(f"{v:.6f}" for v in per_seed))
        with open(os.path.join(run_dir, "ablation.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"outputs in {run_dir}")

    _run_with_manifest("ablate", {"base": config.as_dict(), "arms": arm_configs},
                       config.seeds, run_dir, work)
    return EXIT_OK


def cmd_complexity(args) -> int:
    config = load_config(args.config, _parse_overrides(args.set))
    size = (3, config.image_size, config.image_size)
    plain = build_model(base_channels=config.base_channels, with_gpm=False)
    fused = build_model(
        base_channels=config.base_channels, with_gpm=True,
        ordering=config.ordering, similarity_scale=config.similarity_scale,
    )
    reports = [
        count_flops(plain, size, name=f"unet-b{config.base_channels}"),
        count_flops(fused, size, name=f"unet-b{config.base_channels}+chain"),
    ]
    delta = reports[1].params - reports[0].params
    note = chain_overhead_note(delta, compare_reference=config.base_channels == 64)
    print(format_complexity_table(reports))
    print(note)
    if args.out:
        out_dir = make_run_dir(args.out, [0], args.run_name)

        def work(_manifest):
            write_complexity_report(os.path.join(out_dir, "complexity.txt"), reports, notes=[note])
            write_complexity_csv(os.path.join(out_dir, "complexity.csv"), reports)
            print(f"outputs in {out_dir}")

        _run_with_manifest("complexity", config.as_dict(), [], out_dir, work)
    return EXIT_OK


def cmd_depth_metrics(args) -> int:
    pred = load_depth(args.pred)
    gt = load_depth(args.gt)
    if pred.depth.shape != gt.depth.shape:
        raise DataError(
            f"pred {pred.depth.shape} and gt {gt.depth.shape} disagree; resample first"
        )
    result = depth_metrics(pred.depth, gt.depth, original_range_mm=gt.original_range_mm)
    for key, value in result.as_dict().items():
        print(f"{key} = {value}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpmseg",
        description="Depth-prior-guided polyp segmentation: train, evaluate, ablate, profile.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p_train = sub.add_parser("train", help="train one model per configured seed")
    add_config_args(p_train)
    p_train.add_argument("--out", default="runs", help="output root directory")
    p_train.add_argument("--run-name", default="", help="fixed run directory name")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score checkpoints on a pairing manifest")
    p_eval.add_argument("--checkpoint", action="append", required=True,
                        help="checkpoint file (repeatable)")
    p_eval.add_argument("--manifest", required=True, help="pairing manifest path")
    p_eval.add_argument("--dataset-name", default="", help="label for the report rows")
    p_eval.add_argument("--threshold", type=float, default=0.5)
    p_eval.add_argument("--image-size", type=int, default=256,
                        help="fallback when the checkpoint records no size")
    p_eval.add_argument("--out", default="", help="output root directory (optional)")
    p_eval.add_argument("--run-name", default="")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="baseline vs chain in both orderings")
    add_config_args(p_abl)
    p_abl.add_argument("--out", default="runs", help="output root directory")
    p_abl.add_argument("--run-name", default="")
    p_abl.set_defaults(func=cmd_ablate)

    p_cx = sub.add_parser("complexity", help="parameter/FLOP accounting")
    add_config_args(p_cx)
    p_cx.add_argument("--out", default="", help="output root directory (optional)")
    p_cx.add_argument("--run-name", default="")
    p_cx.set_defaults(func=cmd_complexity)

    p_dm = sub.add_parser("depth-metrics", help="score one predicted depth map")
    p_dm.add_argument("--pred", required=True, help="predicted depth file")
    p_dm.add_argument("--gt", required=True, help="ground-truth depth file")
    p_dm.set_defaults(func=cmd_depth_metrics)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
