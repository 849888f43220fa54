"""Command-line interface: the artifact's only user surface.

Subcommands cover the full pipeline: gen-data, train, eval, sweep,
metrics, ablate. Every run writes a manifest (resolved config, seeds,
input hashes, outputs, code version, wall clock) next to its outputs,
sufficient to reproduce the run bit for bit. Config precedence is
defaults < config file < CLI flags. Exit codes: 0 success, 2 usage,
3 configuration, 4 data, 5 state.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np
from filelock import FileLock

from . import __version__
from . import metrics as mt
from . import scenario as sc
from . import train as tr
from .backbone import ModelConfig, get_preset
from .errors import (ConfigError, DataError, ParseError, StateError,
                     TrajseqError)
from .heads import GenerationModel, ModelFlags
from .rng import make_rng
from .tensorcore import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_STATE = 5

OUT_ROOT_ENV = "TRAJSEQ_OUT_ROOT"
PREDICTION_FORMAT = "trajseq.predictions"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def write_manifest(out_dir: str, command: str, config: dict, inputs: dict,
                   outputs: list[str], started: float) -> str:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "code_version": __version__,
        "started_unix": started,
        "wall_clock_s": time.time() - started,
    }
    path = os.path.join(out_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


def parse_config_file(path: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {i}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merge(cli_value, file_cfg: dict, key: str, default, cast):
    if cli_value is not None:
        return cli_value
    if key in file_cfg:
        raw = file_cfg[key]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


# ---------------------------------------------------------------------------
# checkpoint glue


def save_model_checkpoint(path: str, model: GenerationModel, stage: str) -> None:
    meta = {
        "kind": "trajseq.model",
        "stage": stage,
        "preset": model.config.preset,
        "config": {"layers": model.config.layers, "d_model": model.config.d_model,
                   "d_inner": model.config.d_inner, "heads": model.config.heads,
                   "max_seq_len": model.config.max_seq_len},
        "flags": asdict(model.flags),
        "resolution": model.resolution,
        "seed": model.seed,
        "vocab": None if model.vocab_points is None else model.vocab_points.tolist(),
    }
    save_checkpoint(path, model.state_arrays(), meta=meta)


def load_model_checkpoint(path: str) -> tuple[GenerationModel, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "trajseq.model":
        raise StateError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(preset=meta["preset"], **meta["config"])
    flags = ModelFlags(**meta["flags"])
    vocab = None if meta["vocab"] is None else np.asarray(meta["vocab"])
    build_flags = flags
    if flags.kp_decoder == "diffusion":
        # construct with the stage-one decoder, then attach diffusion parts
        from dataclasses import replace
        build_flags = replace(flags, kp_decoder="mlp")
    model = GenerationModel(cfg, build_flags, seed=meta["seed"],
                            vocab_points=vocab, resolution=meta["resolution"])
    if flags.kp_decoder == "diffusion":
        model.attach_diffusion()
        from dataclasses import replace
        model.flags = replace(model.flags, kp_decoder="diffusion")
    model.load_state(arrays)
    return model, meta


# ---------------------------------------------------------------------------
# prediction dump


def write_predictions(path: str, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"format": PREDICTION_FORMAT, "version": 1,
                            "count": len(rows)}) + "\n")
        for row in rows:
            f.write(json.dumps(row) + "\n")


def read_predictions(path: str) -> list[dict]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError(f"{path} line 1: empty prediction dump")
    header = json.loads(lines[0])
    if header.get("format") != PREDICTION_FORMAT:
        raise ParseError(f"{path} line 1: missing prediction header")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise ParseError(f"{path} line {i}: malformed record ({e.msg})") from e
    return rows


def rollout_split(model: GenerationModel, samples, seed: int,
                  limit: int | None = None) -> list[dict]:
    rows = []
    chosen = samples if limit is None else samples[:limit]
    for s in chosen:
        pred = model.rollout(s, rng=make_rng(seed, "rollout", s.sample_id))
        rows.append({
            "sample_id": s.sample_id,
            "modes": pred.modes.tolist(),
            "scores": pred.scores.tolist(),
            "key_points": None if pred.key_points is None else pred.key_points.tolist(),
            "kp_offsets_s": None if pred.kp_offsets_s is None else list(pred.kp_offsets_s),
            "gt": s.ego_future[:, 0:3].tolist(),
        })
    return rows


def report_from_rows(rows: list[dict], gt_by_id: dict | None = None) -> mt.MetricsReport:
    entries = []
    for i, row in enumerate(rows):
        gt = row.get("gt")
        if gt is None:
            if gt_by_id is None or row["sample_id"] not in gt_by_id:
                raise DataError(f"record {i}: no ground truth for {row['sample_id']!r}")
            gt = gt_by_id[row["sample_id"]]
        entries.append((np.asarray(row["modes"]), np.asarray(row["scores"]),
                        np.asarray(gt)))
    return mt.aggregate_report(entries)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    started = time.time()
    out_path = _resolve_out(args.out)
    out_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    os.makedirs(out_dir, exist_ok=True)
    templates = tuple(t.strip() for t in args.templates.split(",") if t.strip())
    for t in templates:
        if t not in sc.TEMPLATES:
            raise ConfigError(f"unknown template {t!r}, expected subset of {sc.TEMPLATES}")
    samples = sc.generate_samples(args.count, args.seed, templates)
    vocab = None
    if args.vocab_k > 0:
        vocab = sc.cluster_intentions(samples, min(args.vocab_k, len(samples)),
                                      seed=args.seed)
        sc.assign_proposals(samples, vocab)
    sc.save_samples(out_path, samples, vocab)
    write_manifest(out_dir, "gen-data",
                   {"count": args.count, "templates": list(templates),
                    "seed": args.seed, "vocab_k": args.vocab_k, "out": out_path},
                   {"dataset_hash": sc.dataset_hash(out_path)},
                   [out_path], started)
    print(f"wrote {len(samples)} samples to {out_path}")
    return EXIT_OK


def _train_config_from_args(args, file_cfg: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        lr=_merge(args.lr, file_cfg, "lr", 5e-5, float),
        weight_decay=_merge(args.weight_decay, file_cfg, "weight_decay", 0.01, float),
        warmup_steps=_merge(args.warmup_steps, file_cfg, "warmup_steps", 50, int),
        batch_size=_merge(args.batch_size, file_cfg, "batch_size", 16, int),
        max_steps=_merge(args.max_steps, file_cfg, "max_steps", 1000, int),
        seed=_merge(args.seed, file_cfg, "seed", 0, int),
        stage=args.stage,
        eval_interval=_merge(args.eval_interval, file_cfg, "eval_interval", 100, int),
        patience=_merge(None, file_cfg, "patience", 5, int),
        augment_sigma_frac=_merge(args.augment, file_cfg, "augment_sigma_frac", 0.0, float),
        resolution=_merge(args.resolution, file_cfg, "resolution", 64, int),
    )


def _flags_from_args(args, file_cfg: dict) -> ModelFlags:
    components = _merge(args.components, file_cfg, "components", "CKS", str).upper()
    if components not in ("CS", "CKS", "CPS", "CPKS"):
        raise ConfigError(f"unknown component layout {components!r}")
    return ModelFlags(
        use_proposal="P" in components,
        use_keypoints="K" in components,
        kp_order=_merge(args.kp_order, file_cfg, "kp_order", "bkwd", str),
        kp_decoder="mlp",
        top_k=_merge(args.top_k, file_cfg, "top_k", 6, int),
    )


def _model_config_from(args, file_cfg: dict) -> ModelConfig:
    """Preset name, or explicit layers/d_model/d_inner/heads in the config file."""
    dims = [file_cfg.get(k) for k in ("layers", "d_model", "d_inner", "heads")]
    if all(v is not None for v in dims):
        return ModelConfig(layers=int(dims[0]), d_model=int(dims[1]),
                           d_inner=int(dims[2]), heads=int(dims[3]))
    if any(v is not None for v in dims):
        raise ConfigError("explicit model shape needs all of layers, d_model, "
                          "d_inner, heads")
    return get_preset(_merge(args.preset, file_cfg, "preset", "300k", str))


def cmd_train(args) -> int:
    started = time.time()
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(args.config) if args.config else {}
    config = _train_config_from_args(args, file_cfg)
    samples, vocab = sc.load_samples(args.data)
    dataset = tr.SampleDataset(samples=samples, vocab=vocab)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    curve_path = os.path.join(out_dir, "loss_curve.csv")
    lock = FileLock(os.path.join(out_dir, ".ckpt.lock"))
    if args.stage == "backbone":
        flags = _flags_from_args(args, file_cfg)
        model = GenerationModel(_model_config_from(args, file_cfg), flags,
                                seed=config.seed,
                                vocab_points=None if vocab is None else vocab.points,
                                resolution=config.resolution)
        result = tr.train_stage_backbone(dataset, model, config)
    else:
        if not args.checkpoint:
            raise StateError("stage diffusion needs --checkpoint from stage backbone")
        model, meta = load_model_checkpoint(args.checkpoint)
        if meta.get("stage") != "backbone":
            raise StateError(f"--checkpoint {args.checkpoint} is not a stage-backbone "
                             "checkpoint")
        config.resolution = model.resolution
        result = tr.train_stage_diffusion(dataset, model, config)
    with lock:
        save_model_checkpoint(ckpt_path, result.model, stage=args.stage)
    tr.write_curve_csv(curve_path, result.curve)
    write_manifest(out_dir, "train",
                   {"train": asdict(config), "flags": asdict(result.model.flags),
                    "preset": result.model.config.preset, "stage": args.stage},
                   {"data": args.data, "dataset_hash": sc.dataset_hash(args.data),
                    "checkpoint_in": args.checkpoint},
                   [ckpt_path, curve_path], started)
    print(f"stage {args.stage}: best eval {result.best_eval:.6f} after "
          f"{result.steps_run} steps -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    model, _ = load_model_checkpoint(args.checkpoint)
    samples, _ = sc.load_samples(args.data)
    dataset = tr.SampleDataset(samples=samples)
    split = {"eval": dataset.eval_idx, "train": dataset.train_idx,
             "all": list(range(len(samples)))}[args.split]
    subset = [samples[i] for i in split]
    rows = rollout_split(model, subset, seed=args.seed, limit=args.limit)
    pred_path = os.path.join(out_dir, "predictions.jsonl")
    write_predictions(pred_path, rows)
    report = report_from_rows(rows)
    csv_path = os.path.join(out_dir, "metrics.csv")
    mt.write_report_csv(csv_path, report)
    summary_path = os.path.join(out_dir, "summary.txt")
    with open(summary_path, "w") as f:
        f.write(report.summary())
    write_manifest(out_dir, "eval",
                   {"checkpoint": args.checkpoint, "split": args.split,
                    "limit": args.limit, "seed": args.seed},
                   {"data": args.data, "dataset_hash": sc.dataset_hash(args.data)},
                   [pred_path, csv_path, summary_path], started)
    print(report.summary())
    return EXIT_OK


def cmd_metrics(args) -> int:
    started = time.time()
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    rows = read_predictions(args.pred)
    gt_by_id = None
    if args.gt:
        samples, _ = sc.load_samples(args.gt)
        gt_by_id = {s.sample_id: s.ego_future[:, 0:3] for s in samples}
    report = report_from_rows(rows, gt_by_id)
    csv_path = os.path.join(out_dir, "metrics.csv")
    mt.write_report_csv(csv_path, report)
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(report.summary())
    write_manifest(out_dir, "metrics", {"pred": args.pred, "gt": args.gt},
                   {}, [csv_path], started)
    print(report.summary())
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(args.config) if args.config else {}
    config = _train_config_from_args(args, file_cfg)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    for p in presets:
        get_preset(p)
    result = tr.scaling_sweep(presets, sizes, config,
                              progress=lambda msg: print(msg, flush=True))
    csv_path = os.path.join(out_dir, "sweep.csv")
    tr.write_sweep_csv(csv_path, result)
    slopes_path = os.path.join(out_dir, "slopes.json")
    with open(slopes_path, "w") as f:
        json.dump({"loss_vs_dataset_size": result.slope_vs_data,
                   "loss_vs_param_count": {str(k): v for k, v
                                           in result.slope_vs_params.items()}},
                  f, indent=2)
        f.write("\n")
    outputs = [csv_path, slopes_path]
    if args.gnuplot:
        gp_path = os.path.join(out_dir, "sweep.gp")
        with open(gp_path, "w") as f:
            f.write("set logscale xy\nset datafile separator ','\n"
                    "set xlabel 'dataset size'\nset ylabel 'converged eval loss'\n"
                    f"plot 'sweep.csv' using 3:4 with points title 'cells'\n")
        outputs.append(gp_path)
    write_manifest(out_dir, "sweep",
                   {"presets": presets, "sizes": sizes, "train": asdict(config)},
                   {}, outputs, started)
    print(json.dumps({"slopes_vs_data": result.slope_vs_data,
                      "slopes_vs_params": {str(k): v for k, v
                                           in result.slope_vs_params.items()}}))
    return EXIT_OK


ABLATION_ROWS = {
    "components": ("CS", "CKS-fwd-mlp", "CKS-bkwd-mlp", "CKS-bkwd-diffusion"),
    "kp_order": ("CKS-fwd-mlp", "CKS-bkwd-mlp"),
    "kp_decoder": ("CKS-bkwd-mlp", "CKS-bkwd-diffusion"),
}


def run_ablation_row(name: str, dataset: tr.SampleDataset, config: tr.TrainConfig,
                     preset: str, eval_seed: int = 0,
                     cache: tr.RasterCache | None = None) -> dict:
    """Train one ablation configuration and evaluate open-loop errors."""
    if name == "CS":
        flags = ModelFlags(use_proposal=False, use_keypoints=False)
        stage2 = False
    else:
        _, order, decoder = name.split("-")
        flags = ModelFlags(use_proposal=False, use_keypoints=True, kp_order=order,
                           kp_decoder="mlp")
        stage2 = decoder == "diffusion"
    model = GenerationModel(get_preset(preset), flags, seed=config.seed,
                            resolution=config.resolution)
    result = tr.train_stage_backbone(dataset, model, config, cache=cache)
    if stage2:
        from dataclasses import replace as dc_replace
        cfg2 = dc_replace(config, stage="diffusion")
        result = tr.train_stage_diffusion(dataset, result.model, cfg2, cache=cache)
    eval_samples = [dataset.samples[i] for i in dataset.eval_idx]
    entries = []
    for s in eval_samples:
        pred = result.model.rollout(s, rng=make_rng(eval_seed, "rollout", s.sample_id))
        he = mt.horizon_errors(pred.modes[0], s.ego_future[:, 0:3])
        disp_full = float(np.hypot(pred.modes[0][:, 0] - s.ego_future[:, 0],
                                   pred.modes[0][:, 1] - s.ego_future[:, 1]).mean())
        entries.append((disp_full, he.fde[3], he.fde[5], he.fde[8]))
    arr = np.asarray(entries)
    return {"config": name, "eval_loss": result.best_eval,
            "ade_8s": float(arr[:, 0].mean()), "fde_3s": float(arr[:, 1].mean()),
            "fde_5s": float(arr[:, 2].mean()), "fde_8s": float(arr[:, 3].mean())}


def cmd_ablate(args) -> int:
    started = time.time()
    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    file_cfg = parse_config_file(args.config) if args.config else {}
    config = _train_config_from_args(args, file_cfg)
    if args.axis not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation axis {args.axis!r}, expected one of "
                          f"{sorted(ABLATION_ROWS)}")
    samples, vocab = sc.load_samples(args.data)
    dataset = tr.SampleDataset(samples=samples, vocab=vocab)
    cache = tr.RasterCache(dataset.samples, config.resolution)
    preset = _merge(args.preset, file_cfg, "preset", "300k", str)
    rows = []
    for name in ABLATION_ROWS[args.axis]:
        print(f"ablation row {name}", flush=True)
        rows.append(run_ablation_row(name, dataset, config, preset, cache=cache))
    csv_path = os.path.join(out_dir, "ablation.csv")
    with open(csv_path, "w") as f:
        keys = list(rows[0].keys())
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(repr(row[k]) for k in keys) + "\n")
    table = _format_table(rows)
    with open(os.path.join(out_dir, "ablation.txt"), "w") as f:
        f.write(table)
    write_manifest(out_dir, "ablate",
                   {"axis": args.axis, "preset": preset, "train": asdict(config)},
                   {"data": args.data, "dataset_hash": sc.dataset_hash(args.data)},
                   [csv_path], started)
    print(table)
    return EXIT_OK


def _format_table(rows: list[dict]) -> str:
    keys = list(rows[0].keys())
    header = "  ".join(f"{k:>18}" for k in keys)
    lines = [header]
    for row in rows:
        cells = [f"{row[k]:>18.4f}" if isinstance(row[k], float) else f"{row[k]:>18}"
                 for k in keys]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajseq",
        description="Desk-scale trajectory sequence modeling pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate and serialize training samples")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--templates", default=",".join(sc.TEMPLATES))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--vocab-k", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--preset", default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
        p.add_argument("--warmup-steps", dest="warmup_steps", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
        p.add_argument("--eval-interval", dest="eval_interval", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resolution", type=int, default=None)
        p.add_argument("--augment", type=float, default=None)
        p.add_argument("--components", default=None, help="CS, CKS, CPS, or CPKS")
        p.add_argument("--kp-order", dest="kp_order", choices=("bkwd", "fwd"),
                       default=None)
        p.add_argument("--top-k", dest="top_k", type=int, default=None)

    t = sub.add_parser("train", help="run one training stage")
    add_train_flags(t)
    t.add_argument("--stage", choices=("backbone", "diffusion"), default="backbone")
    t.add_argument("--checkpoint", default=None,
                   help="stage-backbone checkpoint (required for stage diffusion)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="rollout a split and write metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="metrics over an existing prediction dump")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("sweep", help="scaling sweep over presets x dataset sizes")
    add_train_flags(s)
    s.add_argument("--presets", default=",".join(("10k", "50k", "250k")))
    s.add_argument("--sizes", default="1024,4096,16384")
    s.add_argument("--gnuplot", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="sequence-design ablation grid")
    add_train_flags(a)
    a.add_argument("--axis", choices=tuple(ABLATION_ROWS), required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"data error: missing file {e.filename or e}", file=sys.stderr)
        return EXIT_DATA
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except StateError as e:
        print(f"state error: {e}", file=sys.stderr)
        return EXIT_STATE
    except TrajseqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
