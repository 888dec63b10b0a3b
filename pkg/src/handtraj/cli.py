"""Command-line surface: dataset generation, training, prediction, evaluation,
the constant-velocity baseline, structural ablations, and the scan kernel
benchmark.

Configs are JSON with unknown keys rejected (the full key path is reported);
every run writes its resolved config next to its outputs. Exit codes: 0 ok,
2 config/schema error, 3 numerical failure, 4 I/O failure. HANDTRAJ_THREADS
caps kernel threads; HANDTRAJ_NO_NUMBA=1 forces the pure-numpy kernels.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager

import numpy as np

from . import kernels, pipeline, synthbench
from .config import ConfigError, ModelConfig, toy_config
from .pipeline import CheckpointError, NonFiniteError
from .synthbench import ARCHETYPES, DatasetFormatError, GenConfig, GenerationError

LOCK_NAME = ".handtraj.lock"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@contextmanager
def _locked_dir(outdir):
    os.makedirs(outdir, exist_ok=True)
    lock = os.path.join(outdir, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{lock}: output directory is in use by another run "
                      "(remove the lockfile if that run is dead)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(lock)
        except FileNotFoundError:
            pass


def _gen_config(d: dict, path: str = "config") -> GenConfig:
    known = {f.name for f in dataclasses.fields(GenConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    d = dict(d)
    if "archetype_mix" in d:
        mix = d["archetype_mix"]
        if not isinstance(mix, (list, tuple)) or not mix:
            raise ConfigError(f"{path}.archetype_mix: expected a non-empty list")
        for i, name in enumerate(mix):
            if name not in ARCHETYPES:
                raise ConfigError(f"{path}.archetype_mix[{i}]: unknown archetype {name!r}")
        d["archetype_mix"] = tuple(mix)
    if "counts" in d:
        counts = d["counts"]
        if not isinstance(counts, (list, tuple)) or len(counts) != 3:
            raise ConfigError(f"{path}.counts: expected [train, val, test]")
        d["counts"] = tuple(int(c) for c in counts)
    try:
        return GenConfig(**d)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig.from_dict(_read_json(args.config)) if args.config else toy_config()
    overrides = {}
    for spec_str in getattr(args, "ablate", None) or []:
        key, _, value = spec_str.partition(":")
        field = {"motion": "motion_mode", "scan": "scan_mode", "cdc": "cdc"}.get(key)
        if field is None:
            raise ConfigError(f"--ablate {spec_str!r}: unknown flag (motion|scan|cdc)")
        if field in overrides:
            raise ConfigError(f"--ablate: conflicting {key}: settings")
        overrides[field] = {"on": True, "off": False}.get(value, value) if key == "cdc" else value
    if getattr(args, "loss_weights", None):
        parts = args.loss_weights.split(",")
        if len(parts) != 5:
            raise ConfigError("--loss-weights: expected 5 comma-separated numbers")
        overrides["loss_weights"] = tuple(float(p) for p in parts)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        d = cfg.to_dict()
        d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in overrides.items()})
        cfg = ModelConfig.from_dict(d)
    return cfg


VARIANTS = {
    "full": {},
    "v1": {"motion_mode": "none"},
    "v2": {"motion_mode": "fused-input"},
    "v3": {"motion_mode": "sum"},
    "v4": {"scan_mode": "bidirectional"},
}


def _variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError(f"variants: unknown variant {name!r} (choose from {sorted(VARIANTS)})")
    d = base.to_dict()
    d.update(VARIANTS[name])
    return ModelConfig.from_dict(d)


def _split_scenarios(path, split):
    _, scenarios = synthbench.load_dataset(path)
    if split != "all":
        scenarios = [s for s in scenarios if s.split == split]
    if not scenarios:
        raise DatasetFormatError(f"{path}: no scenarios in split {split!r}")
    return scenarios


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _gen_config(_read_json(args.config)) if args.config else GenConfig()
    outdir = os.path.dirname(os.path.abspath(args.out)) or "."
    with _locked_dir(outdir):
        header = synthbench.generate_dataset(cfg, args.out)
        _write_json(args.out + ".config.json", header["config"])
    digest = file_sha256(args.out)
    c = header["counts"]
    print(f"wrote {args.out}: train={c['train']} val={c['val']} test={c['test']}")
    print(f"sha256={digest}")
    return 0


def cmd_train(args) -> int:
    cfg = _model_config(args)
    resume = pipeline.load_checkpoint(args.resume) if args.resume else None
    with _locked_dir(args.out):
        _write_json(os.path.join(args.out, "config.resolved.json"), cfg.to_dict())
        result = pipeline.train(args.data, cfg, seed=cfg.seed,
                                csv_path=os.path.join(args.out, "loss_curve.csv"),
                                resume=resume)
        ckpt_path = os.path.join(args.out, "checkpoint.bin")
        pipeline.save_checkpoint(result.checkpoint, ckpt_path)
    first, last = result.history[0], result.history[-1]
    print(f"trained {result.steps} steps over {cfg.epochs} epochs")
    print(f"mean total loss: first epoch {first['total']:.6f} -> last epoch {last['total']:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_predict(args) -> int:
    ckpt = pipeline.load_checkpoint(args.ckpt)
    model = pipeline.Model.from_checkpoint(ckpt)
    cfg = model.config
    scenarios = _split_scenarios(args.data, args.split)
    if args.limit:
        scenarios = scenarios[:args.limit]
    arrs = pipeline.scenario_arrays(scenarios, cfg)
    preds = pipeline.predict(
        model, arrs["waypoints"][:, :cfg.n_past],
        arrs["homographies"][:, :cfg.n_past], arrs["semantics"][:, :cfg.n_past],
        n_samples=args.samples, seed=args.seed,
    )
    records = []
    for i, scn in enumerate(scenarios):
        records.append({
            "id": scn.id,
            "archetype": scn.archetype,
            "samples": preds[:, i].tolist(),
            "ground_truth": arrs["waypoints"][i, cfg.n_past:].tolist(),
        })
    out = {
        "schema": "handtraj-predictions-v1",
        "checkpoint": os.path.abspath(args.ckpt),
        "n_samples": args.samples,
        "seed": args.seed,
        "predictions": records,
    }
    _write_json(args.out, out)
    _write_json(args.out + ".config.json", cfg.to_dict())
    print(f"wrote {len(records)} predictions x {args.samples} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = pipeline.load_checkpoint(args.ckpt)
    model = pipeline.Model.from_checkpoint(ckpt)
    scenarios = _split_scenarios(args.data, args.split)
    if args.limit:
        scenarios = scenarios[:args.limit]
    with _locked_dir(args.out):
        _write_json(os.path.join(args.out, "config.resolved.json"), model.config.to_dict())
        report = pipeline.evaluate_model(
            model, scenarios, n_samples=args.samples, seed=args.seed,
            use_estimated_homographies=args.estimated_homographies,
        )
        cvh = pipeline.evaluate_cvh(scenarios, model.config.n_past)
        _write_json(os.path.join(args.out, "report.json"), {
            "schema": "handtraj-eval-v1",
            "dataset_sha256": file_sha256(args.data),
            "model": report.to_dict(),
            "cvh": cvh.to_dict(),
        })
        with open(os.path.join(args.out, "per_archetype.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["archetype", "count", "ade", "fde", "wde", "sim", "auc_judd", "nss"])
            for name, vals in report.per_archetype.items():
                writer.writerow([name, vals["count"]] +
                                [f"{vals[k]:.6f}" for k in ("ade", "fde", "wde", "sim", "auc_judd", "nss")])
    ma, ca = report.aggregate["ade"], cvh.aggregate["ade"]
    print(f"model ADE {ma:.4f} WDE {report.aggregate['wde']:.4f} | "
          f"CVH ADE {ca:.4f} WDE {cvh.aggregate['wde']:.4f} "
          f"({100 * (ca - ma) / ca:+.1f}% vs CVH)")
    return 0


def cmd_baseline_cvh(args) -> int:
    payload = _read_json(args.input)
    past = payload.get("past") if isinstance(payload, dict) else payload
    if not isinstance(past, list) or len(past) < 2:
        raise ConfigError("input.past: need at least 2 past waypoints")
    n_future = payload.get("n_future", args.n_future) if isinstance(payload, dict) else args.n_future
    pred = pipeline.cvh_baseline(np.asarray(past, dtype=np.float64), int(n_future))
    out = {"schema": "handtraj-cvh-v1", "future": pred.tolist()}
    if args.out:
        _write_json(args.out, out)
    else:
        json.dump(out, sys.stdout, indent=2)
        print()
    return 0


def cmd_ablate(args) -> int:
    base = _model_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    variant_names = [v.strip() for v in args.variants.split(",")] if args.variants else list(VARIANTS)
    digest = file_sha256(args.data)
    train_scn = _split_scenarios(args.data, "train")
    test_scn = _split_scenarios(args.data, "test")
    if args.eval_limit:
        test_scn = test_scn[:args.eval_limit]
    heavy = [s for s in test_scn if s.egomotion_heavy]
    runs = [(name, _variant_config(base, name)) for name in variant_names]
    for k in ([int(b) for b in args.blocks.split(",")] if args.blocks else []):
        runs.append((f"blocks{k}", ModelConfig.from_dict({**base.to_dict(), "n_blocks": k})))
    ratio_runs = []
    for r in ([float(x) for x in args.ratios.split(",")] if args.ratios else []):
        np_r, nf_r = synthbench.reslice(base.n_past + base.n_future, r)
        cfg_r = ModelConfig.from_dict({**base.to_dict(), "n_past": np_r, "n_future": nf_r})
        ratio_runs.append((f"ratio{r:g}", cfg_r, r))
    rows = []
    for name, cfg in runs:
        for seed in seeds:
            rows.append(_ablate_row(name, cfg, seed, train_scn, test_scn, heavy, digest, args))
    for name, cfg, r in ratio_runs:
        tr = [synthbench.reslice_scenario(s, r) for s in train_scn]
        te = [synthbench.reslice_scenario(s, r) for s in test_scn]
        hv = [s for s in te if s.egomotion_heavy]
        for seed in seeds:
            rows.append(_ablate_row(name, cfg, seed, tr, te, hv, digest, args))
    with _locked_dir(args.out):
        _write_json(os.path.join(args.out, "config.resolved.json"),
                    {"base": base.to_dict(), "variants": variant_names, "seeds": seeds})
        with open(os.path.join(args.out, "comparison.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    width = max(len(r["variant"]) for r in rows)
    for r in rows:
        print(f"{r['variant']:<{width}} seed={r['seed']} ade={r['ade']:.4f} "
              f"wde={r['wde']:.4f} ade_heavy={r['ade_heavy']:.4f}")
    return 0


def _ablate_row(name, cfg, seed, train_scn, test_scn, heavy_scn, digest, args) -> dict:
    result = pipeline.train(train_scn, cfg, seed=seed)
    report = pipeline.evaluate_model(result.model, test_scn, n_samples=args.samples, seed=seed)
    row = {"variant": name, "seed": seed, "dataset_sha256": digest}
    row.update({k: report.aggregate[k] for k in ("ade", "fde", "wde", "sim", "auc_judd", "nss")})
    if heavy_scn:
        hv = pipeline.evaluate_model(result.model, heavy_scn, n_samples=args.samples, seed=seed)
        row["ade_heavy"] = hv.aggregate["ade"]
        row["wde_heavy"] = hv.aggregate["wde"]
    else:
        row["ade_heavy"] = float("nan")
        row["wde_heavy"] = float("nan")
    return row


def cmd_bench_scan(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    b, c, n = 4, 16, 16
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    rng = np.random.default_rng(0)
    rows = []
    for t_len in lengths:
        abar = rng.uniform(0.5, 0.999, size=(b, t_len, c, n))
        bu = rng.standard_normal((b, t_len, c, n))
        for backend in backends:
            for mode, chunk in (("sequential", None), ("chunked", 64)):
                kernels.scan_forward(abar, bu, chunk_size=chunk, backend=backend)  # warm-up
                reps = max(1, int(2e6 / (b * t_len * c * n)))
                t0 = time.perf_counter()
                for _ in range(reps):
                    kernels.scan_forward(abar, bu, chunk_size=chunk, backend=backend)
                dt = (time.perf_counter() - t0) / reps
                rows.append({"length": t_len, "backend": backend, "mode": mode,
                             "seconds": f"{dt:.6e}"})
                print(f"length={t_len:<6} backend={backend:<6} mode={mode:<10} {dt * 1e3:9.3f} ms")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["length", "backend", "mode", "seconds"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="handtraj",
        description="Hand-trajectory prediction on synthetic egocentric scenes.",
        epilog="Environment: HANDTRAJ_THREADS caps kernel threads; "
               "HANDTRAJ_NO_NUMBA=1 selects the pure-numpy kernels.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="JSON generation config")
    g.add_argument("--out", required=True, help="output JSON-Lines path")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON model config")
    t.add_argument("--data", required=True, help="synthbench dataset path")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--ablate", action="append", metavar="FLAG",
                   help="structural override, e.g. motion:none, scan:bidirectional, cdc:off")
    t.add_argument("--loss-weights", help="five comma-separated weights")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="sample future trajectories")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    pr.add_argument("--limit", type=int, default=0)
    pr.add_argument("--samples", type=int, default=10)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="evaluate a checkpoint (CVH baseline included)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--samples", type=int, default=4)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--estimated-homographies", action="store_true",
                   help="evaluate with RANSAC-estimated instead of exact homographies")
    e.set_defaults(func=cmd_eval)

    cv = sub.add_parser("baseline-cvh", help="constant-velocity extrapolation")
    cv.add_argument("--input", required=True, help="JSON with past waypoints")
    cv.add_argument("--n-future", type=int, default=4)
    cv.add_argument("--out", help="output JSON (stdout if omitted)")
    cv.set_defaults(func=cmd_baseline_cvh)

    ab = sub.add_parser("ablate", help="train/evaluate structural variants")
    ab.add_argument("--config", help="base JSON model config")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", required=True, help="output directory")
    ab.add_argument("--variants", help="comma list from full,v1,v2,v3,v4 (default all)")
    ab.add_argument("--seeds", help="comma list of training seeds (default 0)")
    ab.add_argument("--blocks", help="comma list for a block-count sweep, e.g. 0,2,4,6")
    ab.add_argument("--ratios", help="comma list of observation ratios, e.g. 0.4,0.6,0.8")
    ab.add_argument("--samples", type=int, default=4)
    ab.add_argument("--eval-limit", type=int, default=0)
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--seed", type=int)
    ab.set_defaults(func=cmd_ablate)

    bs = sub.add_parser("bench-scan", help="time the scan kernels (numpy vs numba)")
    bs.add_argument("--out", required=True, help="output CSV")
    bs.add_argument("--lengths", default="64,256,1024,4096")
    bs.set_defaults(func=cmd_bench_scan)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (OSError, DatasetFormatError, CheckpointError, GenerationError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
