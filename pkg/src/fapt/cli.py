"""Command-line front end: ``fapt gen-data | train | eval | bench``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Config files are flat ``key = value`` text; unknown keys are errors.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import HoldLast, VecProny
from .evaluation import MisoScenario, run_benchmark, write_nmse_csv
from .geometry import ArrayGeometry, PortGrid
from .io import FormatError, atomic_write_bytes, read_dataset, read_kv_file, write_dataset
from .model import DimensionError, ModelConfig, PortLLM
from .nn import ConfigError as ModelConfigError
from .ports import table_accuracy
from .scenario import KMH, ConfigError, ScenarioConfig, generate_samples, split_dataset
from .training import (TrainConfig, nmse_per_sample, port_validation, to_db, train,
                       write_csv_rows)

log = logging.getLogger("fapt")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SCENARIO_KEYS = {
    "carrier_freq": float, "n_ports_z": int, "n_ports_y": int, "w_y": float, "w_z": float,
    "n_paths": int, "ricean_k": float, "rms_delay_spread": float, "slot_duration": float,
    "group_len": int, "sampling_slot": int, "speed_min_kmh": float, "speed_max_kmh": float,
    "cluster_spread_deg": float, "t_in": int, "f_out": int, "csi_delay_slots": int,
    "samples": int, "seed": int,
}
MODEL_KEYS = {
    "d_model": int, "n_heads": int, "n_layers": int, "d_hidden": int, "out_hidden": int,
    "lora_rank": int, "prompt_len": int, "dtype": str,
}
TRAIN_KEYS = {
    "alpha_min": float, "alpha_max": float, "warmup_epochs": int, "total_epochs": int,
    "batch_train": int, "batch_test": int, "split_fraction": float, "seed": int,
    "grad_clip": float,
}
BENCH_KEYS = dict(SCENARIO_KEYS, n_trials=int, snr_grid=str, speeds_kmh=str, bs_arrays=str)

# desk-scale defaults
DEFAULT_SAMPLES = 2000
DEFAULT_TRAIN = dict(alpha_min=4e-6, alpha_max=2e-3, warmup_epochs=25, total_epochs=150,
                     batch_train=32, batch_test=200)
DEFAULT_SPLIT = 0.75


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def load_config(path, schema) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        raw = read_kv_file(path, allowed=set(schema))
        return {k: schema[k](v) for k, v in raw.items()}
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def scenario_from(values: dict, seed=None) -> ScenarioConfig:
    v = dict(values)
    kw = {}
    grid_kw = {k: v.pop(k) for k in ("n_ports_z", "n_ports_y", "w_y", "w_z") if k in v}
    if grid_kw:
        try:
            kw["grid"] = PortGrid(**grid_kw)
        except ValueError as exc:
            raise UsageError(f"port grid: {exc}") from exc
    lo = v.pop("speed_min_kmh", 90.0)
    hi = v.pop("speed_max_kmh", 150.0)
    kw["speed_range"] = (lo * KMH, hi * KMH)
    for key in ("samples", "n_trials", "snr_grid", "speeds_kmh", "bs_arrays"):
        v.pop(key, None)
    kw.update(v)
    if seed is not None:
        kw["seed"] = seed
    return ScenarioConfig(**kw)


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(path, command, params, seed, outputs, started) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash(params),
        "config": params,
        "seed": seed,
        "version": __version__,
        "outputs": [str(o) for o in outputs],
        "duration_s": time.perf_counter() - started,
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, default=str) + "\n").encode())


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def parse_float_list(text: str):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def parse_array(text: str) -> ArrayGeometry:
    try:
        ny, nz = (int(x) for x in text.lower().split("x"))
        return ArrayGeometry(ny, nz)
    except ValueError as exc:
        raise UsageError(f"bad BS array {text!r}; expected e.g. 2x8") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    values = load_config(args.config, SCENARIO_KEYS)
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    n = args.samples if args.samples is not None else values.get("samples", DEFAULT_SAMPLES)
    if n < 0:
        raise UsageError("--samples must be >= 0")
    cfg = scenario_from(values, seed)
    data = generate_samples(cfg, n)
    write_dataset(args.out, data)
    log.info("wrote %d samples (T,F,N,M)=%s to %s", len(data), data.dims, args.out)
    params = dict(values, seed=seed, samples=n)
    write_manifest(manifest_path(args.out), "gen-data", params, seed, [args.out], started)
    return EXIT_OK


def _model_and_train_cfg(args, dims):
    values = load_config(args.config, dict(MODEL_KEYS, **TRAIN_KEYS))
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    t, f, n, m = dims
    model_kw = {k: values[k] for k in MODEL_KEYS if k in values}
    if args.rank is not None:
        model_kw["lora_rank"] = args.rank
    mcfg = ModelConfig(t_in=t, f_out=f, n=n, m=m, prompt_enabled=args.prompt, seed=seed,
                       frozen_seed=seed, **model_kw)
    train_kw = dict(DEFAULT_TRAIN)
    train_kw.update({k: values[k] for k in TRAIN_KEYS if k in values and k not in ("split_fraction", "seed")})
    tcfg = TrainConfig(seed=seed, **train_kw)
    split = values.get("split_fraction", DEFAULT_SPLIT)
    params = dict(values, seed=seed, prompt=args.prompt, lora_rank=mcfg.lora_rank, epochs=args.epochs)
    return mcfg, tcfg, split, seed, params


def cmd_train(args) -> int:
    started = time.perf_counter()
    data = read_dataset(args.data)
    mcfg, tcfg, split, seed, params = _model_and_train_cfg(args, data.dims)
    train_set, test_set = split_dataset(data, split, seed)
    model = PortLLM(mcfg)
    n_train = model.num_parameters(trainable_only=True)
    log.info("prompt %s: %d trainable / %d total parameters", "on" if mcfg.prompt_enabled else "off",
             n_train, model.num_parameters())
    report = train(model, train_set, test_set, tcfg, epochs=args.epochs)
    model.save(args.out)
    csv_path = args.csv or str(args.out) + ".csv"
    report.write_csv(csv_path)
    params["trainable_params"] = n_train
    write_manifest(manifest_path(args.out), "train", params, seed, [args.out, csv_path], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model = PortLLM.load(args.checkpoint)
    data = read_dataset(args.data)
    c = model.cfg
    if data.dims != (c.t_in, c.f_out, c.n, c.m):
        raise DimensionError(f"dataset (T,F,N,M)={data.dims} but checkpoint expects "
                             f"({c.t_in},{c.f_out},{c.n},{c.m})")
    if len(data) == 0:
        raise DimensionError("dataset is empty")
    model.eval()
    preds, lat = [], []
    for i in range(len(data)):
        t0 = time.perf_counter()
        preds.append(model.predict(data.past[i:i + 1])[0])
        lat.append((time.perf_counter() - t0) * 1e3)
    pred = np.stack(preds)
    nmse = nmse_per_sample(pred, data.future)
    curve, overall = port_validation(pred, data.future, data.reference)
    rows = []
    for i in range(len(data)):
        _, v = port_validation(pred[i:i + 1], data.future[i:i + 1], data.reference[i:i + 1])
        rows.append([i, table_accuracy(pred[i], data.future[i]), to_db(nmse[i]), v, lat[i]])
    rows.append(["all", table_accuracy(pred, data.future), to_db(float(nmse.mean())), overall,
                 float(np.mean(lat))])
    with open(args.out, "w", newline="") as fh:
        write_csv_rows(fh, ("sample", "accuracy_pct", "nmse_db", "validation_nmse_db", "latency_ms"), rows)
    log.info("accuracy %.2f%%, NMSE %.2f dB, NMSE_v %.2f dB, latency %.3f ms",
             *rows[-1][1:])
    params = {"checkpoint": str(args.checkpoint), "data": str(args.data)}
    write_manifest(manifest_path(args.out), "eval", params, c.seed, [args.out], started)
    return EXIT_OK


def cmd_bench(args) -> int:
    started = time.perf_counter()
    values = load_config(args.config, BENCH_KEYS)
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    cfg = scenario_from(values, seed)
    speeds = args.speed or parse_float_list(values.get("speeds_kmh", "90 120 150"))
    arrays = args.bs_array or values.get("bs_arrays", "2x8 8x8 32x8").replace(",", " ").split()
    snrs = args.snr_grid or parse_float_list(values.get("snr_grid", "0 10 20 30"))
    trials = args.trials if args.trials is not None else values.get("n_trials", 200)
    geoms = [parse_array(a) for a in arrays]

    predictors = {}
    for ck in args.checkpoint or []:
        if not os.path.isfile(ck):
            log.warning("checkpoint %s not found; skipped", ck)
            continue
        model = PortLLM.load(ck)
        c = model.cfg
        if (c.t_in, c.f_out, c.n, c.m) != (cfg.t_in, cfg.f_out) + cfg.grid.shape:
            log.warning("checkpoint %s does not fit the scenario dimensions; skipped", ck)
            continue
        predictors[Path(ck).stem] = model
    if args.checkpoint and not predictors:
        log.error("no runnable checkpoint among %s", args.checkpoint)
        return EXIT_RUNTIME
    predictors["vec-prony"] = VecProny(order=2)
    predictors["hold-last"] = HoldLast()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, nmse_rows = [], []
    for speed in speeds:
        for label, geom in zip(arrays, geoms):
            sc = MisoScenario(cfg, geom, speed * KMH, snrs, trials, seed)
            report = run_benchmark(sc, predictors)
            se_path = out / f"se_{speed:g}kmh_{label}.csv"
            report.write_csv(se_path)
            outputs.append(se_path)
            for name, curve in report.nmse_curves.items():
                for step, val in enumerate(curve, 1):
                    nmse_rows.append([name, speed, label, step, float(val)])
            log.info("bench %g km/h %s done", speed, label)
    nmse_path = out / "nmse_horizon.csv"
    write_nmse_csv(nmse_path, nmse_rows)
    outputs.append(nmse_path)
    params = dict(values, seed=seed, speeds=speeds, arrays=arrays, snrs=snrs, trials=trials,
                  checkpoints=sorted(k for k in predictors))
    write_manifest(out / "manifest.json", "bench", params, seed, outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate a channel-table dataset",
                       description="scenario keys: " + ", ".join(sorted(SCENARIO_KEYS)))
    g.add_argument("--config", help="scenario key=value file")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--samples", type=int, help=f"number of samples (default {DEFAULT_SAMPLES})")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a predictor on a dataset file",
                       description="model/train keys: " + ", ".join(sorted(set(MODEL_KEYS) | set(TRAIN_KEYS))))
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--config", help="model/training key=value file")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--csv", help="per-epoch report (default: <out>.csv)")
    t.add_argument("--prompt", action="store_true", help="enable the dynamic-prompt path")
    t.add_argument("--rank", type=int, help="LoRA rank")
    t.add_argument("--epochs", type=int, help="stop after this many epochs")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="metrics CSV")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="MISO SE and NMSE-vs-horizon benchmark",
                       description="bench keys: " + ", ".join(sorted(BENCH_KEYS)))
    b.add_argument("--config", help="scenario/bench key=value file")
    b.add_argument("--checkpoint", action="append", help="neural checkpoint (repeatable)")
    b.add_argument("--speed", type=float, nargs="+", help="UE speeds in km/h")
    b.add_argument("--bs-array", nargs="+", help="BS arrays such as 2x8 8x8")
    b.add_argument("--snr-grid", type=float, nargs="+", help="SNR points in dB")
    b.add_argument("--trials", type=int, help="Monte-Carlo trials per point")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ModelConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionError, FormatError, OSError, RuntimeError, ValueError,
            np.linalg.LinAlgError) as exc:
        print(f"fapt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
