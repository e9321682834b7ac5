"""Command-line entry point: simulate, train, eval, sample, repro-switching.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalkit
from .flow import IDENTITY, FlowDivergenceError, FlowDomainError
from .models import (
    IncompatibleDataError,
    ModelConfig,
    NumericalError,
    SampleCounts,
    TrainConfig,
    build_model,
    fit_output_map,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .seqdata import (
    Dataset,
    DatasetParseError,
    InterArrivalSequence,
    ValidationError,
    load_jsonl,
    save_jsonl,
    split_dataset,
)
from .simulate import SimConfig, SimulationError, SwitchingSpec, simulate_dataset, simulate_marked, named_process, simulate_switching

log = logging.getLogger("ppflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
WORKERS_ENV = "PPFLOW_WORKERS"

DEFAULT_CONFIG = {
    "data": {
        "path": None,
        "process": "se",
        "n_seqs": 2000,
        "target_len": 60,
        "seed": 0,
        "num_categories": None,
        "mark_noise": 0.1,
        "split": [0.7, 0.1, 0.2],
        "split_seed": 0,
    },
    "model": {
        "kind": "ppfd",
        "hidden": 128,
        "latent": 256,
        "decoder_hidden": [256, 256],
        "log_std_clamp": 7.0,
        "seed": 0,
    },
    "flow": {"hidden": [64, 64, 64], "num_steps": 20, "output_map": "log_positive"},
    "train": {"epochs": 10, "batch_size": 32, "lr": 1e-3, "seed": 0, "kl_weight": 1.0, "clip_norm": None},
    "eval": {
        "iwae_samples": 1500,
        "mae_prior_samples": 100,
        "mae_decoder_samples": 15,
        "mae_flat_samples": 1500,
        "accuracy_prior_samples": 100,
        "seed": 0,
        "with_mae": True,
        "with_truth": False,
    },
    "output": {"dir": "runs/default"},
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- configuration ------------------------------------------------------------


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.split(".")
        patch = _parse_value(text)
        for p in reversed(parts):
            patch = {p: patch}
        cfg = _merge(cfg, patch)
    return cfg


def load_config(path=None, overrides=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        cfg = _merge(cfg, user)
    return apply_overrides(cfg, overrides)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def provenance(cfg: dict, command: str) -> dict:
    return {"tool": "ppflow", "version": __version__, "command": command, "config_hash": config_hash(cfg)}


def model_config(cfg: dict, num_categories=None) -> ModelConfig:
    m, f = cfg["model"], cfg["flow"]
    return ModelConfig(kind=m["kind"], hidden=m["hidden"], latent=m["latent"], decoder_hidden=tuple(m["decoder_hidden"]),
                       flow_hidden=tuple(f["hidden"]), num_steps=f["num_steps"], output_map=f["output_map"],
                       num_categories=num_categories, log_std_clamp=m["log_std_clamp"], seed=m["seed"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def eval_config(cfg: dict) -> evalkit.EvalConfig:
    e = {k: v for k, v in cfg["eval"].items() if k not in ("with_mae", "with_truth")}
    return evalkit.EvalConfig(**e)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# --- data -------------------------------------------------------------------


def make_dataset(process: str, n_seqs: int, target_len: int, seed: int, num_categories=None,
                 mark_noise: float = 0.1, workers: int = 1) -> Dataset:
    if process == "switching":
        if num_categories:
            raise UsageError("the switching dataset is unmarked")
        return simulate_switching(SwitchingSpec(n_seqs=n_seqs, seq_len=target_len), seed=seed)
    sim = SimConfig(target_len=target_len, n_seqs=n_seqs, seed=seed)
    if num_categories:
        return simulate_marked(named_process(process), num_categories, sim, noise=mark_noise, workers=workers)
    return simulate_dataset(process, sim, workers)


def dataset_from_config(cfg: dict, workers: int) -> Dataset:
    d = cfg["data"]
    if d["path"]:
        return load_jsonl(d["path"])
    return make_dataset(d["process"], d["n_seqs"], d["target_len"], d["seed"], d["num_categories"],
                        d["mark_noise"], workers)


def _summary(ds: Dataset) -> dict:
    taus = ds.all_taus()
    lengths = [len(s) for s in ds.sequences]
    return {"num_sequences": len(ds), "mean_length": float(np.mean(lengths)) if lengths else 0.0,
            "num_events": int(taus.size), "mean_tau": float(np.mean(taus)) if taus.size else float("nan")}


def _with_meta(ds: Dataset, extra: dict) -> Dataset:
    meta = dict(ds.meta or {})
    meta.update(extra)
    return Dataset(ds.sequences, ds.mode, ds.num_categories, ds.stats, meta)


# --- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    d = cfg["data"]
    for key, attr in (("process", "process"), ("n_seqs", "n"), ("target_len", "len"), ("seed", "seed"),
                      ("num_categories", "num_categories")):
        v = getattr(args, attr)
        if v is not None:
            d[key] = v
    if args.process == "switching" and args.len is None:
        d["target_len"] = SwitchingSpec().seq_len
    if args.process == "switching" and args.n is None:
        d["n_seqs"] = SwitchingSpec().n_seqs
    ds = make_dataset(d["process"], d["n_seqs"], d["target_len"], d["seed"], d["num_categories"],
                      d["mark_noise"], args.workers)
    ds = _with_meta(ds, {"provenance": provenance(d, "simulate")})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(ds, out)
    print(json.dumps({"out": str(out), **_summary(ds)}))
    return EXIT_OK


def _train_model(cfg: dict, ds: Dataset, out_dir: Path, resume=None) -> tuple:
    train_ds, val_ds, test_ds = split_dataset(ds, tuple(cfg["data"]["split"]), cfg["data"]["split_seed"])
    start_epoch = 0
    if resume:
        model, extra = load_checkpoint(resume)
        start_epoch = int(extra.get("epoch", 0))
    else:
        mcfg = model_config(cfg, ds.num_categories)
        model = build_model(mcfg, fit_output_map(train_ds, mcfg.output_map))
    model.check_dataset(ds)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.json"
    extra = {"provenance": provenance(cfg, "train"), "config": cfg, "epoch": start_epoch,
             "data_summary": _summary(train_ds)}

    def checkpoint(rec):
        # keep the latest state so an interrupted run can resume from it
        extra["epoch"] = rec["epoch"]
        save_checkpoint(model, out_dir / "last.json", extra)

    try:
        history = train(model, train_ds, val_ds, train_config(cfg), log_path=out_dir / "train_log.jsonl",
                        start_epoch=start_epoch, on_epoch=checkpoint)
    except NumericalError:
        save_checkpoint(model, out_dir / "last_good.json", extra)
        raise
    if history:
        best = min(history, key=lambda r: r["val_loss"])
        extra["epoch"] = history[-1]["epoch"]
        extra["best_epoch"] = best["epoch"]
        extra["best_val_loss"] = best["val_loss"]
    save_checkpoint(model, ckpt, extra)
    return model, ckpt, history, (train_ds, val_ds, test_ds)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.data:
        cfg["data"]["path"] = args.data
    out_dir = Path(args.out or cfg["output"]["dir"])
    ds = dataset_from_config(cfg, args.workers)
    _, ckpt, history, _ = _train_model(cfg, ds, out_dir, args.resume)
    last = history[-1] if history else {}
    print(json.dumps({"checkpoint": str(ckpt), "epochs": len(history), **last}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_jsonl(args.data)
    e = cfg["eval"]
    report = evalkit.evaluate(model, ds, eval_config(cfg), model_id=str(args.checkpoint), dataset_id=str(args.data),
                              with_mae=e["with_mae"], with_truth=e["with_truth"] or args.truth,
                              workers=args.workers)
    record = report.to_dict()
    record["provenance"] = provenance(cfg, "eval")
    line = json.dumps(record, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "a", encoding="utf-8") as f:
            f.write(line + "\n")
    summary = {k: record[k] for k in ("avg_ll", "ll_is_bound", "mae", "accuracy", "ll_score")}
    print(json.dumps(summary))
    return EXIT_OK


def _read_history(path) -> InterArrivalSequence:
    """History file: a JSON object ``{"taus": [...], "marks": [...]}`` or a bare list of gaps."""
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetParseError(e.lineno, f"history is not valid JSON: {e.msg}") from e
    if isinstance(obj, list):
        obj = {"taus": obj}
    if not isinstance(obj, dict) or "taus" not in obj:
        raise DatasetParseError(1, "history must be a list of gaps or an object with 'taus'")
    return InterArrivalSequence(tuple(obj["taus"]), None if obj.get("marks") is None else tuple(obj["marks"]),
                                str(obj.get("id", "history")))


def histogram(samples: np.ndarray, bin_width: float) -> list[tuple[float, float, int]]:
    """Fixed-width bins aligned to multiples of ``bin_width``."""
    if not bin_width > 0:
        raise UsageError("bin width must be > 0")
    lo = math.floor(float(np.min(samples)) / bin_width)
    idx = np.floor(samples / bin_width).astype(np.int64) - lo
    counts = np.bincount(idx)
    return [((lo + i) * bin_width, (lo + i + 1) * bin_width, int(c)) for i, c in enumerate(counts)]


def _write_csv(path: Path, header_meta: dict, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("# " + json.dumps(header_meta, sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)


def write_samples(out_dir: Path, samples: np.ndarray, bin_width: float, meta: dict, stem: str = "samples") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / f"{stem}.csv", meta, ["tau"], ([repr(float(x))] for x in samples))
    _write_csv(out_dir / f"{stem}_hist.csv", {**meta, "bin_width": bin_width}, ["lo", "hi", "count"],
               histogram(samples, bin_width))


def cmd_sample(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    history = _read_history(args.history)
    counts = SampleCounts(args.prior, args.decoder, args.samples)
    rng = np.random.default_rng(args.seed)
    out = model.sample_next(history, rng, counts)
    samples = np.asarray(out["taus"]).ravel()
    meta = {**provenance(vars_for_hash(args), "sample"), "model": model.kind, "num_samples": int(samples.size)}
    if "mark" in out:
        meta["mark"] = out["mark"]
    write_samples(Path(args.out), samples, args.bin_width, meta)
    print(json.dumps({"out": args.out, "num_samples": int(samples.size), "mean": float(np.mean(samples)),
                      **({"mark": out["mark"]} if "mark" in out else {})}))
    return EXIT_OK


def vars_for_hash(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


# --- switching reproduction ------------------------------------------------------

SWITCHING_OVERRIDES = {
    "data": {"process": "switching", "n_seqs": 1000, "target_len": 15},
    "flow": {"output_map": IDENTITY},
    "train": {"epochs": 40, "batch_size": 32},
}


def repro_switching(seed: int = 0, out_dir=None, overrides=None, workers: int = 1,
                    kinds=("ppfd", "ppfp"), hist_samples: int = 50, bin_width: float = 0.5) -> dict:
    """Simulate switching data, train both flow models and score them against the true law.

    Returns a report with one row per model plus odd/even-step sample
    histograms drawn from the test set.
    """
    cfg = _merge(DEFAULT_CONFIG, SWITCHING_OVERRIDES)
    cfg = apply_overrides(cfg, overrides)
    cfg["data"]["seed"] = cfg["data"]["split_seed"] = seed
    cfg["model"]["seed"] = cfg["train"]["seed"] = cfg["eval"]["seed"] = seed
    d = cfg["data"]
    ds = simulate_switching(SwitchingSpec(n_seqs=d["n_seqs"], seq_len=d["target_len"]), seed=seed)
    out_dir = Path(out_dir) if out_dir is not None else Path(cfg["output"]["dir"]) / "switching"
    ecfg = eval_config(cfg)
    report = {"provenance": provenance(cfg, "repro-switching"), "rows": []}
    for kind in kinds:
        kcfg = copy.deepcopy(cfg)
        kcfg["model"]["kind"] = kind
        model, ckpt, history, (_, _, test_ds) = _train_model(kcfg, ds, out_dir / kind)
        ll, bound = evalkit.avg_loglik(model, test_ds, ecfg, workers)
        truth = evalkit.truth_loglik(test_ds)
        batch = model.make_batch(test_ds.sequences[:hist_samples])
        rng = np.random.default_rng([seed, 4242])
        draws = model.predictive_samples(batch, SampleCounts(100, 15, 1500), rng)
        odd, even = draws[0::2].ravel(), draws[1::2].ravel()
        meta = {**report["provenance"], "model": kind}
        write_samples(out_dir / kind, odd, bin_width, {**meta, "steps": "odd"}, "odd_steps")
        write_samples(out_dir / kind, even, bin_width, {**meta, "steps": "even"}, "even_steps")
        report["rows"].append({
            "model": kind, "ll": ll, "ll_is_bound": bound, "ll_truth": truth, "ll_score": evalkit.ll_score(ll, truth),
            "epochs": len(history), "best_val_loss": min(r["val_loss"] for r in history) if history else None,
            "odd_frac_near_4": float(np.mean(np.abs(odd - 4.0) < 3.0)),
            "odd_frac_near_10": float(np.mean(np.abs(odd - 10.0) < 3.0)),
            "even_frac_near_4": float(np.mean(np.abs(even - 4.0) < 3.0)),
            "checkpoint": str(ckpt),
        })
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


def cmd_repro_switching(args) -> int:
    report = repro_switching(args.seed, args.out, args.set, args.workers)
    for row in report["rows"]:
        print(json.dumps({k: row[k] for k in ("model", "ll", "ll_truth", "ll_score")}))
    return EXIT_OK


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ppflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config field, e.g. train.epochs=5")
        sp.add_argument("--workers", type=int, default=default_workers())

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--process", choices=["ip", "se", "ip+se", "poisson", "switching"])
    s.add_argument("--n", type=int)
    s.add_argument("--len", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--num-categories", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a model; writes checkpoint and per-epoch log")
    common(t)
    t.add_argument("--data", help="JSONL dataset (otherwise simulated from the config)")
    t.add_argument("--out", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--truth", action="store_true", help="also report the LL score against the generating process")
    e.add_argument("--out", help="append the report record to this JSONL file")
    e.set_defaults(func=cmd_eval)

    sm = sub.add_parser("sample", help="sample the next gap after a history")
    common(sm, config=False)
    sm.add_argument("--checkpoint", required=True)
    sm.add_argument("--history", required=True)
    sm.add_argument("--prior", type=int, default=100)
    sm.add_argument("--decoder", type=int, default=15)
    sm.add_argument("--samples", type=int, default=1500)
    sm.add_argument("--bin-width", type=float, default=0.25)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out", required=True, help="output directory")
    sm.set_defaults(func=cmd_sample)

    r = sub.add_parser("repro-switching", help="switching-distribution experiment end to end")
    common(r)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_repro_switching)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, SimulationError) as e:
        print(f"ppflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetParseError, ValidationError, IncompatibleDataError, FlowDomainError, FileNotFoundError,
            evalkit.MissingTruthError) as e:
        print(f"ppflow: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FlowDivergenceError, FloatingPointError) as e:
        print(f"ppflow: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"ppflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
