"""Command-line interface: synth, features, train, eval, compare and replay.

Every command writing to ``--out`` leaves a ``manifest.json`` next to its
artifacts, also when it fails. ``spidernet replay MANIFEST`` re-runs a command
from the manifest's argument and config snapshot alone.

Exit codes: 0 success, 2 config or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from spidernet import __version__, architectures, features, metrics, pipeline
from spidernet.architectures import Network, load_checkpoint, save_checkpoint
from spidernet.data import (DataError, Dataset, Standardizer, SynthConfig, load_csv, save_csv,
                            stratified_split_indices, synth_generate)
from spidernet.training import NumericalError, TrainConfig, grid_search, train

log = logging.getLogger("spidernet")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "SPIDERNET_SEED"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid command-line or config-file input."""


@dataclass
class RunManifest:
    command: str
    args: dict
    config: dict = field(default_factory=dict)
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__
    duration_s: float = 0.0
    status: str = "running"
    exit_code: int | None = None
    error: str | None = None

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_seed(flag=None, configured=None):
    """Flag beats config file, config file beats $SPIDERNET_SEED, which beats 0."""
    if flag is not None:
        return int(flag)
    if configured is not None:
        return int(configured)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return Path(path)


# ---------------------------------------------------------------------------
# synth


def prep_synth(args):
    raw = _read_json(args.config, "synth config") if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("synth config must be a JSON object")
    raw = dict(raw)
    raw["seed"] = resolve_seed(args.seed, raw.get("seed"))
    return SynthConfig.from_dict(raw).to_dict()


def run_synth(args, config, out):
    ds = synth_generate(SynthConfig.from_dict(config))
    csv_path = out / "dataset.csv"
    save_csv(ds, csv_path)
    log.info("wrote %d rows, fraud rate %.4f", ds.n_rows, ds.fraud_rate)
    return [csv_path, csv_path.with_suffix(".schema.json")]


# ---------------------------------------------------------------------------
# features


def prep_features(args):
    tests = []
    if args.config and not args.skip_bw:
        tests = [asdict(c) for c in features.load_bw_config(args.config)]
    if not 0.0 <= args.fill_rate <= 1.0:
        raise ConfigError("--fill-rate must be in [0, 1]")
    return {"fill_rate": args.fill_rate, "corr_threshold": args.corr_threshold, "skip_bw": bool(args.skip_bw),
            "tests": tests}


def run_features(args, config, out):
    ds = load_csv(args.data)
    kept = features.fill_rate_filter(ds, config["fill_rate"])
    if config["corr_threshold"] is not None:
        kept = features.correlation_prune(ds, threshold=config["corr_threshold"], features=kept)
    dropped = [n for n in ds.feature_names if n not in kept]
    tests = [features.BWTestConfig(**t) for t in config["tests"]]
    augmented = features.generate_bw_features(ds, tests) if tests else ds
    result = augmented.select(kept + [t.column for t in tests])
    log.info("kept %d of %d features, added %d B/W columns", len(kept), len(ds.feature_names), len(tests))
    csv_path = out / "features.csv"
    save_csv(result, csv_path)
    report = _write_json(out / "selection.json", {"kept": kept, "dropped": dropped,
                                                   "added": [t.column for t in tests],
                                                   "fill_rates": ds.fill_rates()})
    return [csv_path, csv_path.with_suffix(".schema.json"), report]


# ---------------------------------------------------------------------------
# train

_BLOCK_KEY = {"spidernet": "n_blocks", "cnn": "n_conv", "fdensenet": "convs_per_block"}
_KERNEL_KEY = {"densenet": "conv_kernel"}
_FILTER_KEY = {"densenet": "growth_k"}


def prep_train(args):
    file_cfg = _read_json(args.config, "train config") if args.config else {}
    if not isinstance(file_cfg, dict):
        raise ConfigError("train config must be a JSON object")
    unknown = set(file_cfg) - {"arch", "arch_kwargs", "train", "split"}
    if unknown:
        raise ConfigError(f"unknown train config sections: {sorted(unknown)}")
    arch = args.arch or file_cfg.get("arch", "spidernet")
    if arch not in ("spidernet", "cnn", "densenet", "fdensenet"):
        raise ConfigError(f"unknown architecture {arch!r}")
    kw = dict(file_cfg.get("arch_kwargs", {}))
    if args.blocks is not None:
        if arch not in _BLOCK_KEY:
            raise ConfigError("--blocks is not defined for densenet; set block_sizes in arch_kwargs")
        kw[_BLOCK_KEY[arch]] = args.blocks
    for flag, key in ((args.kernel_size, _KERNEL_KEY.get(arch, "kernel")), (args.filters, _FILTER_KEY.get(arch, "filters")),
                      (args.hidden, "hidden"), (args.dropout, "dropout")):
        if flag is not None:
            kw[key] = flag
    tc = dict(file_cfg.get("train", {}))
    for flag, key in ((args.learn_rate, "learning_rate"), (args.l2_batch, "l2_batch"), (args.weight_decay, "weight_decay"),
                      (args.batch_size, "batch_size"), (args.fraud_rate, "target_fraud_rate"),
                      (args.max_epochs, "max_epochs"), (args.patience, "patience")):
        if flag is not None:
            tc[key] = flag
    tc["seed"] = resolve_seed(args.seed, tc.get("seed"))
    tconf = TrainConfig.from_dict(tc)
    split = {"fractions": [0.8, 0.1, 0.1], "seed": tconf.seed, "by_entity": True}
    split.update(file_cfg.get("split", {}))
    if args.split_seed is not None:
        split["seed"] = args.split_seed
    return {"arch": arch, "arch_kwargs": kw, "train": tconf.to_dict(), "split": split}


def run_train(args, config, out):
    ds = load_csv(args.data)
    split = config["split"]
    kw = dict(config["arch_kwargs"])
    pad = pipeline.input_pad(config["arch"], ds.X.shape[1], kw)
    idx, scaler, Z = pipeline.prepare(ds, split["seed"], split["by_entity"], tuple(split["fractions"]), pad=pad)
    tr, va, _ = idx
    data_splits = ((Z[tr], ds.y[tr]), (Z[va], ds.y[va]))
    tconf = TrainConfig.from_dict(config["train"])
    artifacts = []
    if tconf.grid:
        builder = lambda **g: architectures.build(config["arch"], input_length=Z.shape[1], **{**kw, **g})
        best, board = grid_search(builder, tconf.grid, data_splits, tconf)
        artifacts.append(_write_json(out / "leaderboard.json", board))
        if best is None:
            raise NumericalError("every grid combination failed")
        train_keys = set(TrainConfig.__dataclass_fields__) - {"grid"}
        kw.update({k: v for k, v in best.items() if k not in train_keys})
        tconf = TrainConfig.from_dict({**config["train"], **{k: v for k, v in best.items() if k in train_keys},
                                       "grid": {}})
    spec = architectures.build(config["arch"], input_length=Z.shape[1], **kw)
    net = Network(spec, seed=tconf.seed)
    history_path = out / "history.json"
    epochs = []
    try:
        _, history = train(net, data_splits, tconf, on_epoch=epochs.append)
    except NumericalError:
        artifacts.append(_write_json(history_path, {"epochs": epochs, "failed": True}))
        raise
    artifacts.append(_write_json(history_path, history.to_dict()))
    extra = {"feature_names": ds.feature_names, "standardizer": scaler.to_dict(), "split": split,
             "n_rows": ds.n_rows, "train": tconf.to_dict(), "arch_kwargs": kw}
    artifacts.append(save_checkpoint(out / "checkpoint.npz", net, extra))
    log.info("best epoch %d of %d; %d parameters", history.best_epoch, len(history.epochs), net.n_params)
    return artifacts


# ---------------------------------------------------------------------------
# eval


def prep_eval(args):
    if args.budget is not None and args.budget < 1:
        raise ConfigError("--budget must be >= 1")
    return {"budget": args.budget, "split": args.split, "alpha": args.alpha, "model": args.model}


def _eval_rows(ds: Dataset, extra, which):
    if which == "all":
        return np.arange(ds.n_rows)
    if ds.n_rows != extra.get("n_rows"):
        raise ConfigError(f"dataset has {ds.n_rows} rows but the checkpoint was trained on {extra.get('n_rows')}; "
                          "use --split all for a different dataset")
    split = extra["split"]
    idx = stratified_split_indices(ds, tuple(split["fractions"]), split["seed"], split["by_entity"])
    return idx[{"train": 0, "val": 1, "test": 2}[which]]


def run_eval(args, config, out):
    net, extra = load_checkpoint(args.checkpoint)
    ds = load_csv(args.data)
    missing = [n for n in extra["feature_names"] if n not in ds.feature_names]
    if missing:
        raise ConfigError(f"dataset lacks checkpoint features: {missing[:5]}")
    ds = ds.select(extra["feature_names"])
    part = ds.subset(_eval_rows(ds, extra, config["split"]))
    budget = config["budget"]
    if budget is not None and part.finance is None:
        print("warning: dataset has no financial columns (P, DR, DR0); prevented loss omitted", file=sys.stderr)
    scaler = Standardizer(**extra["standardizer"])
    report = pipeline.evaluate(net, scaler, part, budget=budget, model=config["model"], alpha=config["alpha"])
    table = metrics.render_table([report])
    print(table)
    return [_write_json(out / "report.json", report.to_dict()), _write_text(out / "report.txt", table + "\n")]


def _write_text(path, text):
    Path(path).write_text(text)
    return Path(path)


# ---------------------------------------------------------------------------
# compare


def _metric_dict(path):
    d = _read_json(path, "report")
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: report must be a JSON object")
    m = d.get("metrics", d)
    vals = {k: v for k, v in m.items() if isinstance(v, (int, float)) and not isinstance(v, bool)}
    if not vals:
        raise ConfigError(f"{path}: no numeric metrics")
    return vals


def prep_compare(args):
    return {"a": _metric_dict(args.report_a), "b": _metric_dict(args.report_b)}


def run_compare(args, config, out):
    try:
        result = metrics.compare_reports(config["a"], config["b"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"A wins {result['wins']} of {result['n']} shared metrics ({', '.join(result['metrics'])}); "
          f"one-sided sign test p = {result['p_value']:.6g}")
    if out is None:
        return []
    return [_write_json(out / "compare.json", result)]


# ---------------------------------------------------------------------------
# dispatch

COMMANDS = {
    "synth": (prep_synth, run_synth),
    "features": (prep_features, run_features),
    "train": (prep_train, run_train),
    "eval": (prep_eval, run_eval),
    "compare": (prep_compare, run_compare),
}
_PATH_ARGS = ("config", "data", "checkpoint", "report_a", "report_b", "out")


def _snapshot_args(args):
    d = {k: v for k, v in vars(args).items() if k not in ("func", "verbose", "quiet")}
    for k in _PATH_ARGS:
        if d.get(k) is not None:
            d[k] = str(Path(d[k]).resolve())
    return d


def execute(command, args, config=None):
    """Run one command, always leaving a manifest when ``args.out`` is set."""
    prep, run = COMMANDS[command]
    out = Path(args.out) if getattr(args, "out", None) else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    manifest = RunManifest(command=command, args=_snapshot_args(args))
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        if config is None:
            config = prep(args)
        manifest.config = config
        manifest.seed = (config.get("train") or {}).get("seed", config.get("seed"))
        for k in ("data", "checkpoint", "report_a", "report_b"):
            if getattr(args, k, None):
                manifest.inputs[k] = {"path": str(Path(getattr(args, k)).resolve()),
                                      "sha256": _sha256(getattr(args, k))}
        artifacts = run(args, config, out)
        manifest.outputs = [str(Path(p).resolve()) for p in artifacts]
    except NumericalError as exc:
        code, manifest.error = EXIT_NUMERIC, f"{type(exc).__name__}: {exc}"
    except (ConfigError, DataError, ValueError, KeyError, TypeError, OSError) as exc:
        code, manifest.error = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    manifest.duration_s = round(time.perf_counter() - t0, 3)
    manifest.exit_code = code
    manifest.status = "ok" if code == EXIT_OK else "failed"
    if manifest.error:
        print(f"error: {manifest.error}", file=sys.stderr)
    if out is not None:
        manifest.write(out)
    return code


def cmd_replay(args):
    m = _read_json(args.manifest, "manifest")
    if m.get("command") not in COMMANDS:
        raise ConfigError(f"{args.manifest}: unknown command {m.get('command')!r}")
    ns = argparse.Namespace(**m["args"])
    ns.out = args.out or str(Path(args.manifest).resolve().parent / "replay")
    return execute(m["command"], ns, config=m["config"] or None)


def build_parser():
    p = argparse.ArgumentParser(prog="spidernet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic fraud dataset")
    s.add_argument("--config", help="SynthConfig JSON (defaults for missing keys)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help=f"overrides the config seed and ${SEED_ENV}")

    f = sub.add_parser("features", parents=[common], help="feature selection and B/W-test generation")
    f.add_argument("--data", required=True, help="input CSV with a sibling .schema.json")
    f.add_argument("--config", help="JSON list of B/W tests")
    f.add_argument("--out", required=True)
    f.add_argument("--fill-rate", dest="fill_rate", type=float, default=0.0, help="minimum non-missing fraction")
    f.add_argument("--corr-threshold", dest="corr_threshold", type=float, help="prune pairs with |rho| above this")
    f.add_argument("--skip-bw", dest="skip_bw", action="store_true", help="selection only, no B/W columns")

    t = sub.add_parser("train", parents=[common], help="train a model with early stopping")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--arch", choices=["spidernet", "cnn", "densenet", "fdensenet"])
    t.add_argument("--config", help="JSON with arch, arch_kwargs, train and split sections")
    t.add_argument("--blocks", type=int, help="SpiderNet blocks, CNN conv layers or F-DenseNet convs per block")
    t.add_argument("--kernel_size", "--kernel-size", dest="kernel_size", type=int)
    t.add_argument("--filters", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--l2_batch", "--l2-batch", dest="l2_batch", type=float)
    t.add_argument("--weight_decay", "--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--learn_rate", "--learn-rate", dest="learn_rate", type=float)
    t.add_argument("--batch_size", "--batch-size", dest="batch_size", type=int)
    t.add_argument("--fraud_rate", "--fraud-rate", dest="fraud_rate", type=float, help="target fraud rate per batch")
    t.add_argument("--max-epochs", "--max_epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--split-seed", dest="split_seed", type=int)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint and report metrics with confidence intervals")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--budget", type=int, default=40, help="investigation budget k for prevented loss")
    e.add_argument("--split", choices=["test", "val", "train", "all"], default="test")
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--model", help="name shown in the report table")

    c = sub.add_parser("compare", parents=[common], help="sign test of report A against report B")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out")

    r = sub.add_parser("replay", parents=[common], help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="defaults to <manifest dir>/replay")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        try:
            return cmd_replay(args)
        except (ConfigError, KeyError, TypeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    return execute(args.command, args)
