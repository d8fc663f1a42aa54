"""Command-line entry point: ``earlycrop <command> [--config run.json] [--out DIR] ...``.

Every command reads and writes files inside one run directory and prints one
summary line to standard output.  Exit status is 0 on success, 1 for invalid
input (bad flags, missing or malformed files, invalid configuration) and 2
when a computation fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import report
from .dataio import SynthConfig, generate_synthetic, load_dataset, save_dataset, split_spatial
from .errors import (ConfigError, EarlyCropError, InferenceError, ModelFormatError, ParseError,
                     PruningError, SchemaError, SplitError)
from .experiments import (curve_auc, earliness_experiment, prune_curve_random,
                          prune_curve_targeted, save_curves, save_earliness)
from .lrp import (LrpConfig, conservation_gap, relevance_maps, save_relevance_maps,
                  save_timestep_relevance)
from .model import ModelConfig, init_model, load_params, save_params
from .timeframe import (STATISTICS, aggregate_relevance, dominant_peaks, load_profile,
                        save_profile, save_timeframes, timeframes)
from .train import TrainConfig, evaluate, save_history, train

log = logging.getLogger("earlycrop")

VALIDATION_ERRORS = (ConfigError, ParseError, SchemaError, SplitError, ModelFormatError,
                     InferenceError, PruningError, FileNotFoundError, IsADirectoryError,
                     NotADirectoryError, json.JSONDecodeError)


@dataclass
class TimeframeOptions:
    n_list: tuple = (3, 5, 10)
    statistic: str = "mean"
    correct_only: bool = True
    peak_threshold: float = 0.25

    def validate(self):
        self.n_list = tuple(int(n) for n in self.n_list)
        if not self.n_list or min(self.n_list) < 1:
            raise ConfigError("n_list needs positive entries")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"statistic must be one of {STATISTICS}")
        if not self.peak_threshold > 0:
            raise ConfigError("peak_threshold must be > 0")
        return self


@dataclass
class ExperimentOptions:
    trials: int = 20
    max_samples: int | None = None
    test_fraction: float = 0.2
    export_maps: int = 20

    def validate(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConfigError("max_samples must be >= 1 or null")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.export_maps < 0:
            raise ConfigError("export_maps must be >= 0")
        return self


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    try:
        obj = cls(**d)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from None
    return obj.validate()


@dataclass
class RunConfig:
    """One JSON document describing a whole run.

    ``seed`` fills every sub-configuration seed that the document leaves out;
    ``--seed`` on the command line overrides all of them.
    """

    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lrp: LrpConfig = field(default_factory=LrpConfig)
    timeframe: TimeframeOptions = field(default_factory=TimeframeOptions)
    experiments: ExperimentOptions = field(default_factory=ExperimentOptions)
    out_dir: str = "run"
    seed: int = 0

    SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
                "lrp": LrpConfig, "timeframe": TimeframeOptions,
                "experiments": ExperimentOptions}

    @classmethod
    def from_dict(cls, d, seed=None):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS) - {"out_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        base = d.get("seed", 0) if seed is None else seed
        if not isinstance(base, int) or base < 0:
            raise ConfigError("seed must be a non-negative integer")
        parts = {}
        for name, kind in cls.SECTIONS.items():
            sub = dict(d.get(name, {}) or {})
            if name in ("synth", "train") and (seed is not None or "seed" not in sub):
                sub["seed"] = base
            parts[name] = _section(kind, sub, name)
        return cls(**parts, out_dir=str(d.get("out_dir", "run")), seed=base)

    def to_dict(self):
        out = {name: getattr(self, name).to_dict() if hasattr(getattr(self, name), "to_dict")
               else dataclasses.asdict(getattr(self, name)) for name in self.SECTIONS}
        out["timeframe"]["n_list"] = list(self.timeframe.n_list)
        out["out_dir"] = self.out_dir
        out["seed"] = self.seed
        return out


def load_run_config(path=None, seed=None, out_dir=None):
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(doc, seed)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


# ---------------------------------------------------------------------------
# commands; each returns its summary line
# ---------------------------------------------------------------------------

def _out(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path(given, out, default):
    return Path(given) if given else out / default


def _fmt_window(tf):
    return f"{tf.start.isoformat()}..{tf.end.isoformat()}"


def cmd_gen_data(cfg, args=None):
    out = _out(cfg)
    ds = generate_synthetic(cfg.synth)
    tr, te = split_spatial(ds, cfg.experiments.test_fraction, cfg.seed)
    save_dataset(ds, out / "data.csv")
    save_dataset(tr, out / "train.csv")
    save_dataset(te, out / "test.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8", newline="\n")
    return (f"gen-data: {len(ds)} parcels, {ds.n_classes} classes, T={len(ds.axis)}, "
            f"B={ds.n_bands}; split {len(tr)} train / {len(te)} test -> {out}")


def cmd_train(cfg, args=None):
    out = _out(cfg)
    ds = load_dataset(_path(getattr(args, "data", None), out, "train.csv"))
    mc = dataclasses.replace(cfg.model, B=ds.n_bands, C=ds.n_classes)
    mc.validate()
    params, history = train(init_model(mc, cfg.seed), ds, cfg.train)
    model_path = _path(getattr(args, "model", None), out, "model.json")
    save_params(params, model_path)
    save_history(history, out / "history.csv")
    acc = evaluate(params, ds).overall_accuracy
    best = max((r["val_acc"] for r in history if not math.isnan(r["val_acc"])), default=math.nan)
    return (f"train: {len(history)} epochs, train accuracy {acc:.4f}, best validation accuracy "
            f"{best:.4f} -> {model_path}")


def cmd_eval(cfg, args=None):
    out = _out(cfg)
    params = load_params(_path(getattr(args, "model", None), out, "model.json"))
    data = _path(getattr(args, "data", None), out, "test.csv")
    ds = load_dataset(data)
    m = evaluate(params, ds)
    lines = ["class,producer_accuracy,user_accuracy,support"]
    support = m.confusion.sum(axis=1)
    for k in range(len(support)):
        lines.append(f"{k},{m.producer_accuracy[k]:.9g},{m.user_accuracy[k]:.9g},{support[k]}")
    lines.append(f"overall,{m.overall_accuracy:.9g},{m.overall_accuracy:.9g},{support.sum()}")
    (out / f"metrics_{data.stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                                  newline="\n")
    return (f"eval: overall accuracy {m.overall_accuracy:.4f}, mean producer accuracy "
            f"{m.mean_producer_accuracy:.4f}, mean user accuracy {m.mean_user_accuracy:.4f} "
            f"on {len(ds)} parcels")


def cmd_explain(cfg, args=None):
    out = _out(cfg)
    params = load_params(_path(getattr(args, "model", None), out, "model.json"))
    ds = load_dataset(_path(getattr(args, "data", None), out, "train.csv"))
    maps = relevance_maps(params, ds, cfg.lrp)
    save_timestep_relevance(maps, ds.axis, out / "relevance_t.csv")
    save_relevance_maps(maps[:cfg.experiments.export_maps], ds.axis, ds.band_names,
                        out / "relevance_bt.csv")
    tf = cfg.timeframe
    profile = aggregate_relevance(params, ds, cfg.lrp, tf.statistic, tf.correct_only)
    save_profile(profile, ds.axis, out / "profile.csv", ds.class_names)
    gap = float(np.mean([conservation_gap(m) for m in maps]))
    return (f"explain: {len(maps)} relevance maps, mean conservation gap {gap:.3g}, "
            f"profile from {profile.n_samples_used} parcels -> {out / 'profile.csv'}")


def _n_list(args, cfg):
    raw = getattr(args, "n", None)
    if not raw:
        return cfg.timeframe.n_list
    try:
        return tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"--n expects comma-separated integers, got {raw!r}") from None


def cmd_timeframe(cfg, args=None):
    out = _out(cfg)
    axis, profile = load_profile(_path(getattr(args, "profile", None), out, "profile.csv"))
    frames = timeframes(profile, axis, _n_list(args, cfg))
    save_timeframes(frames, out / "timeframes.csv")
    peaks = dominant_peaks(profile, cfg.timeframe.peak_threshold)
    windows = "; ".join(f"dt_{tf.n} {_fmt_window(tf)}" for tf in frames)
    return f"timeframe: {windows}; {len(peaks)} dominant peaks"


def cmd_prune_exp(cfg, args=None):
    out = _out(cfg)
    params = load_params(_path(getattr(args, "model", None), out, "model.json"))
    ds = load_dataset(_path(getattr(args, "data", None), out, "test.csv"))
    ex = cfg.experiments
    trials = getattr(args, "trials", None) or ex.trials
    targeted = prune_curve_targeted(params, ds, cfg.lrp, ex.max_samples)
    rand = prune_curve_random(params, ds, trials, cfg.seed, ex.max_samples)
    save_curves([targeted, rand], out / "prune_curves.csv")
    lines = ["mode,auc,auc_vs_random,mse_at_25pct"]
    for c in (targeted, rand):
        lines.append(f"{c.mode},{curve_auc(c):.9g},{curve_auc(c, rand):.9g},"
                     f"{c.mse_at_fraction(0.25):.9g}")
    (out / "prune_auc.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return (f"prune-exp: AUC targeted {curve_auc(targeted, rand):.4f} vs random "
            f"{curve_auc(rand, rand):.4f} ({trials} trials); mse at 25% removed "
            f"{targeted.mse_at_fraction(0.25):.4g} vs {rand.mse_at_fraction(0.25):.4g}")


def cmd_earliness(cfg, args=None):
    out = _out(cfg)
    tr = load_dataset(_path(getattr(args, "train", None), out, "train.csv"))
    te = load_dataset(_path(getattr(args, "test", None), out, "test.csv"), tr.class_names)
    axis, profile = load_profile(_path(getattr(args, "profile", None), out, "profile.csv"))
    windows = timeframes(profile, axis, _n_list(args, cfg))
    mc = dataclasses.replace(cfg.model, B=tr.n_bands, C=tr.n_classes)
    results = earliness_experiment(tr, te, windows, cfg.train, mc, cfg.seed)
    save_earliness(results, out / "earliness.csv")
    parts = [f"{r.label} {100 * r.test_accuracy:.2f}%" for r in results]
    return "earliness: test accuracy " + ", ".join(parts)


def cmd_report(cfg, args=None):
    out = Path(cfg.out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"run directory {out} does not exist")
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    data = _path(getattr(args, "data", None), out, "train.csv")
    ds = load_dataset(data)
    made = []
    windows = report.read_timeframes(out / "timeframes.csv") \
        if (out / "timeframes.csv").exists() else []
    r_t = report.read_timestep_relevance(out / "relevance_t.csv")
    report.class_panels(ds, r_t, windows[:1], figs / "class_relevance.svg")
    made.append("class_relevance.svg")
    if (out / "relevance_bt.csv").exists():
        maps = report.read_band_relevance(out / "relevance_bt.csv")
        index = {s.parcel_id: s for s in ds.samples}
        pid = next((p for p in maps if p in index), None)
        if pid is not None:
            report.parcel_panel(index[pid], ds.band_names, maps[pid], figs / "parcel_relevance.svg")
            made.append("parcel_relevance.svg")
    if (out / "prune_curves.csv").exists():
        report.curve_figure(report.read_curves(out / "prune_curves.csv"),
                            figs / "prune_curves.svg")
        made.append("prune_curves.svg")
    if (out / "earliness.csv").exists():
        report.earliness_table(report.read_earliness(out / "earliness.csv"),
                               figs / "earliness.svg")
        made.append("earliness.svg")
    return f"report: {len(made)} figures ({', '.join(made)}) -> {figs}"


PIPELINE = (("gen-data", cmd_gen_data), ("train", cmd_train), ("eval", cmd_eval),
            ("explain", cmd_explain), ("timeframe", cmd_timeframe),
            ("prune-exp", cmd_prune_exp), ("earliness", cmd_earliness), ("report", cmd_report))


def cmd_pipeline(cfg, args=None):
    for name, fn in PIPELINE:
        log.info("%s", fn(cfg, None))
    return f"pipeline: {len(PIPELINE)} steps completed -> {cfg.out_dir}"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return v


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=_seed, help="overrides every seed of the run config")
    common.add_argument("--out", help="run directory (default: out_dir of the config)")
    common.add_argument("--quiet", action="store_true", help="only warnings on stderr")

    p = _Parser(prog="earlycrop", description="Relevance-guided timeframes for crop "
                                              "classification on satellite timeseries.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    cmds = {
        "gen-data": ("generate a synthetic dataset and its spatial split", ()),
        "train": ("train a classifier", ("data", "model")),
        "eval": ("accuracy metrics of a model on a dataset", ("data", "model")),
        "explain": ("relevance maps and the aggregated profile", ("data", "model")),
        "timeframe": ("windows spanned by the top-n timesteps", ("profile", "n")),
        "prune-exp": ("targeted versus random timestep removal", ("data", "model", "trials")),
        "earliness": ("retrain on each window", ("train", "test", "profile", "n")),
        "report": ("SVG figures from the run directory", ("data",)),
        "pipeline": ("every step above in order", ()),
    }
    for name, (help_text, extra) in cmds.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        for opt in extra:
            if opt == "trials":
                sp.add_argument("--trials", type=int, help="random-order trials")
            elif opt == "n":
                sp.add_argument("--n", help="comma-separated top-n sizes, e.g. 3,5,10")
            else:
                sp.add_argument(f"--{opt}", help=f"{opt} file (default: inside the run directory)")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "timeframe": cmd_timeframe, "prune-exp": cmd_prune_exp,
            "earliness": cmd_earliness, "report": cmd_report, "pipeline": cmd_pipeline}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        cfg = load_run_config(args.config, args.seed, args.out)
        if getattr(args, "trials", None) is not None and args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        summary = COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"earlycrop {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (EarlyCropError, ArithmeticError, RuntimeError, OSError, MemoryError) as exc:
        print(f"earlycrop {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
