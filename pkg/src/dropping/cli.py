"""Command-line experiment runner.

Usage::

    python3 -m dropping <command> [--config run.ini] [--section.key VALUE ...]

Every config key lives in an INI section (``[model] hidden_size = 24``) and
has a matching flag (``--model.hidden_size 24``). Defaults are overridden by
the config file, which is overridden by flags. Data splits are file paths
(TSV or SNLI-style JSONL) or synthetic specs such as
``synth:size=600,shift=0.1,seed=3``.

Exit status: 0 success, 2 invalid configuration, 3 unreadable input,
4 numerical divergence, 1 any other failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import (PairDataset, SynthSpec, Vocabulary, class_weights, few_shot_sample,
                   load_pairs, pair_swap_augment, synth_task)
from .encoders import ModelConfig, PairModel, load_model, save_model
from .ensemble import (BagConfig, ensemble_predict, load_ensemble, member_seeds, save_ensemble,
                       train_dropping_ensemble)
from .errors import (ConfigurationError, DroppingError, InputError, NumericError, RankError,
                     ShapeError, StateError)
from .losses import evaluate
from .plotting import emit_plot
from .smoothing import ErrorCurve, SmootherConfig, smooth_values
from .training import EarlyStopping, TrainConfig, fit
from .transfer import (GammaSchedule, TransferPlan, build_pool, reweight_pool, run_transfer,
                       target_rngs, write_curve_csv, zero_shot_eval)

log = logging.getLogger(__name__)

OUTPUT_ENV = "DROPPING_OUTPUT_DIR"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4


# ---------------------------------------------------------------- config schema

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _str_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _float_tuple(text: str):
    items = _str_list(text)
    return tuple(float(x) for x in items) if items else None


_CONVERTERS = {"int": int, "float": float, "bool": _parse_bool, "str": str,
               "int | None": _optional(int), "float | None": _optional(float)}


def _type_name(tp) -> str:
    if isinstance(tp, str):
        return tp
    return tp.__name__ if isinstance(tp, type) else str(tp)


def _fields_of(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        conv = _CONVERTERS.get(_type_name(f.type))
        if f.name in skip or conv is None:
            continue
        out[f.name] = (conv, f.default if f.default is not MISSING else f.default_factory())
    return out


SCHEMA: dict[str, dict] = {
    "data": {"train": (str, ""), "dev": (str, ""), "test": (str, ""), "format": (str, "auto"),
             "few_fraction": (float, 0.0), "genre_min": (int, 0), "swap_rate": (float, 0.0)},
    "model": _fields_of(ModelConfig, skip=("vocab_size", "n_classes")),
    "train": _fields_of(TrainConfig),
    "bag": {**_fields_of(BagConfig), "averaging": (str, "arithmetic")},
    "smoother": _fields_of(SmootherConfig),
    "schedule": _fields_of(GammaSchedule, skip=("delta_accum",)),
    "transfer": {"sources": (_str_list, []), "source_weights": (_float_tuple, None),
                 "alpha_mode": (str, "softmax"), "temperature": (float, 0.05),
                 "baseline": (str, "dropping"), "source_model": (str, "")},
    "synth": {**_fields_of(SynthSpec), "seed": (int, 0), "output": (str, "")},
    "eval": {"checkpoint": (str, "")},
    "plot": {"input": (str, ""), "output": (str, "")},
    "run": {"seed": (int, 0), "out": (str, ""), "jobs": (int, 1)},
}

REQUIRED_SPLITS = {
    "train-single": ("train", "dev", "test"),
    "train-ensemble": ("train", "dev", "test"),
    "transfer-zero": ("train", "test"),
    "transfer-few": ("train", "dev", "test"),
    "eval": ("train", "test"),
    "plot": (),
    "synth": (),
}
COMMANDS = tuple(REQUIRED_SPLITS)
DESCRIPTIONS = {
    "train-single": "train one model on the train split (dev for early stopping)",
    "train-ensemble": "train a dropping ensemble and save it as a source",
    "transfer-zero": "evaluate source ensembles on the target task without training",
    "transfer-few": "few-shot transfer from source ensembles (or a parameter-transfer baseline)",
    "eval": "evaluate a saved model or ensemble",
    "plot": "render curve.csv as an SVG learning curve",
    "synth": "write a synthetic pair task as TSV",
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _set(values: dict, section: str, key: str, text: str) -> None:
    if section not in SCHEMA:
        raise ConfigurationError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    conv = SCHEMA[section][key][0]
    try:
        values[section][key] = conv(text)
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: {exc}") from None


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> dict[str, dict]:
    """Defaults, then the INI file, then ``section.key`` overrides."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _set(values, section, key, text)
    for dest, text in overrides.items():
        section, key = dest.split(".", 1)
        _set(values, section, key, text)
    if not values["run"]["out"]:
        values["run"]["out"] = os.environ.get(OUTPUT_ENV, "runs")
    return values


# ---------------------------------------------------------------- experiment

@dataclass
class Experiment:
    command: str
    values: dict[str, dict]

    @property
    def out(self) -> Path:
        return Path(self.values["run"]["out"])

    @property
    def seeds(self) -> tuple[int, int]:
        """(data seed, model seed), split from the root seed."""
        data_seed, model_seed = member_seeds(self.values["run"]["seed"], 2)
        return data_seed, model_seed

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_classes=n_classes, **self.values["model"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def bag_config(self) -> BagConfig:
        kw = {k: v for k, v in self.values["bag"].items() if k != "averaging"}
        return BagConfig(train=self.train_config(), **kw)

    def smoother(self) -> SmootherConfig:
        return SmootherConfig(**self.values["smoother"])

    def schedule(self) -> GammaSchedule:
        return GammaSchedule(**self.values["schedule"])

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**{k: v for k, v in self.values["synth"].items()
                            if k not in ("seed", "output")})

    def plan(self, target_config, sources, source_model=None) -> TransferPlan:
        t = self.values["transfer"]
        return TransferPlan(target_config=target_config, train=self.train_config(),
                            sources=sources, source_weights=t["source_weights"],
                            schedule=self.schedule(), smoother=self.smoother(),
                            alpha_mode=t["alpha_mode"], temperature=t["temperature"],
                            baseline=t["baseline"], source_model=source_model,
                            seed=self.seeds[1], diagnostics_dir=str(self.out))

    def validate(self) -> None:
        """Everything checkable without loading data; raises ConfigurationError."""
        placeholder = self.model_config(1, 2)
        self.bag_config()
        self.synth_spec()
        if self.values["bag"]["averaging"] not in ("arithmetic", "geometric"):
            raise ConfigurationError("[bag] averaging must be arithmetic or geometric")
        if self.values["run"]["jobs"] < 1:
            raise ConfigurationError("[run] jobs must be >= 1")
        data = self.values["data"]
        for name in REQUIRED_SPLITS[self.command]:
            if not data[name]:
                raise ConfigurationError(f"[data] {name} is required for {self.command}")
        for name in ("train", "dev", "test"):
            if data[name]:
                _check_split_spec(data[name])
        if not 0.0 <= data["few_fraction"] < 1.0 or not 0.0 <= data["swap_rate"] <= 1.0:
            raise ConfigurationError("[data] few_fraction must lie in [0, 1), swap_rate in [0, 1]")
        t = self.values["transfer"]
        if self.command in ("transfer-zero", "transfer-few"):
            if self.command == "transfer-zero" or t["baseline"] == "dropping":
                if not t["sources"]:
                    raise ConfigurationError("[transfer] sources must list ensemble directories")
                for s in t["sources"]:
                    if not (Path(s) / "manifest.json").is_file():
                        raise ConfigurationError(f"not an ensemble directory: {s}")
            elif not Path(t["source_model"]).is_file():
                raise ConfigurationError(f"source model not found: {t['source_model']!r}")
        if self.command == "transfer-few":
            sources = [None] * max(1, len(t["sources"]))
            self.plan(placeholder, sources, source_model=placeholder).validate()
        if self.command == "eval" and not Path(self.values["eval"]["checkpoint"]).exists():
            raise ConfigurationError(f"checkpoint not found: {self.values['eval']['checkpoint']!r}")
        if self.command == "plot" and not self._plot_input().is_file():
            raise ConfigurationError(f"curve file not found: {self._plot_input()}")

    def _plot_input(self) -> Path:
        return Path(self.values["plot"]["input"] or self.out / "curve.csv")


# ---------------------------------------------------------------- data

def _parse_synth(body: str) -> tuple[SynthSpec, int]:
    values = {"seed": 0}
    for item in _str_list(body):
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or key not in SCHEMA["synth"] or key == "output":
            raise ConfigurationError(f"bad synthetic spec item {item!r}")
        try:
            values[key] = SCHEMA["synth"][key][0](text)
        except ValueError as exc:
            raise ConfigurationError(f"synthetic spec {key}: {exc}") from None
    seed = values.pop("seed")
    return SynthSpec(**values), seed


def _check_split_spec(text: str) -> None:
    if text.startswith("synth:"):
        _parse_synth(text[len("synth:"):])
    elif not Path(text).is_file():
        raise ConfigurationError(f"data file not found: {text}")


def conform(ds: PairDataset, vocab: Vocabulary | None, label_names) -> PairDataset:
    """Re-express ``ds`` in a reference vocabulary and label order."""
    instances = ds.instances
    names = ds.label_names
    if label_names is not None and tuple(label_names) != ds.label_names:
        index = {n: i for i, n in enumerate(label_names)}
        missing = sorted(set(ds.label_names) - set(index))
        if missing:
            raise InputError(f"labels {missing} are unknown to the reference label set")
        instances = [replace(x, label=index[ds.label_names[x.label]]) for x in instances]
        names = tuple(label_names)
    return PairDataset(list(instances), names, vocab or ds.vocab, dict(ds.report))


def load_split(text: str, fmt: str = "auto", vocab: Vocabulary | None = None,
               label_names=None) -> PairDataset:
    if text.startswith("synth:"):
        spec, seed = _parse_synth(text[len("synth:"):])
        return conform(synth_task(spec, np.random.default_rng(seed)), vocab, label_names)
    path = Path(text)
    if fmt == "auto":
        fmt = "snli_jsonl" if path.suffix in (".jsonl", ".json") else "tsv"
    return load_pairs(path, fmt, vocab=vocab, label_names=label_names)


def load_splits(exp: Experiment, vocab=None, label_names=None) -> dict[str, PairDataset]:
    """Splits required by the command; the train split defines vocab and labels if not given."""
    data = exp.values["data"]
    names = [n for n in ("train", "dev", "test") if data[n]]
    out = {"train": load_split(data["train"], data["format"], vocab, label_names)}
    vocab = vocab or out["train"].vocab
    label_names = label_names or out["train"].label_names
    for name in names[1:]:
        out[name] = load_split(data[name], data["format"], vocab, label_names)
    rng = np.random.default_rng(exp.seeds[0])
    if data["few_fraction"] > 0:
        out["train"], _ = few_shot_sample(out["train"], data["few_fraction"],
                                          genre_min=data["genre_min"], rng=rng)
    if data["swap_rate"] > 0:
        out["train"] = pair_swap_augment(out["train"], rng, data["swap_rate"])
    return out


def save_artifacts(directory: Path, ds: PairDataset) -> None:
    ds.vocab.dump(directory / "vocab.txt")
    (directory / "labels.txt").write_text("\n".join(ds.label_names) + "\n", encoding="utf-8")


def load_artifacts(directory: Path) -> tuple[Vocabulary, tuple[str, ...]]:
    vocab_path, label_path = directory / "vocab.txt", directory / "labels.txt"
    if not vocab_path.is_file() or not label_path.is_file():
        raise InputError(f"{directory} lacks vocab.txt / labels.txt")
    labels = tuple(label_path.read_text(encoding="utf-8").split())
    return Vocabulary.load(vocab_path), labels


def _load_sources(paths: list[str]):
    sources, refs = [], []
    for p in paths:
        sources.append(load_ensemble(p))
        refs.append(load_artifacts(Path(p)))
    for vocab, labels in refs[1:]:
        if vocab != refs[0][0] or labels != refs[0][1]:
            raise ConfigurationError("source ensembles were trained with different vocabularies")
    return sources, refs[0][0], refs[0][1]


# ---------------------------------------------------------------- outputs

def write_metrics(path: Path, phase: str, metrics: dict[str, dict[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "split", "accuracy", "log_loss"])
        for split in ("train", "test"):
            m = metrics[split]
            writer.writerow([phase, split, repr(float(m["accuracy"])), repr(float(m["log_loss"]))])


def write_report(exp: Experiment, metrics: dict, extra: dict | None = None) -> None:
    lines = [f"command = {exp.command}", ""]
    for section in SCHEMA:
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_format(v)}" for k, v in exp.values[section].items())
        lines.append("")
    lines.append("[results]")
    for split in ("train", "test"):
        for key in ("accuracy", "log_loss"):
            lines.append(f"{split}.{key} = {_format(float(metrics[split][key]))}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_format(v)}")
    (exp.out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _finish(exp: Experiment, metrics: dict, extra: dict | None = None) -> None:
    write_metrics(exp.out / "metrics.csv", exp.command, metrics)
    write_report(exp, metrics, extra)
    for split in ("train", "test"):
        m = metrics[split]
        print(f"{exp.command} {split}: accuracy {m['accuracy']:.3f}  log_loss {m['log_loss']:.4f}")


def _evaluate(predict, splits) -> dict[str, dict[str, float]]:
    out = {}
    for split in ("train", "test"):
        s1, s2, y = splits[split].encoded()
        out[split] = evaluate(predict(s1, s2), y)
    return out


class CurveRecorder(EarlyStopping):
    """Early stopping on dev log-loss that also records the dev error curve."""

    def __init__(self, dev, patience, smoother: SmootherConfig):
        super().__init__(dev, patience)
        self.smoother = smoother
        self.curve = ErrorCurve()
        self.points: list[dict] = []

    def on_eval(self, iteration, model):
        stop = super().on_eval(iteration, model)
        error = 1.0 - self.last["accuracy"] / 100.0
        self.curve.append(iteration, error)
        smoothed = smooth_values(self.curve, self.smoother)
        self.points.append({"iteration": iteration, "error": error,
                            "smoothed": None if smoothed is None else float(smoothed[-1]),
                            "delta": None, "gamma": 0.0})
        return stop


# ---------------------------------------------------------------- commands

def cmd_train_single(exp: Experiment) -> None:
    splits = load_splits(exp)
    train = splits["train"]
    config = exp.train_config()
    model_cfg = exp.model_config(len(train.vocab), train.n_classes)
    init_rng, train_rng = target_rngs(exp.seeds[1])
    model = PairModel.init(model_cfg, init_rng)
    recorder = CurveRecorder(splits["dev"].encoded(), config.patience, exp.smoother())
    weights = class_weights(train) if config.loss == "weighted_nll" else None
    try:
        fit(model, train.encoded(), config, train_rng, monitor=recorder, class_weights=weights)
    except NumericError as exc:
        path = exp.out / "diverged_curve.csv"
        write_curve_csv(recorder.points, path)
        raise NumericError(f"{exc}; curve written to {path}") from exc
    recorder.finish(model)
    write_curve_csv(recorder.points, exp.out / "curve.csv")
    ckpt = exp.out / "model"
    ckpt.mkdir(exist_ok=True)
    save_model(model, ckpt / "model.ckpt")
    save_artifacts(ckpt, train)
    _finish(exp, _evaluate(model.predict_proba, splits),
            {"fingerprint": model.fingerprint(), "evaluations": len(recorder.points)})


def cmd_train_ensemble(exp: Experiment) -> None:
    splits = load_splits(exp)
    train = splits["train"]
    model_cfg = exp.model_config(len(train.vocab), train.n_classes)
    ens = train_dropping_ensemble(train.encoded(), splits["dev"].encoded(), model_cfg,
                                  exp.bag_config(), seed=exp.seeds[1],
                                  jobs=exp.values["run"]["jobs"],
                                  averaging=exp.values["bag"]["averaging"])
    ckpt = exp.out / "ensemble"
    save_ensemble(ens, ckpt)
    save_artifacts(ckpt, train)
    _finish(exp, _evaluate(lambda a, b: ensemble_predict(ens, a, b), splits),
            {"members": len(ens), "member_dev_scores": [m.dev_score for m in ens.meta],
             "fingerprint": ens.fingerprint()})


def cmd_transfer_zero(exp: Experiment) -> None:
    t = exp.values["transfer"]
    sources, vocab, labels = _load_sources(t["sources"])
    splits = load_splits(exp, vocab, labels)
    pool = build_pool(sources, t["source_weights"])
    if "dev" in splits and t["alpha_mode"] != "fixed":
        dev = splits["dev"]
        pool, _ = reweight_pool(pool, pool.outputs(dev), dev.labels, t["alpha_mode"],
                                t["temperature"])
    metrics = {split: zero_shot_eval(pool, splits[split]) for split in ("train", "test")}
    _finish(exp, metrics, {"source_mass": [float(m) for m in pool.source_mass()]})


def cmd_transfer_few(exp: Experiment) -> None:
    t = exp.values["transfer"]
    sources, source_model = [], None
    if t["baseline"] == "dropping":
        sources, vocab, labels = _load_sources(t["sources"])
    else:
        source_model = load_model(t["source_model"])
        vocab, labels = load_artifacts(Path(t["source_model"]).parent)
    splits = load_splits(exp, vocab, labels)
    target_cfg = exp.model_config(len(vocab), len(labels))
    model, report = run_transfer(exp.plan(target_cfg, sources, source_model),
                                 splits["train"], splits["dev"], splits["test"])
    report.write_curve_csv(exp.out / "curve.csv")
    ckpt = exp.out / "target"
    ckpt.mkdir(exist_ok=True)
    save_model(model, ckpt / "model.ckpt")
    save_artifacts(ckpt, splits["train"])
    _finish(exp, report.metrics, {"final_gamma": report.config.get("final_gamma"),
                                  "alpha": report.alpha, "source_mass": report.source_mass,
                                  "fingerprint": model.fingerprint()})


def cmd_eval(exp: Experiment) -> None:
    path = Path(exp.values["eval"]["checkpoint"])
    if path.is_dir():
        predictor = load_ensemble(path)
        vocab, labels = load_artifacts(path)
    else:
        predictor = load_model(path)
        vocab, labels = load_artifacts(path.parent)
    splits = load_splits(exp, vocab, labels)
    _finish(exp, _evaluate(predictor.predict_proba, splits))


def cmd_plot(exp: Experiment) -> None:
    src = exp._plot_input()
    dst = Path(exp.values["plot"]["output"] or src.with_suffix(".svg"))
    emit_plot(src, dst)
    print(f"wrote {dst}")


def cmd_synth(exp: Experiment) -> None:
    spec = exp.synth_spec()
    ds = synth_task(spec, np.random.default_rng(exp.values["synth"]["seed"]))
    dst = Path(exp.values["synth"]["output"] or exp.out / "synth.tsv")
    dst.parent.mkdir(parents=True, exist_ok=True)
    with open(dst, "w", encoding="utf-8", newline="\n") as fh:
        for x in ds.instances:
            fh.write(f"{ds.label_names[x.label]}\t{' '.join(x.sentence1)}\t"
                     f"{' '.join(x.sentence2)}\n")
    print(f"wrote {len(ds)} pairs to {dst}")


HANDLERS = {
    "train-single": cmd_train_single,
    "train-ensemble": cmd_train_ensemble,
    "transfer-zero": cmd_transfer_zero,
    "transfer-few": cmd_transfer_few,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI file with [section] key = value entries")
    common.add_argument("--out", dest="run.out", default=argparse.SUPPRESS,
                        help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
    common.add_argument("--seed", dest="run.seed", default=argparse.SUPPRESS, help="root seed")
    common.add_argument("--jobs", dest="run.jobs", default=argparse.SUPPRESS,
                        help="worker processes for ensemble training")
    for section, keys in SCHEMA.items():
        group = common.add_argument_group(f"[{section}]")
        for key, (_, default) in keys.items():
            flag = f"--{section}.{key}"
            if flag in ("--run.out", "--run.seed", "--run.jobs"):
                continue
            group.add_argument(flag, dest=f"{section}.{key}", default=argparse.SUPPRESS,
                               metavar="VALUE", help=f"default: {_format(default)}")
    parser = argparse.ArgumentParser(prog="dropping",
                                     description="Dropping-network transfer experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=DESCRIPTIONS[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    try:
        exp = Experiment(args.command, resolve_config(args.config, overrides))
        exp.validate()
        exp.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](exp)
    except ConfigurationError as exc:
        print(f"dropping: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ShapeError, RankError, OSError) as exc:
        print(f"dropping: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, StateError) as exc:
        print(f"dropping: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DroppingError as exc:
        print(f"dropping: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK
