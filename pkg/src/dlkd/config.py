"""Line-oriented ``key = value`` run configuration.

One file describes the data (generated or loaded from a directory), the
training hyperparameters shared by all three arms and the experiment seeds.
Blank lines and ``#`` comments are ignored; unknown or repeated keys are
errors. Every key is optional and falls back to the dlkd-bench-v1 defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from dlkd import data as D
from dlkd.enhance import EnhanceParams
from dlkd.errors import ConfigError, DLKDError
from dlkd.losses import LossWeights
from dlkd.train import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    classes: int = D.BENCH_CLASSES
    per_class: int = D.BENCH_PER_CLASS
    dims: tuple = D.BENCH_DIMS
    data_seed: int = D.BENCH_SEED
    gamma_dark: float = D.BENCH_GAMMA_DARK
    scale: float = D.BENCH_SCALE
    noise: float = D.BENCH_NOISE
    train_fraction: float = D.BENCH_TRAIN_FRACTION
    split_seed: int = D.BENCH_SPLIT_SEED
    data_dir: str = ""

    def darken_params(self):
        return D.DarkenParams(self.gamma_dark, self.scale, self.noise, self.data_seed)

    def is_bench(self):
        return self == DataConfig()

    def load(self, base_dir=None):
        """The full dark dataset: read from ``data_dir`` if set, else generated."""
        if self.data_dir:
            path = Path(self.data_dir)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return D.load_dataset(path)
        if self.is_bench():
            return D.bench_dataset()
        bright = D.generate_dataset(self.classes, self.per_class, self.dims, self.data_seed)
        return D.darken_dataset(bright, self.darken_params())


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple = (0, 1, 2)
    workers: int = 1

    def for_seed(self, seed):
        return replace(self.train, init_seed=seed, shuffle_seed=seed)


def _int(text):
    return int(text, 0)


def _ints(text):
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t, 0) for t in items)


def _mean(text):
    return None if text.lower() == "auto" else float(text)


def _dims(text):
    parts = tuple(int(t) for t in text.lower().split("x"))
    if len(parts) != 4:
        raise ValueError("expected CxTxHxW")
    return parts


# key -> (section, field name, converter)
KEYS = {
    "classes": ("data", "classes", _int),
    "per_class": ("data", "per_class", _int),
    "dims": ("data", "dims", _dims),
    "data_seed": ("data", "data_seed", _int),
    "gamma_dark": ("data", "gamma_dark", float),
    "scale": ("data", "scale", float),
    "noise": ("data", "noise", float),
    "train_fraction": ("data", "train_fraction", float),
    "split_seed": ("data", "split_seed", _int),
    "data_dir": ("data", "data_dir", str),
    "epochs": ("train", "epochs", _int),
    "batch_size": ("train", "batch_size", _int),
    "lr": ("train", "lr", float),
    "shuffle_seed": ("train", "shuffle_seed", _int),
    "init_seed": ("train", "init_seed", _int),
    "widths": ("train", "widths", _ints),
    "spatial_kernel": ("train", "spatial_kernel", _int),
    "temporal_kernel": ("train", "temporal_kernel", _int),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "eps": ("train", "eps", float),
    "weight_decay": ("train", "weight_decay", float),
    "input_mean": ("train", "input_mean", _mean),
    "input_std": ("train", "input_std", float),
    "alpha": ("weights", "alpha", float),
    "beta": ("weights", "beta", float),
    "temperature": ("weights", "temperature", float),
    "enhance_method": ("enhance", "method", str),
    "enhance_gamma": ("enhance", "gamma", float),
    "enhance_alpha": ("enhance", "alpha", float),
    "enhance_iterations": ("enhance", "iterations", _int),
    "seeds": ("run", "seeds", _ints),
    "workers": ("run", "workers", _int),
}


def parse_config(text, source="<config>"):
    values = {"data": {}, "train": {}, "weights": {}, "enhance": {}, "run": {}}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        section, name, convert = KEYS[key]
        try:
            values[section][name] = convert(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {value!r} ({exc})") from None

    try:
        train = replace(
            TrainConfig(**values["train"]),
            weights=LossWeights(**values["weights"]),
            enhance=EnhanceParams(**values["enhance"]),
        )
        data = DataConfig(**values["data"])
        D.DarkenParams(data.gamma_dark, data.scale, data.noise)
        run = RunConfig(data, train, **values["run"])
    except (DLKDError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if run.workers < 1:
        raise ConfigError(f"{source}: workers must be >= 1, got {run.workers}")
    if len(set(run.seeds)) != len(run.seeds):
        raise ConfigError(f"{source}: duplicate seeds in {run.seeds}")
    return run


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(run):
    """Inverse of ``parse_config``: every key, one per line."""
    lines = []
    sections = {
        "data": run.data,
        "train": run.train,
        "weights": run.train.weights,
        "enhance": run.train.enhance,
        "run": run,
    }
    for key, (section, name, _) in KEYS.items():
        value = getattr(sections[section], name)
        if isinstance(value, tuple):
            value = ("x" if key == "dims" else ",").join(str(v) for v in value)
        elif hasattr(value, "value"):
            value = value.value
        elif value is None:
            value = "auto"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

