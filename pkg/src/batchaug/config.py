"""Experiment configuration: a small sectioned key = value format.

Every key has a default, unknown sections or keys are rejected with the
offending line number, and `dump_config` renders a canonical form that
parses back to the same values.  Example:

    [train]
    mode = ba
    replicas = 4
    milestones = 10,15

Comma lists may be empty.  Booleans are `true`/`false`.
"""

from __future__ import annotations

from .augment import parse_transform
from .errors import ConfigError
from .optim import StepDecay, TrainConfig, WarmupThenStep


def _int_list(raw):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _float_list(raw):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(float(part) for part in raw.split(","))


def _str_list(raw):
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(part.strip() for part in raw.split(","))


def _bool(raw):
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _fraction(v):
    return 0.0 <= v < 1.0


_MODES = ("plain", "ba", "ba_accumulate", "ra")
_DATASET_KINDS = ("synthetic", "idx")
_STATES = ("init", "partial", "converged")

# key -> (default, converter, validator or None, requirement text)
SCHEMA = {
    "dataset": {
        "kind": ("synthetic", str, lambda v: v in _DATASET_KINDS,
                 "one of synthetic, idx"),
        "classes": (10, int, lambda v: v >= 2, ">= 2"),
        "per_class": (100, int, _positive, "positive"),
        "val_per_class": (20, int, _positive, "positive"),
        "height": (16, int, lambda v: v >= 4, ">= 4"),
        "width": (16, int, lambda v: v >= 4, ">= 4"),
        "channels": (1, int, lambda v: v in (1, 3), "1 or 3"),
        "seed": (0, int, None, ""),
        "images_path": ("", str, None, ""),
        "labels_path": ("", str, None, ""),
        "val_images_path": ("", str, None, ""),
        "val_labels_path": ("", str, None, ""),
    },
    "model": {
        "text": ("cnn:8", str, lambda v: bool(v), "non-empty"),
        "dropout": (0.0, float, _fraction, "in [0, 1)"),
    },
    "augment": {
        "spec": ("padcrop:2,hflip:0.5", str, None, ""),
    },
    "train": {
        "mode": ("ba", str, lambda v: v in _MODES,
                 "one of plain, ba, ba_accumulate, ra"),
        "base_lr": (0.1, float, _positive, "positive"),
        "batch_size": (32, int, _positive, "positive"),
        "epochs": (5, int, _non_negative, "non-negative"),
        "replicas": (2, int, _positive, "positive"),
        "momentum": (0.9, float, _fraction, "in [0, 1)"),
        "weight_decay": (0.0005, float, _non_negative, "non-negative"),
        "milestones": ((), _int_list, None, ""),
        "lr_decay_factor": (10.0, float, lambda v: v > 1, "> 1"),
        "warmup_epochs": (0, int, _non_negative, "non-negative"),
        "ghost_size": (32, int, _positive, "positive"),
        "sampler_seed": (0, int, None, ""),
        "augment_seed": (1, int, None, ""),
        "init_seed": (2, int, None, ""),
        "with_replacement": (False, _bool, None, ""),
        "divergence_factor": (1e4, float, lambda v: v > 1, "> 1"),
        "step_rows": (False, _bool, None, ""),
    },
    "diagnostics": {
        "pairs": (100, int, _positive, "positive"),
        "m_list": ((1, 2, 4, 8), _int_list,
                   lambda v: len(v) > 0 and all(m >= 1 for m in v),
                   "non-empty, entries >= 1"),
        "repeats": (10, int, _positive, "positive"),
        "batch_size": (32, int, _positive, "positive"),
        "states": (("init",), _str_list,
                   lambda v: len(v) > 0 and all(s in _STATES for s in v),
                   "subset of init, partial, converged"),
        "partial_epochs": (3, int, _positive, "positive"),
        "converged_epochs": (12, int, _positive, "positive"),
        "throughput_max_batch": (32, int, _positive, "positive"),
        "throughput_repeats": (5, int, _positive, "positive"),
    },
    "dynamics": {
        "problems": (20, int, _positive, "positive"),
        "dim": (8, int, _positive, "positive"),
        "n_samples": (32, int, _positive, "positive"),
        "batch_size": (4, int, _positive, "positive"),
        "rank": (8, int, _positive, "positive"),
        "eta_fractions": ((0.1, 0.5, 0.9), _float_list,
                          lambda v: len(v) > 0 and
                          all(0 < f < 1 for f in v),
                          "non-empty fractions in (0, 1)"),
        "t_steps": (100_000, int, _positive, "positive"),
        "seed": (0, int, None, ""),
        "tightness_pairs": (5, int, _non_negative, "non-negative"),
        "tightness_lam": (2.0, float, _positive, "positive"),
        "trajectory_trials": (3, int, _non_negative, "non-negative"),
    },
    "distsim": {
        "workers": (8, int, _positive, "positive"),
        "replicas": (4, int, _positive, "positive"),
        "local_batch": (16, int, _positive, "positive"),
        "steps": (50, int, _positive, "positive"),
        "base_seed": (7, int, None, ""),
    },
}


def default_config() -> dict:
    return {section: {key: spec[0] for key, spec in keys.items()}
            for section, keys in SCHEMA.items()}


def _convert(section, key, raw, where):
    default, converter, validator, requirement = SCHEMA[section][key]
    conv = converter if converter is not str else str
    try:
        value = conv(raw) if converter is not str else raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}")
    if validator is not None and not validator(value):
        raise ConfigError(
            f"{where}: {section}.{key} must be {requirement}, got {raw!r}")
    return value


def parse_config(text: str) -> dict:
    """Parse a config document; unknown names and bad values carry the
    line number they came from."""
    cfg = default_config()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: unterminated section header")
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{name}]")
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {section}.{key}")
        cfg[section][key] = _convert(section, key, raw, where)
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: dict) -> str:
    """Canonical form: schema section and key order, one key per line."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(cfg[section][key])}")
        lines.append("")
    return "\n".join(lines)


def apply_override(cfg: dict, spec: str):
    """Apply `section.key=value`, with the same checks as file parsing."""
    head, sep, raw = spec.partition("=")
    if not sep:
        raise ConfigError(f"override {spec!r}: expected section.key=value")
    section, dot, key = head.strip().partition(".")
    key = key.strip()
    if not dot or section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"override {spec!r}: unknown key {head.strip()}")
    cfg[section][key] = _convert(section, key, raw.strip(),
                                 f"override {head.strip()}")


def build_train_config(cfg: dict) -> TrainConfig:
    """TrainConfig from the [train] and [augment] sections."""
    t = cfg["train"]
    if t["warmup_epochs"] > 0:
        schedule = WarmupThenStep(warmup_epochs=t["warmup_epochs"],
                                  milestones=t["milestones"],
                                  factor=t["lr_decay_factor"])
    else:
        schedule = StepDecay(milestones=t["milestones"],
                             factor=t["lr_decay_factor"])
    return TrainConfig(
        base_lr=t["base_lr"], batch_size=t["batch_size"],
        epochs=t["epochs"], replicas=t["replicas"], momentum=t["momentum"],
        weight_decay=t["weight_decay"], schedule=schedule,
        ghost_size=t["ghost_size"],
        transform=parse_transform(cfg["augment"]["spec"]),
        sampler_seed=t["sampler_seed"], augment_seed=t["augment_seed"],
        init_seed=t["init_seed"], with_replacement=t["with_replacement"],
        divergence_factor=t["divergence_factor"])
