"""Flat key-value run manifests.

A manifest is an INI-style document. Keys use dotted names for the nested
parts of an experiment (``attack.kind``, ``detector.lambda``, ...)::

    # shared settings; keys before any section land here too
    [base]
    data.kind = synthetic
    rounds = 30

    [experiment.signflip_tinyguard]
    attack.kind = sign_flip
    defense.kind = tinyguard

Every ``[experiment.NAME]`` entry starts from the defaults, then ``[base]``,
then its own keys. A file with no experiment sections describes a single
entry called ``default``. Optional sections: ``[manifest]`` (output_dir,
repetitions), ``[pareto]``, ``[ablation]`` and ``[probe]``.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attacks import AttackChoice
from .baselines import AggregatorChoice
from .detector import DetectorConfig
from .errors import ConfigurationError
from .simulator import DataSource, ExperimentConfig

# flat key -> (section object, attribute, value type)
_KEYS = {
    "seed": (None, "seed", "int"),
    "n_clients": (None, "n_clients", "int"),
    "byzantine_fraction": (None, "byzantine_fraction", "float"),
    "dirichlet_alpha": (None, "dirichlet_alpha", "float"),
    "rounds": (None, "rounds", "int"),
    "eta": (None, "eta", "float"),
    "local_epochs": (None, "local_epochs", "int"),
    "batch_size": (None, "batch_size", "int"),
    "hidden_widths": (None, "hidden_widths", "int_list"),
    "weighted_fedavg": (None, "weighted_fedavg", "bool"),
    "data.kind": ("data", "kind", "str"),
    "data.train_images": ("data", "train_images", "opt_str"),
    "data.train_labels": ("data", "train_labels", "opt_str"),
    "data.test_images": ("data", "test_images", "opt_str"),
    "data.test_labels": ("data", "test_labels", "opt_str"),
    "data.num_examples": ("data", "num_examples", "int"),
    "data.test_examples": ("data", "test_examples", "int"),
    "data.input_dim": ("data", "input_dim", "int"),
    "data.num_classes": ("data", "num_classes", "int"),
    "data.separation": ("data", "separation", "float"),
    "data.noise": ("data", "noise", "float"),
    "attack.kind": ("attack", "kind", "str"),
    "attack.sigma": ("attack", "sigma", "float"),
    "attack.alpha": ("attack", "alpha", "float"),
    "attack.beta": ("attack", "beta", "float"),
    "attack.lambda_s": ("attack", "lambda_s", "float"),
    "attack.lambda_a": ("attack", "lambda_a", "float"),
    "attack.steps": ("attack", "steps", "int"),
    "attack.step_size": ("attack", "step_size", "float"),
    "attack.decay": ("attack", "decay", "float"),
    "attack.coords_per_step": ("attack", "coords_per_step", "int"),
    "defense.kind": ("defense", "kind", "str"),
    "defense.krum_f": ("defense", "krum_f", "opt_int"),
    "defense.multikrum_m": ("defense", "multikrum_m", "opt_int"),
    "defense.trim_fraction": ("defense", "trim_fraction", "float"),
    "defense.foolsgold_window": ("defense", "foolsgold_window", "opt_int"),
    "detector.lambda": ("detector", "lam", "float"),
    "detector.standardize": ("detector", "standardize_features", "bool"),
    "detector.epsilon": ("detector", "epsilon", "float"),
    "detector.k": ("detector", "k", "opt_int"),
}
_SECTION_TYPES = {"data": DataSource, "attack": AttackChoice, "defense": AggregatorChoice, "detector": DetectorConfig}

DEFAULT_LAMBDA_S = (0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0)
ABLATION_AXES = {"n_clients": "n_clients", "lambda": "detector.lambda", "dirichlet_alpha": "dirichlet_alpha"}


@dataclass(frozen=True)
class ParetoSpec:
    lambda_s: tuple[float, ...] = DEFAULT_LAMBDA_S
    warmup_rounds: int = 5


@dataclass(frozen=True)
class AblationSpec:
    axis: str | None = None
    values: tuple[float, ...] = ()


@dataclass(frozen=True)
class ProbeSpec:
    n_values: tuple[int, ...] = (50, 100, 200)
    d: int = 50890
    repetitions: int = 5


@dataclass(frozen=True)
class RunManifest:
    entries: tuple[tuple[str, ExperimentConfig], ...]
    output_dir: str = "results"
    repetitions: int = 1
    pareto: ParetoSpec = field(default_factory=ParetoSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigurationError(f"duplicate entry names: {dupes}")
        if not self.entries:
            raise ConfigurationError("manifest has no entries")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")

    def entry(self, name: str) -> ExperimentConfig:
        return dict(self.entries)[name]


def _parse_value(raw: str, kind: str):
    raw = raw.strip()
    if kind == "str":
        return raw
    if kind == "opt_str":
        return None if raw.lower() in ("", "none", "auto") else raw
    if kind == "int":
        return int(raw)
    if kind == "opt_int":
        return None if raw.lower() in ("auto", "none") else int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "int_list":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind == "float_list":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    raise AssertionError(kind)


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def config_to_dict(config: ExperimentConfig) -> dict:
    """Every field of the config under its flat key, JSON-ready."""
    out = {}
    for key, (section, attr, _) in _KEYS.items():
        obj = config if section is None else getattr(config, section)
        value = getattr(obj, attr)
        out[key] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(values: dict, base: ExperimentConfig | None = None, where=None) -> ExperimentConfig:
    """Build a config from flat keys (strings or typed values) over ``base``.

    ``where(key)`` gives location text for error messages.
    """
    where = where or (lambda key: "")
    base = ExperimentConfig() if base is None else base
    top, parts = {}, {name: {} for name in _SECTION_TYPES}
    for key, raw in values.items():
        if key not in _KEYS:
            raise ConfigurationError(f"{where(key)}unknown key {key!r}")
        section, attr, kind = _KEYS[key]
        try:
            value = _parse_value(raw, kind) if isinstance(raw, str) else raw
            if kind in ("int_list", "float_list"):
                value = tuple(value)
        except ValueError as exc:
            raise ConfigurationError(f"{where(key)}bad value for {key!r}: {exc}") from None
        (top if section is None else parts[section])[attr] = value

    try:
        for name, kw in parts.items():
            if kw:
                top[name] = replace(getattr(base, name), **kw)
        return replace(base, **top)
    except ConfigurationError as exc:
        keys = list(values)
        raise ConfigurationError(f"{where(keys[0]) if keys else ''}{exc}") from None


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number in ``text``."""
    lines, section = {}, "base"
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", stripped)
        if m:
            lines.setdefault((section, m.group(1)), no)
    return lines


def parse_manifest_text(text: str, source: str = "<manifest>") -> RunManifest:
    parser = configparser.ConfigParser(interpolation=None, strict=True, comment_prefixes=("#", ";"))
    parser.optionxform = str
    # keys above the first section header belong to [base]
    first = next((ln.strip() for ln in text.splitlines() if ln.strip() and ln.strip()[0] not in "#;"), "")
    body = text if first.startswith("[") else "[base]\n" + text
    try:
        parser.read_string(body, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: malformed manifest: {exc}") from None
    lines = _key_lines(text)

    def where_in(section):
        return lambda key: f"{source}:{lines.get((section, key), '?')}: [{section}] "

    known = {"base", "manifest", "pareto", "ablation", "probe"}
    for section in parser.sections():
        if section not in known and not section.startswith("experiment."):
            raise ConfigurationError(f"{source}: unknown section [{section}]")

    base_values = dict(parser["base"]) if parser.has_section("base") else {}
    base = config_from_dict(base_values, where=where_in("base"))
    entries = []
    for section in parser.sections():
        if section.startswith("experiment."):
            name = section[len("experiment."):].strip()
            if not name:
                raise ConfigurationError(f"{source}: experiment section without a name")
            entries.append((name, config_from_dict(dict(parser[section]), base, where_in(section))))
    if not entries:
        entries.append(("default", base))

    def section_values(name, schema):
        if not parser.has_section(name):
            return {}
        out, where = {}, where_in(name)
        for key, raw in parser[name].items():
            if key not in schema:
                raise ConfigurationError(f"{where(key)}unknown key {key!r}")
            try:
                out[key] = _parse_value(raw, schema[key])
            except ValueError as exc:
                raise ConfigurationError(f"{where(key)}bad value for {key!r}: {exc}") from None
        return out

    man = section_values("manifest", {"output_dir": "str", "repetitions": "int"})
    pareto = ParetoSpec(**section_values("pareto", {"lambda_s": "float_list", "warmup_rounds": "int"}))
    ablation = AblationSpec(**section_values("ablation", {"axis": "opt_str", "values": "float_list"}))
    if ablation.axis is not None and ablation.axis not in ABLATION_AXES:
        raise ConfigurationError(f"{source}: ablation axis must be one of {sorted(ABLATION_AXES)}")
    probe = ProbeSpec(**section_values("probe", {"n_values": "int_list", "d": "int", "repetitions": "int"}))
    return RunManifest(tuple(entries), pareto=pareto, ablation=ablation, probe=probe, **man)


def parse_manifest(path) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest {path} does not exist")
    return parse_manifest_text(path.read_text(), str(path))


def serialize_config(config: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in config_to_dict(config).items())


def serialize_manifest(manifest: RunManifest) -> str:
    """Fully explicit text form; parsing it gives back an equal manifest."""
    out = [
        "[manifest]\n",
        f"output_dir = {manifest.output_dir}\n",
        f"repetitions = {manifest.repetitions}\n",
        "\n[pareto]\n",
        f"lambda_s = {_format_value(manifest.pareto.lambda_s)}\n",
        f"warmup_rounds = {manifest.pareto.warmup_rounds}\n",
        "\n[probe]\n",
        f"n_values = {_format_value(manifest.probe.n_values)}\n",
        f"d = {manifest.probe.d}\n",
        f"repetitions = {manifest.probe.repetitions}\n",
    ]
    if manifest.ablation.axis is not None:
        out += ["\n[ablation]\n", f"axis = {manifest.ablation.axis}\n",
                f"values = {_format_value(manifest.ablation.values)}\n"]
    for name, config in manifest.entries:
        out += [f"\n[experiment.{name}]\n", serialize_config(config)]
    return "".join(out)


def with_value(config: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Copy of ``config`` with one flat key changed."""
    return config_from_dict({key: value}, config)
