"""INI experiment configuration with presets and line-numbered errors.

Sections and keys are documented in ``docs/config.md``.  Values not given
fall back to the dataclass defaults, so an empty file is a valid config.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .convergence import ConvergenceConfig
from .nn import ElasticArch, SubNetworkSpec
from .protocol import Mode, ProtocolConfig
from .simenv import DeviceTemplate, FleetSpec, PartitionPlan, Scheme, TaskConfig

OUT_ENV = "NESTFL_OUT"


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    max_depth_per_block: int = 3
    max_width: int = 32
    allowed_depths: tuple[int, ...] = (1, 2, 3)
    allowed_widths: tuple[int, ...] = (8, 16, 32)


@dataclass(frozen=True)
class SweepConfig:
    fractions: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    medium_depth: int = 2
    medium_width: int = 16
    medium_q: int = 8
    small_depth: int = 1
    small_width: int = 8
    small_q: int = 10
    tail_rounds: int = 5

    def __post_init__(self):
        if not self.fractions or any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError("sweep fractions must lie in [0, 1]")
        if self.tail_rounds < 1:
            raise ValueError("tail_rounds must be positive")

    @property
    def medium(self) -> SubNetworkSpec:
        return SubNetworkSpec(self.medium_depth, self.medium_width)

    @property
    def small(self) -> SubNetworkSpec:
        return SubNetworkSpec(self.small_depth, self.small_width)


@dataclass(frozen=True)
class TierConfig:
    compute_rate: float
    q_max: int
    bandwidth_bps: float
    mu: float
    fraction: float

    def __post_init__(self):
        if min(self.compute_rate, self.bandwidth_bps, self.mu) <= 0:
            raise ValueError("tier resources must be positive")
        if self.q_max not in (8, 16, 32):
            raise ValueError(f"q_max must be 8, 16 or 32, got {self.q_max}")


DEFAULT_TIERS = {
    "small": TierConfig(5e4, 16, 30e6, 10.0, 0.5),
    "medium": TierConfig(1.5e5, 8, 30e6, 10.0, 0.5),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    modes: tuple[Mode, ...] = (Mode.FEDX,)
    tail_rounds: int = 5
    model: ModelConfig = ModelConfig()
    protocol: ProtocolConfig = ProtocolConfig()
    task: TaskConfig = TaskConfig()
    partition: PartitionPlan = PartitionPlan()
    tiers: dict[str, TierConfig] = field(default_factory=lambda: dict(DEFAULT_TIERS))
    sweep: SweepConfig = SweepConfig()
    convergence: ConvergenceConfig = ConvergenceConfig()

    def arch(self) -> ElasticArch:
        m = self.model
        return ElasticArch(
            self.task.input_dim,
            self.task.num_classes,
            m.num_blocks,
            m.max_depth_per_block,
            m.max_width,
            m.allowed_depths,
            m.allowed_widths,
        )

    def fleet_spec(self) -> FleetSpec:
        return FleetSpec(
            tuple(
                (DeviceTemplate(name, t.compute_rate, t.q_max, t.bandwidth_bps, t.mu), t.fraction)
                for name, t in self.tiers.items()
            )
        )

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(
            self,
            seed=seed,
            protocol=replace(self.protocol, seed=seed),
            convergence=replace(self.convergence, seed=seed),
        )


PRESETS = {
    "default": "",
    "fedx_vs_noft": """
[experiment]
modes = fedx, fedx_no_finetune
""",
    "mix_sweep": """
[sweep]
fractions = 0, 0.2, 0.4, 0.6, 0.8, 1.0
""",
}


# --- parsing -----------------------------------------------------------------


def _tuple_of(kind):
    def parse(text: str):
        items = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(kind(p) for p in items)

    return parse


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else kind(text)

    return parse


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parser_for(f) -> callable:
    overrides = {
        "allowed_depths": _tuple_of(int),
        "allowed_widths": _tuple_of(int),
        "server_classes": _tuple_of(int),
        "device_classes": _tuple_of(int),
        "fractions": _tuple_of(float),
        "modes": _tuple_of(Mode),
        "finetune_steps": _optional(int),
        "uniform_depth": _optional(int),
        "uniform_width": _optional(int),
        "uplink_q": _optional(int),
        "acceptable_drop": _optional(float),
        "mode": Mode,
        "scheme": Scheme,
    }
    if f.name in overrides:
        return overrides[f.name]
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool}.get(
        str(f.type), str
    )
    return _bool if kind is bool else kind


def _line_numbers(text: str) -> dict[tuple[str, str | None], int]:
    """``(section, key) -> line`` for keys and ``(section, None)`` for headers."""
    lines: dict[tuple[str, str | None], int] = {}
    section = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            lines[(section, None)] = number
        elif section is not None and not raw[:1].isspace():
            for sep in ("=", ":"):
                if sep in line:
                    lines[(section, line.split(sep, 1)[0].strip().lower())] = number
                    break
    return lines


_EXPERIMENT_KEYS = {"seed": int, "modes": _tuple_of(Mode), "tail_rounds": int}
_TIER_KEYS = {f.name: _parser_for(f) for f in fields(TierConfig)}
_SECTIONS = {
    "model": ModelConfig,
    "protocol": ProtocolConfig,
    "task": TaskConfig,
    "partition": PartitionPlan,
    "sweep": SweepConfig,
    "convergence": ConvergenceConfig,
}


def parse_config(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    """Apply the INI ``text`` on top of ``base`` (default: built-in defaults)."""
    cfg = base or ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno, source) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, source) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, source) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line, source) from None
    lines = _line_numbers(text)

    def values(section: str, table: dict) -> dict:
        out = {}
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in table:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, source)
            try:
                out[key] = table[key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", line, source) from None
        return out

    def build(current, section: str, updates: dict):
        try:
            if isinstance(current, type):
                return current(**updates)
            return replace(current, **updates)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}", lines.get((section, None)), source) from None

    tiers = dict(cfg.tiers)
    explicit_tiers = [s for s in parser.sections() if s.startswith("tier.")]
    if explicit_tiers:
        tiers = {}
    updates: dict = {}
    for section in parser.sections():
        line = lines.get((section, None))
        if section == "experiment":
            updates.update(values(section, _EXPERIMENT_KEYS))
        elif section.startswith("tier."):
            name = section[len("tier.") :]
            got = values(section, _TIER_KEYS)
            known = cfg.tiers.get(name) or DEFAULT_TIERS.get(name)
            if known is None:
                missing = [k for k in _TIER_KEYS if k not in got]
                if missing:
                    raise ConfigError(f"[{section}] missing {', '.join(missing)}", line, source)
                tiers[name] = build(TierConfig, section, got)
            else:
                tiers[name] = build(known, section, got)
        elif section in _SECTIONS:
            current = getattr(cfg, section)
            # the seed lives in [experiment]; run modes in [experiment] modes
            table = {
                f.name: _parser_for(f)
                for f in fields(_SECTIONS[section])
                if f.init and f.name not in ("seed", "mode")
            }
            updates[section] = build(current, section, values(section, table))
        else:
            raise ConfigError(f"unknown section [{section}]", line, source)
    updates["tiers"] = tiers
    try:
        out = replace(cfg, **updates)
        out.fleet_spec()
        out.arch()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), None, source) from None
    if out.tail_rounds < 1:
        raise ConfigError("tail_rounds must be positive", lines.get(("experiment", "tail_rounds")), source)
    # one seed drives every component
    return out.with_seed(out.seed)


def load_config(path=None, preset: str | None = None) -> ExperimentConfig:
    """Built-in defaults, then ``preset``, then the file at ``path``."""
    cfg = ExperimentConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        cfg = parse_config(PRESETS[preset], cfg, source=f"<preset {preset}>")
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
        cfg = parse_config(text, cfg, source=str(path))
    return cfg


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "out"))


def describe(cfg: ExperimentConfig) -> str:
    """Human-readable resolved plan (used by ``--dry-run``)."""
    arch = cfg.arch()
    lines = [
        f"seed: {cfg.seed}",
        f"modes: {', '.join(m.value for m in cfg.modes)}",
        f"arch: in={arch.input_dim} out={arch.output_dim} blocks={arch.num_blocks} "
        f"depths={arch.allowed_depths} widths={arch.allowed_widths} params={arch.param_count}",
        f"task: {cfg.task}",
        f"partition: {cfg.partition}",
        f"protocol: {cfg.protocol}",
    ]
    for name, t in cfg.tiers.items():
        lines.append(f"tier {name}: {t}")
    lines.append(f"sweep: {cfg.sweep}")
    lines.append(f"convergence: {cfg.convergence}")
    return "\n".join(lines)
