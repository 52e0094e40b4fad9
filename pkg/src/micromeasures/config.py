"""Scenario configuration: a versioned YAML file with validated sections.

Relative paths are resolved against the directory of the config file.  The
stored values keep their spelling so that dumping and reloading a config
gives the same config back.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .mobility import ModelKind
from .strategies import GOHOME_RULES, MIX_GROUPS, StrategyConfig, StrategyKind

CONFIG_VERSION = 1
MOBILITY_SOURCES = ("trace", "model", "synthetic")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _unit(lo_open=False, hi_open=False):
    def check(v):
        return (v > 0 if lo_open else v >= 0) and (v < 1 if hi_open else v <= 1)
    lo, hi = "(" if lo_open else "[", ")" if hi_open else "]"
    return check, f"a number in {lo}0, 1{hi}"


_POSITIVE = (lambda v: v > 0, "a positive number")
_NONNEG = (lambda v: v >= 0, "a non-negative number")


def _choice(options):
    return (lambda v: v in options, "one of " + ", ".join(options))


# field -> (allowed types, (predicate, description) or None)
@dataclass
class MobilityConfig:
    source: str = "trace"
    trace: str | None = None
    antenna_count: int | None = None
    observation_days: float | None = None
    subpref_map: str | None = None
    model: str | None = None
    alpha: float = 0.5
    kind: str = ModelKind.HOME_ANTENNA_TIME.value
    synthetic: dict = field(default_factory=dict)

    RULES = {
        "source": (str, _choice(MOBILITY_SOURCES)),
        "trace": (str, None), "subpref_map": (str, None), "model": (str, None),
        "antenna_count": (int, _POSITIVE), "observation_days": ((int, float), _POSITIVE),
        "alpha": ((int, float), _POSITIVE), "kind": (str, _choice([k.value for k in ModelKind])),
        "synthetic": (dict, None),
    }


@dataclass
class EpidemicConfig:
    population: str | None = None
    beta: float = 1.0
    g: float = 0.5
    steps: int = 400
    steps_per_day: int = 3
    mobile_fraction: float = 0.55
    start_weekday: int = 0
    # explicit [[antenna_id, count], ...]; otherwise seed_total over the seed_regions most populous
    seed_infectives: list | None = None
    seed_total: int = 23
    seed_regions: int = 5
    per_region_output: bool = False

    RULES = {
        "population": (str, None),
        "beta": ((int, float), _unit(lo_open=True)), "g": ((int, float), _unit(lo_open=True)),
        "steps": (int, _NONNEG), "steps_per_day": (int, (lambda v: 1 <= v <= 3, "1, 2 or 3")),
        "mobile_fraction": ((int, float), _unit()),
        "start_weekday": (int, (lambda v: 0 <= v <= 6, "0 (Monday) .. 6 (Sunday)")),
        "seed_infectives": (list, None), "seed_total": (int, _NONNEG), "seed_regions": (int, _POSITIVE),
        "per_region_output": (bool, None),
    }


@dataclass
class CommunityConfig:
    # "louvain" or the path of an antenna_id,community_id CSV
    source: str = "louvain"
    resolution: float = 1.0
    threshold: float = 1e-6
    export_graph: bool = True

    RULES = {
        "source": (str, None), "resolution": ((int, float), _POSITIVE),
        "threshold": ((int, float), _NONNEG), "export_graph": (bool, None),
    }


@dataclass
class StrategySection:
    kind: str = StrategyKind.BASELINE.value
    p: float = 0.0
    q: float = 1.0
    beta_home: float | None = None
    mix_groups: str = "home"
    gohome_rule: str = "safer"

    RULES = {
        "kind": (str, _choice([k.value for k in StrategyKind])),
        "p": ((int, float), _unit()), "q": ((int, float), _unit()),
        "beta_home": ((int, float), _unit(lo_open=True)),
        "mix_groups": (str, _choice(MIX_GROUPS)), "gohome_rule": (str, _choice(GOHOME_RULES)),
    }

    def build(self, communities=None) -> StrategyConfig:
        return StrategyConfig(StrategyKind(self.kind), float(self.p), float(self.q), communities,
                              None if self.beta_home is None else float(self.beta_home),
                              self.mix_groups, self.gohome_rule)

    @property
    def needs_communities(self) -> bool:
        return self.kind == StrategyKind.CUT_COMMUNITIES.value or (
            self.kind == StrategyKind.DECREASE_MIX.value and self.mix_groups == "community")


@dataclass
class EnsembleConfig:
    runs: int = 1
    workers: int = 1

    RULES = {"runs": (int, _POSITIVE), "workers": (int, _POSITIVE)}


SECTIONS = {
    "mobility": MobilityConfig, "epidemic": EpidemicConfig, "communities": CommunityConfig,
    "strategy": StrategySection, "ensemble": EnsembleConfig,
}


@dataclass
class ScenarioConfig:
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    epidemic: EpidemicConfig = field(default_factory=EpidemicConfig)
    communities: CommunityConfig = field(default_factory=CommunityConfig)
    strategy: StrategySection = field(default_factory=StrategySection)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seed: int = 0
    output: str = "output"
    # strategy overrides, one per comparison cell
    cells: list = field(default_factory=list)
    version: int = CONFIG_VERSION
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, path) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        out = {"version": self.version, "seed": self.seed, "output": self.output}
        for name in SECTIONS:
            out[name] = asdict(getattr(self, name))
        if self.cells:
            out["cells"] = copy.deepcopy(self.cells)
        return out

    def dump(self, path, include_output: bool = True) -> None:
        data = self.to_dict()
        if not include_output:
            data.pop("output")
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False))

    def base_key(self) -> dict:
        """Everything that must agree between cells of one comparison."""
        d = self.to_dict()
        d.pop("strategy")
        d.pop("cells", None)
        return d

    def with_strategy(self, **overrides) -> ScenarioConfig:
        strategy = replace(StrategySection(), **overrides)
        problems = _check_section(asdict(strategy), StrategySection, "strategy")
        if problems:
            raise ConfigError(problems)
        return replace(self, strategy=strategy, cells=[])

    def expand_cells(self) -> list:
        if not self.cells:
            return [self]
        problems, out = [], []
        for k, cell in enumerate(self.cells):
            if not isinstance(cell, dict):
                problems.append(f"cells[{k}]: expected a mapping")
                continue
            problems += _check_section(cell, StrategySection, f"cells[{k}]")
            if not problems:
                out.append(replace(self, strategy=StrategySection(**cell), cells=[]))
        if problems:
            raise ConfigError(problems)
        return out


def _check_value(value, types, rule, key) -> list:
    if value is None:
        return []
    numeric = types in ((int, float), int)
    if isinstance(value, bool) and numeric or not isinstance(value, types):
        names = types.__name__ if isinstance(types, type) else "number"
        return [f"{key}: expected {names}, got {value!r}"]
    if rule is not None and not rule[0](value):
        return [f"{key}: must be {rule[1]}, got {value!r}"]
    return []


def _check_section(data, cls, prefix) -> list:
    problems = []
    for key, value in data.items():
        if key not in cls.RULES:
            problems.append(f"{prefix}.{key}: unknown key")
            continue
        types, rule = cls.RULES[key]
        problems += _check_value(value, types, rule, f"{prefix}.{key}")
    return problems


def config_from_dict(data: dict, base_dir=".", check_files: bool = True) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    problems = []
    known = set(SECTIONS) | {"seed", "output", "cells", "version"}
    problems += [f"{k}: unknown key" for k in data if k not in known]
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        problems.append(f"version: unsupported config version {version!r}")
    problems += _check_value(data.get("seed", 0), int, _NONNEG, "seed")
    problems += _check_value(data.get("output", "output"), str, None, "output")
    problems += _check_value(data.get("cells", []), list, None, "cells")

    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name) or {}
        if not isinstance(raw, dict):
            problems.append(f"{name}: expected a mapping")
            continue
        sec_problems = _check_section(raw, cls, name)
        problems += sec_problems
        if not sec_problems:
            sections[name] = cls(**raw)
    if problems:
        raise ConfigError(problems)

    cfg = ScenarioConfig(**sections, seed=data.get("seed", 0), output=data.get("output", "output"),
                         cells=list(data.get("cells") or []), version=version, base_dir=Path(base_dir))
    problems += _check_semantics(cfg, check_files)
    if cfg.cells:
        try:
            cfg.expand_cells()
        except ConfigError as exc:
            problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return cfg


def _check_semantics(cfg: ScenarioConfig, check_files: bool) -> list:
    problems = []
    mob, epi = cfg.mobility, cfg.epidemic
    required = {"trace": ["mobility.trace", "mobility.antenna_count", "epidemic.population"],
                "model": ["mobility.model", "epidemic.population"], "synthetic": []}[mob.source]
    for key in required:
        section, name = key.split(".")
        if getattr(getattr(cfg, section), name) is None:
            problems.append(f"{key}: required when mobility.source is {mob.source!r}")
    if mob.source == "trace" and mob.kind != ModelKind.HOME_ANTENNA_TIME.value:
        problems.append("mobility.kind: simulation needs home_antenna_time")
    if epi.seed_infectives is not None:
        for k, item in enumerate(epi.seed_infectives):
            ok = (isinstance(item, list) and len(item) == 2
                  and all(isinstance(v, int) and not isinstance(v, bool) for v in item)
                  and item[0] >= 1 and item[1] >= 0)
            if not ok:
                problems.append(f"epidemic.seed_infectives[{k}]: expected [antenna_id >= 1, count >= 0]")
    if check_files:
        paths = [("mobility.trace", mob.trace), ("mobility.subpref_map", mob.subpref_map),
                 ("mobility.model", mob.model), ("epidemic.population", epi.population)]
        if cfg.communities.source != "louvain":
            paths.append(("communities.source", cfg.communities.source))
        for key, path in paths:
            if path is not None and not cfg.resolve(path).is_file():
                problems.append(f"{key}: file not found: {path}")
    return problems


def load_config(path, check_files: bool = True) -> ScenarioConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc.strerror}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML: {exc}"]) from exc
    return config_from_dict(data or {}, path.parent, check_files)


def section_fields(name: str) -> list:
    return [f.name for f in fields(SECTIONS[name])]
