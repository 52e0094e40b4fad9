"""End-to-end scenario runs: inputs -> communities -> ensemble -> metrics -> files.

Every random stream is seeded from (master seed, run index, stage name), so a
new stage never shifts the streams of existing ones, and run r of every
strategy cell starts from the same seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .communities import CommunityAssignment, MobilityGraph, build_graph, louvain
from .config import ScenarioConfig, config_from_dict
from .epidemic import EpidemicParams, PopulationSetup, read_populations, run
from .metrics import comparison_frame, ensemble_metrics
from .mobility import ModelKind, fit, infer_homes, load_model
from .synthetic import synthetic_country
from .trace import SECONDS_PER_DAY, filter_users, parse_trace, read_subpref_map


class StageError(RuntimeError):
    def __init__(self, stage: str, cause):
        self.stage, self.cause = stage, cause
        super().__init__(f"[{stage}] {cause}")


@contextmanager
def stage(name: str, timings: dict | None = None):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def derive_seed(master: int, run_index: int, stage_name: str) -> int:
    """Stable 64-bit seed for one (run, stage) stream."""
    ss = np.random.SeedSequence([master, run_index, zlib.crc32(stage_name.encode())])
    return int(ss.generate_state(1, np.uint64)[0])


def default_seeds(populations, total: int, regions: int) -> list:
    """``total`` seeds spread as evenly as possible over the most populous regions."""
    populations = np.asarray(populations)
    order = np.lexsort((np.arange(len(populations)), -populations))[:regions]
    order = order[populations[order] > 0]
    if total and not len(order):
        raise ValueError("no populated region to seed")
    share = np.full(len(order), total // max(len(order), 1))
    share[: total - share.sum()] += 1
    return [(int(r), int(c)) for r, c in zip(order, share) if c > 0]


@dataclass
class ScenarioInputs:
    model: object
    setup: PopulationSetup
    params: EpidemicParams
    graph: MobilityGraph | None
    communities: CommunityAssignment | None
    seeds: dict = field(default_factory=dict)


def prepare_inputs(cfg: ScenarioConfig, timings: dict | None = None, need_communities: bool = True) -> ScenarioInputs:
    mob, epi = cfg.mobility, cfg.epidemic
    synthetic = None
    with stage("model", timings):
        if mob.source == "synthetic":
            synthetic = synthetic_country(**mob.synthetic)
            model, populations = synthetic.model, synthetic.populations
        elif mob.source == "model":
            model = load_model(cfg.resolve(mob.model))
        else:
            sp_map = read_subpref_map(cfg.resolve(mob.subpref_map), mob.antenna_count) if mob.subpref_map else None
            trace = parse_trace(cfg.resolve(mob.trace), mob.antenna_count, sp_map=sp_map)
            days = mob.observation_days
            if days is None:
                span = trace.timestamp.max() - trace.timestamp.min() if len(trace) else 0
                days = max(1, math.ceil(span / SECONDS_PER_DAY))
            trace = filter_users(trace, days)
            if not len(trace):
                raise ValueError("no user survives the activity filter")
            model = fit(trace, infer_homes(trace), ModelKind.HOME_ANTENNA_TIME, alpha=mob.alpha)
        if model.kind is not ModelKind.HOME_ANTENNA_TIME:
            raise ValueError(f"simulation needs a home_antenna_time model, got {model.kind.value}")

    with stage("population", timings):
        if synthetic is None or epi.population is not None:
            populations = read_populations(cfg.resolve(epi.population), model.n_antennas)
        if epi.seed_infectives is not None:
            seeds = [(a - 1, c) for a, c in epi.seed_infectives]
        elif synthetic is not None:
            seeds = synthetic.seed_infectives
        else:
            seeds = default_seeds(populations, epi.seed_total, epi.seed_regions)
        setup = PopulationSetup(populations, epi.mobile_fraction, seeds)
        params = EpidemicParams(epi.beta, epi.g, epi.steps, epi.steps_per_day, epi.start_weekday)

    graph = communities = None
    seeds_used = {}
    with stage("communities", timings):
        com = cfg.communities
        if com.source != "louvain":
            communities = CommunityAssignment.read_csv(cfg.resolve(com.source))
            if len(communities.labels) != setup.n_regions:
                raise ValueError("community file does not cover every antenna")
        elif need_communities:
            graph = build_graph(model, setup.populations, params.steps_per_day, com.threshold)
            seeds_used["louvain"] = derive_seed(cfg.seed, 0, "louvain")
            communities = louvain(graph, seeds_used["louvain"], com.resolution)
    return ScenarioInputs(model, setup, params, graph, communities, seeds_used)


# worker-side copy of the shared inputs, installed once per process
_SHARED: dict = {}


def _install(setup, model, params):
    _SHARED.update(setup=setup, model=model, params=params)


def _run_one(task):
    strategy, seed, per_region = task
    return run(_SHARED["setup"], _SHARED["model"], _SHARED["params"], strategy, seed, per_region)


def run_ensemble(inputs: ScenarioInputs, tasks: list, workers: int = 1) -> list:
    """Run ``(strategy, seed, per_region)`` tasks; results come back in task order."""
    if workers <= 1 or len(tasks) <= 1:
        _install(inputs.setup, inputs.model, inputs.params)
        try:
            return [_run_one(t) for t in tasks]
        finally:
            _SHARED.clear()
    with ProcessPoolExecutor(min(workers, len(tasks)), initializer=_install,
                             initargs=(inputs.setup, inputs.model, inputs.params)) as pool:
        return list(pool.map(_run_one, tasks))


@dataclass
class RunManifest:
    config: dict
    base_dir: str
    version: str
    seeds: dict
    outputs: dict
    timings: dict

    def to_dict(self) -> dict:
        return {"version": self.version, "base_dir": self.base_dir, "config": self.config,
                "seeds": self.seeds, "outputs": self.outputs, "timings": self.timings}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        d = json.loads(Path(path).read_text())
        return cls(d["config"], d["base_dir"], d["version"], d["seeds"], d["outputs"], d["timings"])

    def scenario(self, output=None) -> ScenarioConfig:
        data = dict(self.config)
        if output is not None:
            data["output"] = str(output)
        return config_from_dict(data, self.base_dir)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Collector:
    """Single writer for all output files; remembers each file's digest."""

    def __init__(self, root: Path, inputs: set):
        self.root, self.inputs, self.files = root, inputs, {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        if p.resolve() in self.inputs:
            raise ValueError(f"refusing to overwrite input file {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def done(self, rel: str) -> None:
        self.files[rel] = _sha256(self.root / rel)


def _input_paths(cfg: ScenarioConfig) -> set:
    paths = [cfg.mobility.trace, cfg.mobility.subpref_map, cfg.mobility.model, cfg.epidemic.population]
    if cfg.communities.source != "louvain":
        paths.append(cfg.communities.source)
    return {cfg.resolve(p).resolve() for p in paths if p is not None}


def _write_communities(out: _Collector, inputs: ScenarioInputs, export_graph: bool) -> None:
    if inputs.communities is not None:
        inputs.communities.write_csv(out.path("communities.csv"))
        out.done("communities.csv")
    if inputs.graph is not None and export_graph:
        inputs.graph.write_csv(out.path("graph.csv"))
        out.done("graph.csv")


def _run_frame(report, seeds) -> pd.DataFrame:
    return pd.DataFrame({
        "run": np.arange(len(report.runs)), "seed": [str(s) for s in seeds],
        "i_star": [r.i_star for r in report.runs], "t_star": [r.t_star for r in report.runs],
        "q_star": [r.q_star for r in report.runs], "truncated": [int(r.truncated) for r in report.runs],
        "affected_mean": [r.affected.mean for r in report.runs],
    })


def _output_root(cfg: ScenarioConfig, output) -> Path:
    root = Path(output) if output is not None else cfg.resolve(cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    return root


def run_scenario(cfg: ScenarioConfig, output=None, workers: int | None = None) -> RunManifest:
    """Run one strategy cell as an ensemble and write all outputs plus the manifest."""
    timings: dict = {}
    root = _output_root(cfg, output)
    out = _Collector(root, _input_paths(cfg))
    inputs = prepare_inputs(cfg, timings, need_communities=True)
    with stage("strategy", timings):
        strategy = cfg.strategy.build(inputs.communities.labels if cfg.strategy.needs_communities else None)

    run_seeds = [derive_seed(cfg.seed, r, "simulate") for r in range(cfg.ensemble.runs)]
    per_region = cfg.epidemic.per_region_output
    with stage("simulate", timings):
        records = run_ensemble(inputs, [(strategy, s, per_region) for s in run_seeds],
                               workers or cfg.ensemble.workers)

    with stage("metrics", timings):
        report = ensemble_metrics(records, cfg.epidemic.steps_per_day)

    with stage("output", timings):
        cfg.dump(out.path("config.yaml"), include_output=False)
        out.done("config.yaml")
        _write_communities(out, inputs, cfg.communities.export_graph)
        for r, record in enumerate(records):
            rel = f"runs/run_{r:03d}.csv"
            record.write_csv(out.path(rel))
            out.done(rel)
            if per_region:
                for which in ("I", "R", "incidence"):
                    rel = f"runs/run_{r:03d}_region_{which}.csv"
                    record.write_region_csv(out.path(rel), which)
                    out.done(rel)
        _run_frame(report, run_seeds).to_csv(out.path("run_metrics.csv"), index=False, lineterminator="\n")
        out.done("run_metrics.csv")
        report.mean_trajectory.to_csv(out.path("mean_trajectory.csv"), index=False, lineterminator="\n")
        out.done("mean_trajectory.csv")
        report.write_summary(out.path("metrics.txt"))
        out.done("metrics.txt")
        row = report.comparison_row(cfg.strategy.kind, strategy.parameter)
        comparison_frame([row]).to_csv(out.path("comparison.csv"), index=False, lineterminator="\n")
        out.done("comparison.csv")

        manifest = RunManifest(cfg.to_dict(), str(cfg.base_dir.resolve()), __version__,
                               {**{k: str(v) for k, v in inputs.seeds.items()},
                                "runs": [str(s) for s in run_seeds]},
                               dict(out.files), timings)
        manifest.write(out.path("manifest.json"))
    return manifest


def _cell_name(k: int, cfg: ScenarioConfig) -> str:
    s = cfg.strategy
    param = {"baseline": "", "decrease_mix": f"_q{s.q:g}"}.get(s.kind, f"_p{s.p:g}")
    return f"{k:02d}_{s.kind}{param}"


def compare_strategies(cfgs: list, output=None, workers: int | None = None) -> RunManifest:
    """Run every strategy cell with common random numbers and write the comparison.

    All cells must share everything but their strategy section.
    """
    if not cfgs:
        raise StageError("config", "no strategy cells")
    base = cfgs[0]
    for k, c in enumerate(cfgs[1:], start=1):
        if c.base_key() != base.base_key():
            raise StageError("config", f"cell {k} does not share the base scenario of cell 0")
    timings: dict = {}
    root = _output_root(base, output)
    out = _Collector(root, _input_paths(base))
    inputs = prepare_inputs(base, timings, need_communities=True)
    run_seeds = [derive_seed(base.seed, r, "simulate") for r in range(base.ensemble.runs)]

    rows, tasks, cells = [], [], []
    with stage("strategy", timings):
        for c in cfgs:
            strategy = c.strategy.build(inputs.communities.labels if c.strategy.needs_communities else None)
            cells.append(strategy)
            tasks += [(strategy, s, False) for s in run_seeds]
    with stage("simulate", timings):
        records = run_ensemble(inputs, tasks, workers or base.ensemble.workers)

    with stage("output", timings):
        _write_communities(out, inputs, base.communities.export_graph)
        n = len(run_seeds)
        for k, (c, strategy) in enumerate(zip(cfgs, cells)):
            report = ensemble_metrics(records[k * n:(k + 1) * n], c.epidemic.steps_per_day)
            rows.append(report.comparison_row(c.strategy.kind, strategy.parameter))
            rel = f"trajectories/{_cell_name(k, c)}.csv"
            report.mean_trajectory.to_csv(out.path(rel), index=False, lineterminator="\n")
            out.done(rel)
        comparison_frame(rows).to_csv(out.path("comparison.csv"), index=False, lineterminator="\n")
        out.done("comparison.csv")
        echo = dict(base.to_dict(), cells=[{k: v for k, v in vars(c.strategy).items()} for c in cfgs])
        manifest = RunManifest(echo, str(base.base_dir.resolve()), __version__,
                               {**{k: str(v) for k, v in inputs.seeds.items()},
                                "runs": [str(s) for s in run_seeds]},
                               dict(out.files), timings)
        manifest.write(out.path("manifest.json"))
    return manifest


def rerun_manifest(manifest_path, output, workers: int | None = None) -> tuple[RunManifest, list]:
    """Reproduce a run from its manifest; returns the new manifest and the outputs that differ."""
    old = RunManifest.read(manifest_path)
    cfg = old.scenario(output)
    new = compare_strategies(cfg.expand_cells(), output, workers) if cfg.cells \
        else run_scenario(cfg, output, workers)
    changed = sorted(k for k in set(old.outputs) | set(new.outputs)
                     if old.outputs.get(k) != new.outputs.get(k))
    return new, changed
