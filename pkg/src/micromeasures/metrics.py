"""Peak size, peak time and final attack rate, per run and over ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .epidemic import RunRecord
from .strategies import AffectedMovements, affected_movements

COMPARISON_HEADER = (
    "strategy", "param", "runs",
    "i_star_mean", "i_star_std", "t_star_mean", "t_star_std", "t_star_days_mean",
    "q_star_mean", "q_star_std", "truncated_runs", "affected_mean", "affected_max",
)


@dataclass
class RunMetrics:
    i_star: float
    t_star: int
    q_star: float
    truncated: bool
    affected: AffectedMovements
    steps_per_day: int = 3

    @property
    def t_star_days(self) -> float:
        return self.t_star / self.steps_per_day


@dataclass
class MetricsReport:
    """Per-run metrics plus ensemble mean, sample std and mean trajectory."""

    runs: list
    label: str = "baseline"
    mean_trajectory: pd.DataFrame | None = field(default=None, repr=False)

    def _values(self, name):
        return np.array([getattr(r, name) for r in self.runs], dtype=float)

    def mean(self, name: str) -> float:
        return float(self._values(name).mean())

    def std(self, name: str) -> float:
        v = self._values(name)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def i_star(self) -> float:
        return self.mean("i_star")

    @property
    def t_star(self) -> float:
        return self.mean("t_star")

    @property
    def q_star(self) -> float:
        return self.mean("q_star")

    @property
    def truncated_runs(self) -> int:
        return sum(r.truncated for r in self.runs)

    def summary(self) -> dict:
        out = {"label": self.label, "runs": len(self.runs)}
        for name in ("i_star", "t_star", "t_star_days", "q_star"):
            out[f"{name}_mean"] = self.mean(name)
            out[f"{name}_std"] = self.std(name)
        out["truncated_runs"] = self.truncated_runs
        out["affected_mean"] = float(np.mean([r.affected.mean for r in self.runs]))
        out["affected_max"] = float(np.max([r.affected.max for r in self.runs]))
        return out

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            for key, value in self.summary().items():
                fh.write(f"{key}={value!r}\n" if isinstance(value, float) else f"{key}={value}\n")

    def comparison_row(self, strategy: str, param) -> dict:
        s = self.summary()
        return {
            "strategy": strategy, "param": "" if param is None else param, "runs": s["runs"],
            "i_star_mean": s["i_star_mean"], "i_star_std": s["i_star_std"],
            "t_star_mean": s["t_star_mean"], "t_star_std": s["t_star_std"],
            "t_star_days_mean": s["t_star_days_mean"],
            "q_star_mean": s["q_star_mean"], "q_star_std": s["q_star_std"],
            "truncated_runs": s["truncated_runs"],
            "affected_mean": s["affected_mean"], "affected_max": s["affected_max"],
        }


def compute_metrics(record: RunRecord, steps_per_day: int = 3, population: int | None = None) -> RunMetrics:
    """I* = max I/N, T* = first step reaching it, Q* = R(horizon)/N."""
    infected = np.asarray(record.I)
    if len(infected) == 0:
        raise ValueError("empty run record")
    n = population or record.population or int(record.S[0] + record.I[0] + record.R[0])
    if n <= 0:
        raise ValueError("population must be positive")
    t_star = int(np.argmax(infected))
    return RunMetrics(
        i_star=float(infected[t_star] / n), t_star=t_star, q_star=float(record.R[-1] / n),
        truncated=bool(infected[-1] > 0),
        affected=affected_movements(record.proposed[1:], record.canceled[1:], record.redirected[1:]),
        steps_per_day=steps_per_day,
    )


def mean_trajectory(records) -> pd.DataFrame:
    frames = [r.to_frame().set_index("step") for r in records]
    return sum(frames[1:], frames[0]).div(len(frames)).reset_index()


def ensemble_metrics(records, steps_per_day: int = 3) -> MetricsReport:
    records = list(records)
    if not records:
        raise ValueError("no records")
    if len({r.steps for r in records}) > 1:
        raise ValueError("records have mixed horizons")
    runs = [compute_metrics(r, steps_per_day) for r in records]
    return MetricsReport(runs, records[0].label, mean_trajectory(records))


def comparison_frame(rows) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=list(COMPARISON_HEADER))
