"""Evaluation reports: per-trajectory records plus an aggregate record."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apgtrack import rollout as ro
from apgtrack import tasks as tk

ROW_FIELDS = ("record", "index", "error", "secondary", "success", "steps", "runtime_ms")
AGG_FIELDS = ("record", "count", "error_mean", "error_std", "success_ratio", "success_defined",
              "runtime_ms")
TIMING_FIELDS = ("runtime_ms",)

METRIC_NAMES = {
    "quadrotor": ("mean distance to reference [m]", "mean distance to reference [m]"),
    "cartpole": ("mean |cart velocity| [m/s]", "mean |pole angle| [rad]"),
    "fixedwing": ("miss distance at target x [m]", "mean distance to line [m]"),
}


def _num(x):
    x = float(x)
    return x if np.isfinite(x) else None


@dataclass
class EvaluationReport:
    system: str
    error: np.ndarray
    success: np.ndarray
    secondary: np.ndarray
    steps: np.ndarray
    runtime_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def count(self) -> int:
        return int(len(self.success))

    @property
    def success_ratio(self) -> float:
        return float(np.mean(self.success)) if self.count else float("nan")

    def error_stats(self) -> tuple[float, float]:
        """Mean and std over successful runs only."""
        ok = np.asarray(self.success, dtype=bool)
        if not ok.any():
            return float("nan"), float("nan")
        e = np.asarray(self.error)[ok]
        return float(e.mean()), float(e.std())

    @property
    def mean_runtime_ms(self) -> float:
        return float(np.mean(self.runtime_ms)) if len(self.runtime_ms) else float("nan")

    def rows(self) -> list[dict]:
        rt = self.runtime_ms if len(self.runtime_ms) == self.count else np.full(self.count, np.nan)
        return [dict(zip(ROW_FIELDS, ("trajectory", i, _num(self.error[i]), _num(self.secondary[i]),
                                      bool(self.success[i]), int(self.steps[i]), _num(rt[i]))))
                for i in range(self.count)]

    def aggregate(self) -> dict:
        mean, std = self.error_stats()
        return dict(zip(AGG_FIELDS, ("aggregate", self.count, _num(mean), _num(std),
                                     _num(self.success_ratio), self.count > 0,
                                     _num(self.mean_runtime_ms))))

    def records(self) -> list[dict]:
        return self.rows() + [self.aggregate()]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=False) + "\n")
        return path

    def table(self) -> str:
        name, _ = METRIC_NAMES.get(self.system, ("error", "secondary"))
        mean, std = self.error_stats()
        lines = [f"system        {self.system}",
                 f"trajectories  {self.count}",
                 f"metric        {name}"]
        if self.count == 0:
            lines.append("success ratio undefined (no trajectories)")
        else:
            lines.append(f"error         {mean:.4f} +- {std:.4f} (successful runs)")
            lines.append(f"success ratio {self.success_ratio:.3f}")
        lines.append(f"runtime       {self.mean_runtime_ms:.6f} ms per step")
        return "\n".join(lines)


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def strip_timing(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


def from_rollout(system: str, result: ro.RolloutResult, runtime_ms=None) -> EvaluationReport:
    rt = np.asarray(runtime_ms if runtime_ms is not None else np.zeros(0), dtype=np.float64)
    return EvaluationReport(system, result.error, result.success, result.secondary, result.steps, rt)


def time_policy(task: tk.Task, params, state, ref: dict, repeats: int = 20) -> float:
    """Wall-clock milliseconds of one batch-1 policy call, warm-up excluded."""
    s = state[None] if state.ndim == 1 else state[:1]
    r = tk._take(ref, slice(0, 1))
    task.policy_raw(params, s, r)
    t0 = time.perf_counter()
    for _ in range(repeats):
        task.policy_raw(params, s, r)
    return (time.perf_counter() - t0) / repeats * 1e3


def evaluate(task: tk.Task, params, episodes, dynamics=None, timing: bool = True) -> EvaluationReport:
    result = ro.run_closed_loop(task, episodes, ro.policy_controller(task, params), dynamics)
    runtime = None
    if timing and len(episodes):
        s0 = task.initial_states(episodes)
        ref = task.window(episodes, 0, s0)
        runtime = [time_policy(task, params, s0[i:i + 1], tk._take(ref, slice(i, i + 1)))
                   for i in range(len(episodes))]
    return from_rollout(task.name, result, runtime)
