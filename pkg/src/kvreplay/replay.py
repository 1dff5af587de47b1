"""End-to-end trace replay under a selectable cache policy.

A replay drives every (layer, head) head through the prompt and the
generation steps, alongside a parallel full-cache reference replay of the
same trace. The reference supplies the two quality proxies: per-step
output drift (L2 distance between compressed and full attention outputs)
and retained attention mass (how much of the full softmax mass lands on
tokens the compressed cache still holds).

Reports are deterministic for fixed (trace, config); wall-clock timings
are kept in a separate block that the canonical form excludes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CachePolicyConfig
from .errors import ConfigError
from .layers import LayerBudget, density_report, resolve_budgets, uniform_budgets
from .policies import FullHead, make_head
from .trace import AttentionTrace, read_trace

COMPARE_COLUMNS = (
    "policy", "budget_fraction", "alpha", "beta", "merge_enabled",
    "entries_after_prompt", "peak_total_entries", "final_total_entries",
    "full_cache_entries", "memory_reduction",
    "mean_drift", "max_drift", "mean_retained_mass",
    "merge_count", "discard_count", "status", "error",
)

DENSITY_COLUMNS = ("layer", "variance", "classification")


@dataclass
class ReplayReport:
    """Everything one replay produced, ready for JSON/CSV serialization."""

    policy: str
    config: dict
    trace_meta: dict
    budgets: list[dict] | None
    densities: list[dict] | None
    entries_after_prompt: list[int]
    step_entries: list[list[int]]       # per step, per layer (summed over heads)
    step_drift: list[float]
    step_retained_mass: list[float]
    peak_total_entries: int
    final_total_entries: int
    full_cache_entries: int
    merge_count: int
    discard_count: int
    final_thresholds: dict[str, float | None]
    decision_log: list[str]
    merge_log: list[dict]
    timing: dict = field(default_factory=dict)

    @property
    def mean_drift(self) -> float:
        return float(np.mean(self.step_drift)) if self.step_drift else 0.0

    @property
    def max_drift(self) -> float:
        return float(np.max(self.step_drift)) if self.step_drift else 0.0

    @property
    def mean_retained_mass(self) -> float:
        return float(np.mean(self.step_retained_mass)) if self.step_retained_mass else 1.0

    @property
    def memory_reduction(self) -> float:
        return 1.0 - self.final_total_entries / self.full_cache_entries

    def to_dict(self, include_timing: bool = False, include_logs: bool = True) -> dict:
        out = {
            "policy": self.policy,
            "config": self.config,
            "trace": self.trace_meta,
            "budgets": self.budgets,
            "densities": self.densities,
            "entries_after_prompt": self.entries_after_prompt,
            "per_step": {
                "entries_per_layer": self.step_entries,
                "drift": self.step_drift,
                "retained_mass": self.step_retained_mass,
            },
            "aggregate": {
                "peak_total_entries": self.peak_total_entries,
                "final_total_entries": self.final_total_entries,
                "full_cache_entries": self.full_cache_entries,
                "memory_reduction": self.memory_reduction,
                "mean_drift": self.mean_drift,
                "max_drift": self.max_drift,
                "mean_retained_mass": self.mean_retained_mass,
                "merge_count": self.merge_count,
                "discard_count": self.discard_count,
            },
            "final_thresholds": self.final_thresholds,
        }
        if include_logs:
            out["decision_log"] = self.decision_log
            out["merge_log"] = self.merge_log
        if include_timing:
            out["timing"] = self.timing
        return out

    def to_json(self, include_timing: bool = False, include_logs: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing, include_logs), indent=2)


def _load(trace) -> AttentionTrace:
    if isinstance(trace, AttentionTrace):
        return trace
    return read_trace(Path(trace))


def _resolve_policy_budgets(
    trace: AttentionTrace, config: CachePolicyConfig
) -> tuple[list[LayerBudget] | None, list[dict] | None]:
    """Budgets plus the density rows (d2o only) for the report."""
    if config.policy == "full":
        return None, None
    if config.policy == "d2o":
        report = density_report(trace, config.gate)
        budgets = resolve_budgets(report, config, trace.prompt_len)
        densities = [
            {"layer": i, "variance": report.variances[i], "classification": report.labels[i]}
            for i in range(trace.num_layers)
        ]
        return budgets, densities
    return uniform_budgets(config, trace.prompt_len, trace.num_layers), None


def _fmt_evicted(origins) -> str:
    if len(origins) == 0:
        return "-"
    return ",".join(str(int(o)) for o in origins)


def run_replay(trace, config: CachePolicyConfig) -> ReplayReport:
    """Replay a trace under one policy, with a parallel full-cache reference."""
    trace = _load(trace)
    config.validate()
    p, total = trace.prompt_len, trace.total_len
    layers, heads = trace.num_layers, trace.num_heads

    budgets, densities = _resolve_policy_budgets(trace, config)
    pairs = [(l, h) for l in range(layers) for h in range(heads)]

    reference = {lh: FullHead(lh[0], lh[1], trace.head_dim) for lh in pairs}
    policy_heads = {
        lh: make_head(config, lh[0], lh[1], trace.head_dim,
                      budgets[lh[0]] if budgets is not None else None)
        for lh in pairs
    }

    decision_log: list[str] = []
    merge_log: list[dict] = []

    t0 = time.perf_counter()
    for (l, h) in pairs:
        qp = trace.q[l, h, :p]
        kp = trace.k[l, h, :p]
        vp = trace.v[l, h, :p]
        reference[(l, h)].ingest_prompt(qp, kp, vp)
        evicted = policy_heads[(l, h)].ingest_prompt(qp, kp, vp)
        decision_log.append(f"prompt layer={l} head={h} evicted={_fmt_evicted(evicted)}")
        for event in getattr(policy_heads[(l, h)], "prompt_merge_events", []):
            merge_log.append({"step": "prompt", **event})
    prompt_seconds = time.perf_counter() - t0

    entries_after_prompt = [
        int(sum(policy_heads[(l, h)].origins.shape[0] for h in range(heads)))
        for l in range(layers)
    ]
    peak_total = sum(entries_after_prompt)

    step_entries: list[list[int]] = []
    step_drift: list[float] = []
    step_retained: list[float] = []

    t0 = time.perf_counter()
    for t in range(total - p):
        i = p + t
        drift_sq = 0.0
        retained = []
        per_layer = [0] * layers
        for (l, h) in pairs:
            q = trace.q[l, h, i]
            k = trace.k[l, h, i]
            v = trace.v[l, h, i]
            ref_head = reference[(l, h)]
            ref_out = ref_head.step(q, k, v).output
            result = policy_heads[(l, h)].step(q, k, v)
            drift_sq += float(np.sum((result.output - ref_out) ** 2))
            retained.append(float(ref_head.last_weights[result.attended_origins].sum()))
            per_layer[l] += policy_heads[(l, h)].origins.shape[0]
            decision_log.append(
                f"step={t} layer={l} head={h} evicted={_fmt_evicted(result.evicted_origins)}"
            )
            for event in result.merge_events:
                merge_log.append({"step": t, **event})
        step_entries.append(per_layer)
        step_drift.append(float(np.sqrt(drift_sq)))
        step_retained.append(float(np.clip(np.mean(retained), 0.0, 1.0)))
        peak_total = max(peak_total, sum(per_layer))
    generation_seconds = time.perf_counter() - t0

    merge_count = sum(1 for e in merge_log if e["decision"] == "merge")
    discard_count = sum(1 for e in merge_log if e["decision"] == "discard")
    final_thresholds = {
        f"{l},{h}": (None if policy_heads[(l, h)].ema_threshold is None
                     else float(policy_heads[(l, h)].ema_threshold))
        for (l, h) in pairs
    }

    return ReplayReport(
        policy=config.policy,
        config={
            "policy": config.policy,
            "budget_fraction": config.budget_fraction,
            "ratio": list(config.ratio),
            "sink_tokens": config.sink_tokens,
            "gate": config.gate,
            "alpha": config.alpha,
            "beta": config.beta,
            "merge_enabled": config.merge_enabled,
            "seed": config.seed,
        },
        trace_meta={
            "model_name": trace.model_name,
            "num_layers": layers,
            "num_heads": heads,
            "head_dim": trace.head_dim,
            "prompt_len": p,
            "total_len": total,
        },
        budgets=None if budgets is None else [
            {
                "layer": b.layer, "total": b.total, "sink": b.sink, "top": b.top,
                "recent": b.recent, "effectively_full": b.effectively_full,
            }
            for b in budgets
        ],
        densities=densities,
        entries_after_prompt=entries_after_prompt,
        step_entries=step_entries,
        step_drift=step_drift,
        step_retained_mass=step_retained,
        peak_total_entries=peak_total,
        final_total_entries=sum(step_entries[-1]) if step_entries else sum(entries_after_prompt),
        full_cache_entries=layers * heads * total,
        merge_count=merge_count,
        discard_count=discard_count,
        final_thresholds=final_thresholds,
        decision_log=decision_log,
        merge_log=merge_log,
        timing={"prompt_seconds": prompt_seconds, "generation_seconds": generation_seconds},
    )


def compare_policies(trace, configs: list[CachePolicyConfig]) -> list[dict]:
    """One row of aggregate metrics per config; failures become marked rows."""
    if not configs:
        raise ConfigError("compare requires at least one policy configuration")
    trace = _load(trace)
    rows = []
    for config in configs:
        row = dict.fromkeys(COMPARE_COLUMNS, "")
        row["policy"] = config.policy
        try:
            report = run_replay(trace, config)
        except Exception as exc:  # mark the row, keep comparing
            row["status"] = "error"
            row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            continue
        row.update({
            "budget_fraction": config.budget_fraction,
            "alpha": config.alpha,
            "beta": config.beta,
            "merge_enabled": config.merge_enabled,
            "entries_after_prompt": sum(report.entries_after_prompt),
            "peak_total_entries": report.peak_total_entries,
            "final_total_entries": report.final_total_entries,
            "full_cache_entries": report.full_cache_entries,
            "memory_reduction": f"{report.memory_reduction:.6f}",
            "mean_drift": f"{report.mean_drift:.9e}",
            "max_drift": f"{report.max_drift:.9e}",
            "mean_retained_mass": f"{report.mean_retained_mass:.9f}",
            "merge_count": report.merge_count,
            "discard_count": report.discard_count,
            "status": "ok",
            "error": "",
        })
        rows.append(row)
    return rows


def density_rows(trace, gate: float) -> list[dict]:
    """Per-layer variance metric rows for the density report CSV."""
    trace = _load(trace)
    report = density_report(trace, gate)
    return [
        {"layer": i, "variance": f"{report.variances[i]:.9e}",
         "classification": report.labels[i]}
        for i in range(trace.num_layers)
    ]
