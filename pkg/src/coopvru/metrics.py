"""Run metrics and report emission.

Transition-detection latency, per-horizon forecast error, warning lead time
against the scenario's conflict, occlusion coverage of the fused map, and the
network counters, written as a structured JSON report plus plot-ready CSVs.
The JSON report deliberately excludes wall-clock runtime so two executions of
the same configuration produce byte-identical files; runtime appears in
metrics.csv only.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .intention import TransitionEvent
from .scenario import Scenario, ground_truth_at


@dataclass
class ForecastRecord:
    origin_time: float
    vru_id: int
    horizons: np.ndarray
    means: np.ndarray


@dataclass
class MetricsReport:
    config: dict = field(default_factory=dict)
    duration: float = 0.0
    tick_hz: float = 0.0
    n_ticks: int = 0
    transition_latency: dict = field(default_factory=dict)
    false_alarms: int = 0
    forecast_error: dict = field(default_factory=dict)
    skipped_forecast_pairs: int = 0
    warning_lead: float | None = None
    alert_time: float | None = None
    conflict_time: float | None = None
    occlusion: dict = field(default_factory=dict)
    coverage_overall: float = 0.0
    message_counters: dict = field(default_factory=dict)
    fusion_calls: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    timeseries: dict = field(default_factory=dict)
    trace: list | None = None

    def to_json_dict(self) -> dict:
        """Deterministic report content: no wall clock, no bulky timeseries
        (those live in their own CSV)."""
        out = {
            "config": self.config,
            "duration_s": self.duration,
            "tick_hz": self.tick_hz,
            "n_ticks": self.n_ticks,
            "transition_latency": self.transition_latency,
            "false_alarms": self.false_alarms,
            "forecast_error": {f"{h:.1f}": v for h, v in sorted(self.forecast_error.items())},
            "skipped_forecast_pairs": self.skipped_forecast_pairs,
            "warning_lead_s": self.warning_lead,
            "alert_time_s": self.alert_time,
            "conflict_time_s": self.conflict_time,
            "occlusion": self.occlusion,
            "coverage_overall": self.coverage_overall,
            "message_counters": self.message_counters,
            "fusion_calls": self.fusion_calls,
        }
        if self.trace is not None:
            out["trace"] = self.trace
        return out


def metric_transition_latency(events: list[TransitionEvent],
                              truth_transitions: list,
                              window: float = 2.0) -> tuple[list[dict], int]:
    """Match detected transitions to ground-truth phase boundaries.

    Greedy in time order: each truth transition takes the earliest unused
    event within +-window seconds; anticipation (negative latency) counts.
    Returns (per-transition rows, false-alarm count).
    """
    events = sorted(events, key=lambda e: e.time)
    used = [False] * len(events)
    rows = []
    for t_truth, frm, to in sorted(truth_transitions):
        match = None
        for i, e in enumerate(events):
            if used[i] or abs(e.time - t_truth) > window:
                continue
            match = i
            break
        row = {"truth_time": t_truth, "from": frm.value, "to": to.value}
        if match is None:
            row["latency"] = None
        else:
            used[match] = True
            row["latency"] = round(events[match].time - t_truth, 9)
            row["event_time"] = events[match].time
        rows.append(row)
    false_alarms = sum(1 for u in used if not u)
    return rows, false_alarms


def metric_forecast_error(records: list[ForecastRecord], scenario: Scenario,
                          horizons) -> tuple[dict, int]:
    """Euclidean error between forecast means and ground truth at each
    horizon, aggregated as mean and 95th percentile. Pairs whose target time
    falls beyond the scenario end are skipped and counted."""
    errors: dict[float, list[float]] = {round(float(h), 10): [] for h in horizons}
    skipped = 0
    truth_cache: dict[float, dict[int, tuple[float, float]]] = {}
    for rec in records:
        for h, mean in zip(rec.horizons, rec.means):
            h = round(float(h), 10)
            target = rec.origin_time + h
            if target > scenario.duration + 1e-9:
                skipped += 1
                continue
            key = round(target, 9)
            if key not in truth_cache:
                truth_cache[key] = {
                    s.vru_id: (s.x, s.y) for s in ground_truth_at(scenario, target)
                }
            tx, ty = truth_cache[key][rec.vru_id]
            errors[h].append(math.hypot(mean[0] - tx, mean[1] - ty))
    out = {}
    for h, errs in errors.items():
        if errs:
            arr = np.asarray(errs)
            out[h] = {"mean": float(arr.mean()),
                      "p95": float(np.percentile(arr, 95)),
                      "n": len(errs)}
        else:
            out[h] = {"mean": None, "p95": None, "n": 0}
    return out, skipped


def metric_warning_lead(alert_times: list[float],
                        conflict_time: float | None) -> float | None:
    """Seconds between the first qualifying alert and the conflict; None
    (missed) without an alert strictly before the conflict."""
    if conflict_time is None or not math.isfinite(conflict_time):
        return None
    qualifying = [t for t in alert_times if t < conflict_time]
    if not qualifying:
        return None
    return conflict_time - min(qualifying)


def emit_report(report: MetricsReport, out_dir: str) -> list[str]:
    """Write report.json, metrics.csv, and timeseries.csv; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    json_path = os.path.join(out_dir, "report.json")
    try:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {json_path}: {exc}") from exc
    paths.append(json_path)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows: list[tuple[str, str, str]] = []
    for h in sorted(report.forecast_error):
        stats = report.forecast_error[h]
        if stats["n"]:
            rows.append(("forecast_error_mean", f"{h:.1f}", repr(stats["mean"])))
            rows.append(("forecast_error_p95", f"{h:.1f}", repr(stats["p95"])))
    rows.append(("warning_lead_s", "",
                 "missed" if report.warning_lead is None else repr(report.warning_lead)))
    for vru_id in sorted(report.occlusion):
        occ = report.occlusion[vru_id]
        rows.append((f"occlusion_coverage_vru{vru_id}", "", repr(occ["coverage"])))
    rows.append(("coverage_overall", "", repr(report.coverage_overall)))
    lat = [r["latency"] for rows_ in report.transition_latency.values()
           for r in rows_ if r["latency"] is not None]
    rows.append(("transition_latency_mean", "",
                 repr(float(np.mean(lat))) if lat else "missed"))
    rows.append(("false_alarms", "", str(report.false_alarms)))
    for name in sorted(report.message_counters):
        rows.append((f"net_{name}", "", str(report.message_counters[name])))
    rows.append(("runtime_s", "", repr(report.runtime_s)))
    try:
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("metric", "horizon", "value"))
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write metrics to {metrics_path}: {exc}") from exc
    paths.append(metrics_path)

    ts_path = os.path.join(out_dir, "timeseries.csv")
    ts = report.timeseries
    try:
        with open(ts_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("tick", "time_s", "map_coverage", "queue_units",
                        "delivered", "err_1s"))
            for i in range(len(ts.get("time", ()))):
                err = ts["err_1s"][i]
                w.writerow((i, repr(ts["time"][i]), repr(ts["coverage"][i]),
                            ts["queue_units"][i], ts["delivered"][i],
                            "" if err is None else repr(err)))
    except OSError as exc:
        raise OSError(f"cannot write timeseries to {ts_path}: {exc}") from exc
    paths.append(ts_path)
    return paths
