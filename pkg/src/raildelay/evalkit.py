"""Evaluation: L1/L2 errors, the two passenger-information reliability
metrics, and the delay-density grid over the synthetic map.

The incident metric scores predictions issued 10 minutes after a train's
first measured delay of at least 5 minutes, for its remaining station
stops. The service metric scores predictions issued 30 minutes before
every scheduled station stop, for all passenger trains. Both count the
share of predictions within 5 minutes (inclusive) of the realized delay,
and both drive the real pipeline: snapshot construction followed by the
predictor, never cached training outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import (
    PASSENGER_CATEGORIES,
    ObservationEvent,
    PlanEntry,
    SnapshotParams,
    build_snapshot,
    event_sort_key,
    reconstruct_plan_view,
    service_groups,
    snapshot_schedule,
    train_category,
)

ACCURATE_WITHIN_MINUTES = 5.0
STOP_TYPES = ("A", "T")


# ----------------------------------------------------------------------------
# MAE / MSE
# ----------------------------------------------------------------------------


def mae_mse(
    predictions: np.ndarray, realized: np.ndarray, masks: np.ndarray
) -> tuple[float | None, float | None]:
    """Means over valid positions, in minute space. Empty -> (None, None)."""
    m = np.asarray(masks) > 0
    if not m.any():
        return None, None
    err = np.asarray(predictions, dtype=np.float64)[m] - np.asarray(realized, dtype=np.float64)[m]
    return float(np.abs(err).mean()), float((err**2).mean())


# ----------------------------------------------------------------------------
# Reliability metrics
# ----------------------------------------------------------------------------


@dataclass
class ReliabilityResult:
    hits: int = 0
    total: int = 0
    beyond_window: int = 0
    no_token: int = 0
    qualifying_trains: int = 0

    @property
    def pct(self) -> float | None:
        return 100.0 * self.hits / self.total if self.total else None


def _day_events(events: list[ObservationEvent], day: date) -> dict:
    groups = {k: v for k, v in service_groups(events).items() if k[0] == day}
    if not groups:
        raise DataError(f"no events on {day}")
    return groups


def _stop_positions(plan: list[PlanEntry]) -> list[int]:
    return [i for i, p in enumerate(plan) if p.obs_type in STOP_TYPES]


def _score_stops(
    predictor,
    events: list[ObservationEvent],
    plan_view,
    t0: datetime,
    train: int,
    day_events: list[ObservationEvent],
    plan: list[PlanEntry],
    stop_positions: list[int],
    result: ReliabilityResult,
) -> None:
    """Run the pipeline at t0 and compare predictions at the given stop
    positions against realized delays."""
    snap = build_snapshot(events, plan_view, t0, predictor.snapshot_params)
    rows = {tok.train_number: i for i, tok in enumerate(snap.tokens)}
    if train not in rows:
        result.no_token += len(stop_positions)
        result.total += len(stop_positions)
        return
    preds = predictor.predict_snapshot(snap)
    row = rows[train]
    evs = sorted(day_events, key=event_sort_key)
    n_obs = sum(1 for e in evs if e.time <= t0)
    n_foll = preds.shape[1]
    for pos in stop_positions:
        j = pos - n_obs
        if j < 0:
            continue  # already visited at t0
        result.total += 1
        if j >= n_foll:
            result.beyond_window += 1
            continue
        realized = float(evs[pos].delay)
        if abs(float(preds[row, j]) - realized) <= ACCURATE_WITHIN_MINUTES:
            result.hits += 1


def incident_metric(
    predictor, events: list[ObservationEvent], day: date, issue_after_minutes: float = 10.0
) -> ReliabilityResult:
    """Predictions issued issue_after_minutes past a passenger train's
    first measured delay >= 5 minutes, scored on its remaining station
    stops. No qualifying train -> total 0 (N/A)."""
    groups = _day_events(events, day)
    plan_view = reconstruct_plan_view(events)
    result = ReliabilityResult()
    for (d, train), evs in sorted(groups.items()):
        if train_category(train) not in PASSENGER_CATEGORIES:
            continue
        evs = sorted(evs, key=event_sort_key)
        trigger = next((e for e in evs if e.delay >= 5), None)
        if trigger is None:
            continue
        result.qualifying_trains += 1
        t0 = trigger.time + timedelta(minutes=issue_after_minutes)
        plan = plan_view[(d, train)]
        n_obs_at_t0 = sum(1 for e in evs if e.time <= t0)
        remaining = [p for p in _stop_positions(plan) if p >= n_obs_at_t0]
        if not remaining:
            continue
        _score_stops(predictor, events, plan_view, t0, train, evs, plan, remaining, result)
    return result


def service_metric(
    predictor, events: list[ObservationEvent], day: date, lead_minutes: float = 30.0
) -> ReliabilityResult:
    """Predictions issued lead_minutes before each scheduled station stop,
    for every passenger train."""
    groups = _day_events(events, day)
    plan_view = reconstruct_plan_view(events)
    result = ReliabilityResult()
    for (d, train), evs in sorted(groups.items()):
        if train_category(train) not in PASSENGER_CATEGORIES:
            continue
        result.qualifying_trains += 1
        plan = plan_view[(d, train)]
        for pos in _stop_positions(plan):
            t0 = plan[pos].sched_time - timedelta(minutes=lead_minutes)
            _score_stops(predictor, events, plan_view, t0, train, evs, plan, [pos], result)
    return result


# ----------------------------------------------------------------------------
# Aggregate report
# ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    predictor: str
    mae: float | None
    mse: float | None
    incident_pct: float | None
    service_pct: float | None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "predictor": self.predictor,
            "mae": self.mae,
            "mse": self.mse,
            "incident_pct": self.incident_pct,
            "service_pct": self.service_pct,
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate_predictor(
    predictor,
    events: list[ObservationEvent],
    days: list[date],
    snapshot_spacing_minutes: float = 4.0,
    name: str | None = None,
) -> MetricReport:
    """Full evaluation over test days: minute-space MAE/MSE on the snapshot
    grid plus the two reliability metrics."""
    abs_sum = 0.0
    sq_sum = 0.0
    count = 0.0
    incident = ReliabilityResult()
    service = ReliabilityResult()
    plan_view = reconstruct_plan_view(events)
    for day in days:
        for t0 in snapshot_schedule(day, snapshot_spacing_minutes):
            snap = build_snapshot(events, plan_view, t0, predictor.snapshot_params)
            if not snap.tokens:
                continue
            preds = predictor.predict_snapshot(snap)
            for i, tok in enumerate(snap.tokens):
                for j, (t, m) in enumerate(zip(tok.targets, tok.target_mask)):
                    if m and j < preds.shape[1]:
                        err = float(preds[i, j]) - float(t)
                        abs_sum += abs(err)
                        sq_sum += err * err
                        count += 1
        inc = incident_metric(predictor, events, day)
        srv = service_metric(predictor, events, day)
        for agg, part in ((incident, inc), (service, srv)):
            agg.hits += part.hits
            agg.total += part.total
            agg.beyond_window += part.beyond_window
            agg.no_token += part.no_token
            agg.qualifying_trains += part.qualifying_trains
    return MetricReport(
        predictor=name or getattr(predictor, "name", type(predictor).__name__),
        mae=abs_sum / count if count else None,
        mse=sq_sum / count if count else None,
        incident_pct=incident.pct,
        service_pct=service.pct,
        counts={
            "positions": int(count),
            "incident_hits": incident.hits,
            "incident_total": incident.total,
            "incident_trains": incident.qualifying_trains,
            "service_hits": service.hits,
            "service_total": service.total,
            "beyond_window": incident.beyond_window + service.beyond_window,
            "no_token": incident.no_token + service.no_token,
        },
    )


# ----------------------------------------------------------------------------
# Delay-density grid
# ----------------------------------------------------------------------------


@dataclass
class DensityGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs))
    t_center: datetime
    bandwidth: float

    def argmax_cell(self) -> tuple[float, float]:
        iy, ix = np.unravel_index(int(self.values.argmax()), self.values.shape)
        return float(self.xs[ix]), float(self.ys[iy])

    def to_csv(self, path: str | Path) -> None:
        lines = ["x,y,value"]
        for iy, y in enumerate(self.ys):
            for ix, x in enumerate(self.xs):
                lines.append(f"{x:.6g},{y:.6g},{self.values[iy, ix]:.8g}")
        Path(path).write_text("\n".join(lines) + "\n")


def density_grid(
    events: list[ObservationEvent],
    t_center: datetime,
    positions: dict[str, tuple[float, float]],
    bandwidth: float | None = None,
    grid_size: int = 100,
    window_minutes: float = 30.0,
    eps: float = 1e-6,
) -> DensityGrid:
    """Gaussian delay density over the map, normalized by RP density so
    dense areas do not dominate. Delays are clipped below at zero; the
    window covers t_center +/- window/2."""
    if not positions:
        raise DataError("no RP positions")
    pos_arr = np.array(sorted(positions.values()))
    min_xy = pos_arr.min(axis=0)
    max_xy = pos_arr.max(axis=0)
    span = np.maximum(max_xy - min_xy, 1e-9)
    lo = min_xy - 0.05 * span
    hi = max_xy + 0.05 * span
    if bandwidth is None:
        bandwidth = 0.05 * float(np.linalg.norm(hi - lo))
    xs = np.linspace(lo[0], hi[0], grid_size)
    ys = np.linspace(lo[1], hi[1], grid_size)
    gx, gy = np.meshgrid(xs, ys)
    grid_pts = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (G, 2)

    def kernel_sum(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
        if points.size == 0:
            return np.zeros(grid_pts.shape[0])
        d2 = ((grid_pts[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        return (np.exp(-d2 / (2.0 * bandwidth**2)) * weights[None, :]).sum(axis=1)

    half = timedelta(minutes=window_minutes / 2.0)
    in_window = [
        e
        for e in events
        if abs((e.time - t_center).total_seconds()) <= half.total_seconds() and e.rp in positions
    ]
    ev_points = np.array([positions[e.rp] for e in in_window]) if in_window else np.zeros((0, 2))
    ev_weights = np.array([max(float(e.delay), 0.0) for e in in_window])

    numerator = kernel_sum(ev_points, ev_weights)
    denominator = kernel_sum(pos_arr, np.ones(len(pos_arr)))
    values = numerator / np.maximum(denominator, eps)
    return DensityGrid(
        xs=xs,
        ys=ys,
        values=values.reshape(grid_size, grid_size),
        t_center=t_center,
        bandwidth=float(bandwidth),
    )
