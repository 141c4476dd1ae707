"""Event log cleaning and snapshot assembly.

Raw observation events (one row per beacon passage) are cleaned of
duplicates and rank disorder, then turned into model inputs: for a cut
time t0, one token per relevant train holding its recent past
observations and its upcoming scheduled itinerary. Events after t0 only
ever contribute plan-level information, never observed delays.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path

from .errors import DataError

OBS_TYPES = ("O", "T", "P", "A", "D")
_OBS_ORDER = {t: i for i, t in enumerate(OBS_TYPES)}

PRE_DEPARTURE = "preDeparture"
POST_ARRIVAL = "postArrival"
PAD_OBS_TYPE = "pad"

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"

# Gap above which two runs of the same train number count as separate services.
SESSION_GAP_HOURS = 6.0


class TrainCategory(str, Enum):
    HIGH_SPEED = "high_speed"
    REGIONAL = "regional"
    FREIGHT = "freight"
    UNDEFINED = "undefined"


# Synthetic number-range convention: low numbers are long-distance passenger
# services, then freight, then regional slices, with a reserved band for
# undefined/on-demand movements.
CATEGORY_RANGES = (
    (1, 29_999, TrainCategory.HIGH_SPEED),
    (30_000, 99_999, TrainCategory.FREIGHT),
    (100_000, 899_999, TrainCategory.REGIONAL),
    (900_000, 999_999, TrainCategory.UNDEFINED),
)

PASSENGER_CATEGORIES = (TrainCategory.HIGH_SPEED, TrainCategory.REGIONAL)


def train_category(train_number: int) -> TrainCategory:
    for lo, hi, cat in CATEGORY_RANGES:
        if lo <= train_number <= hi:
            return cat
    return TrainCategory.UNDEFINED


@dataclass(frozen=True)
class ObservationEvent:
    """One beacon record: a train observed at an RP with a measured delay."""

    id: int
    time: datetime
    rp: str
    obs_type: str
    delay: int
    train_number: int
    rank: int | None = None

    def theoretical_time(self) -> datetime:
        """Scheduled time reconstructed by subtracting the measured delay."""
        return self.time - timedelta(minutes=self.delay)


def _valid_event(e: ObservationEvent) -> bool:
    return (
        e.obs_type in OBS_TYPES
        and bool(e.rp)
        and isinstance(e.delay, int)
        and isinstance(e.train_number, int)
    )


# ----------------------------------------------------------------------------
# CSV interface: header id,time,rp,type,delay,trainNum[,rank]
# ----------------------------------------------------------------------------

CSV_HEADER = ["id", "time", "rp", "type", "delay", "trainNum", "rank"]


def write_events_csv(events: list[ObservationEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for e in events:
            writer.writerow(
                [
                    e.id,
                    e.time.strftime(TIME_FORMAT),
                    e.rp,
                    e.obs_type,
                    e.delay,
                    e.train_number,
                    "" if e.rank is None else e.rank,
                ]
            )


def read_events_csv(path: str | Path, strict: bool = True) -> tuple[list[ObservationEvent], int]:
    """Parse an events CSV. Returns (events, n_malformed).

    With strict=True a malformed row raises DataError instead of being
    counted and skipped.
    """
    events: list[ObservationEvent] = []
    malformed = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:6]] != CSV_HEADER[:6]:
            raise DataError(f"{path}: unexpected events CSV header {header!r}")
        has_rank = len(header) >= 7
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rank: int | None = None
                if has_rank and len(row) >= 7 and row[6].strip() != "":
                    rank = int(row[6])
                events.append(
                    ObservationEvent(
                        id=int(row[0]),
                        time=datetime.strptime(row[1].strip(), TIME_FORMAT),
                        rp=row[2].strip(),
                        obs_type=row[3].strip(),
                        delay=int(row[4]),
                        train_number=int(row[5]),
                        rank=rank,
                    )
                )
            except (ValueError, IndexError) as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: malformed event row: {exc}") from exc
                malformed += 1
    return events, malformed


# ----------------------------------------------------------------------------
# Cleaning
# ----------------------------------------------------------------------------

GroupKey = tuple[date, int]  # (service day, train number)


@dataclass
class CleanReport:
    duplicates_removed: int = 0
    ranks_corrected: int = 0
    malformed_skipped: int = 0
    groups: int = 0

    def to_dict(self) -> dict:
        return {
            "duplicates_removed": self.duplicates_removed,
            "ranks_corrected": self.ranks_corrected,
            "malformed_skipped": self.malformed_skipped,
            "groups": self.groups,
        }


def service_groups(events: list[ObservationEvent]) -> dict[GroupKey, list[ObservationEvent]]:
    """Group events per (service day, train number).

    A train number's events are split into sessions wherever consecutive
    observations are more than SESSION_GAP_HOURS apart; the session day is
    the date of its first event. This keeps a delayed train that spills
    past midnight in one group.
    """
    per_train: dict[int, list[ObservationEvent]] = {}
    for e in events:
        per_train.setdefault(e.train_number, []).append(e)
    groups: dict[GroupKey, list[ObservationEvent]] = {}
    gap = timedelta(hours=SESSION_GAP_HOURS)
    for train, evs in per_train.items():
        evs = sorted(evs, key=lambda e: (e.time, e.id))
        session: list[ObservationEvent] = []
        for e in evs:
            if session and e.time - session[-1].time > gap:
                groups[(session[0].time.date(), train)] = session
                session = []
            session.append(e)
        if session:
            groups[(session[0].time.date(), train)] = session
    return groups


def event_sort_key(e: ObservationEvent) -> tuple:
    return (e.time, _OBS_ORDER.get(e.obs_type, 9), e.id)


def clean_events(raw: list[ObservationEvent]) -> tuple[list[ObservationEvent], CleanReport]:
    """Remove duplicates and repair disordered ranks.

    Per (day, train) group: rows sharing (rank, observation type, RP) are
    duplicates and only the first is kept; the multiset of rank values is
    then reassigned in observation-time order, which undoes permutations
    introduced upstream. Cleaning is total; invalid rows are counted and
    dropped.
    """
    report = CleanReport()
    valid: list[ObservationEvent] = []
    for e in raw:
        if _valid_event(e):
            valid.append(e)
        else:
            report.malformed_skipped += 1

    cleaned: list[ObservationEvent] = []
    groups = service_groups(valid)
    report.groups = len(groups)
    for _, evs in sorted(groups.items()):
        evs = sorted(evs, key=event_sort_key)
        deduped: list[ObservationEvent] = []
        seen: set[tuple] = set()
        for e in evs:
            key = (e.rank, e.obs_type, e.rp) if e.rank is not None else (e.time, e.obs_type, e.rp)
            if key in seen:
                report.duplicates_removed += 1
                continue
            seen.add(key)
            deduped.append(e)
        if deduped and all(e.rank is not None for e in deduped):
            ranks = sorted(e.rank for e in deduped)  # type: ignore[arg-type]
            fixed = []
            for e, r in zip(deduped, ranks):
                if e.rank != r:
                    report.ranks_corrected += 1
                    e = replace(e, rank=r)
                fixed.append(e)
            deduped = fixed
        cleaned.extend(deduped)

    cleaned.sort(key=lambda e: (e.time, e.train_number, e.rank if e.rank is not None else -1, e.id))
    return cleaned, report


def filter_number_ranges(
    events: list[ObservationEvent], exclude_ranges: list[tuple[int, int]]
) -> list[ObservationEvent]:
    """Drop events whose train number falls in any [lo, hi] range."""
    if not exclude_ranges:
        return list(events)
    return [
        e
        for e in events
        if not any(lo <= e.train_number <= hi for lo, hi in exclude_ranges)
    ]


# ----------------------------------------------------------------------------
# Plan view and snapshots
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    rp: str
    obs_type: str
    sched_time: datetime
    rank: int | None = None


def reconstruct_plan_view(events: list[ObservationEvent]) -> dict[GroupKey, list[PlanEntry]]:
    """Theoretical circulation plan recovered from an event log.

    Scheduled times are observation times minus the measured delay, so the
    view holds plan-level data only and is safe to consult past t0.
    """
    view: dict[GroupKey, list[PlanEntry]] = {}
    for key, evs in service_groups(events).items():
        evs = sorted(evs, key=event_sort_key)
        view[key] = [PlanEntry(e.rp, e.obs_type, e.theoretical_time(), e.rank) for e in evs]
    return view


@dataclass(frozen=True)
class SnapshotParams:
    n_prev: int = 4
    n_foll: int = 8
    h_arr_minutes: float = 30.0
    h_dep_minutes: float = 30.0


@dataclass(frozen=True)
class PastEntry:
    rp: str
    minutes_since: float
    delay: int
    obs_type: str


@dataclass(frozen=True)
class FutureEntry:
    rp: str
    minutes_until: float
    obs_type: str


@dataclass
class TrainToken:
    train_number: int
    category: TrainCategory
    translation_delay: int
    past: list[PastEntry]
    future: list[FutureEntry]
    targets: list[float | None]
    target_mask: list[int]

    def feature_dict(self) -> dict:
        """Feature view (targets excluded); serialization of this is what
        the leakage invariant compares."""
        return {
            "train_number": self.train_number,
            "category": self.category.value,
            "translation_delay": self.translation_delay,
            "past": [
                {"rp": p.rp, "minutes_since": p.minutes_since, "delay": p.delay, "obs_type": p.obs_type}
                for p in self.past
            ],
            "future": [
                {"rp": f.rp, "minutes_until": f.minutes_until, "obs_type": f.obs_type}
                for f in self.future
            ],
        }


@dataclass
class Exogenous:
    day_of_week: int
    time_of_day_minutes: float
    n_trains: int


@dataclass
class Snapshot:
    t0: datetime
    tokens: list[TrainToken]
    exogenous: Exogenous


_PAST_PAD = PastEntry(PRE_DEPARTURE, 0.0, 0, PAD_OBS_TYPE)


def _minutes(td: timedelta) -> float:
    return td.total_seconds() / 60.0


def build_snapshot(
    events: list[ObservationEvent],
    plan_view: dict[GroupKey, list[PlanEntry]],
    t0: datetime,
    params: SnapshotParams,
) -> Snapshot:
    """Assemble the per-train tokens for a cut time t0.

    A train contributes a token iff it is en route at t0, arrived within
    the arrival horizon before t0, or is scheduled to depart within the
    departure horizon after t0. Past windows hold realized observations
    (<= t0 only); future windows hold plan entries; both are padded with
    the preDeparture/postArrival stand-ins to exact lengths.
    """
    day = t0.date()
    groups = {k: v for k, v in service_groups(events).items() if k[0] == day}
    if not groups:
        warnings.warn(f"no events for {day}; snapshot at {t0} is empty", stacklevel=2)
        return Snapshot(t0, [], Exogenous(t0.weekday(), _minutes(t0 - datetime.combine(day, datetime.min.time())), 0))

    h_arr = timedelta(minutes=params.h_arr_minutes)
    h_dep = timedelta(minutes=params.h_dep_minutes)

    tokens: list[TrainToken] = []
    for key in sorted(groups):
        _, train = key
        evs = sorted(groups[key], key=event_sort_key)
        plan = plan_view.get(key)
        if plan is None:
            plan = [PlanEntry(e.rp, e.obs_type, e.theoretical_time(), e.rank) for e in evs]

        past_events = [e for e in evs if e.time <= t0]
        arrived = any(e.obs_type == "T" for e in past_events)

        if past_events:
            if arrived:
                t_arr = max(e.time for e in past_events if e.obs_type == "T")
                if t0 - t_arr > h_arr:
                    continue
            # en-route trains always included
        else:
            sched_origin = plan[0].sched_time
            if not (t0 <= sched_origin <= t0 + h_dep):
                continue

        past_window = past_events[-params.n_prev :]
        past = [_PAST_PAD] * (params.n_prev - len(past_window)) + [
            PastEntry(e.rp, _minutes(t0 - e.time), e.delay, e.obs_type) for e in past_window
        ]

        n_obs = len(past_events)
        future_plan = plan[n_obs : n_obs + params.n_foll]
        future = [
            FutureEntry(p.rp, _minutes(p.sched_time - t0), p.obs_type) for p in future_plan
        ]
        future += [FutureEntry(POST_ARRIVAL, 0.0, PAD_OBS_TYPE)] * (params.n_foll - len(future))

        # Realized events and the plan view come from the same log, so
        # positions align; the rp/type guard only masks out mismatches when
        # a caller supplies a plan from another source.
        targets: list[float | None] = []
        mask: list[int] = []
        for j in range(params.n_foll):
            pos = n_obs + j
            if j < len(future_plan) and pos < len(evs):
                e = evs[pos]
                p = future_plan[j]
                if e.rp == p.rp and e.obs_type == p.obs_type:
                    targets.append(float(e.delay))
                    mask.append(1)
                    continue
            targets.append(None)
            mask.append(0)

        translation = past_events[-1].delay if past_events else 0
        tokens.append(
            TrainToken(
                train_number=train,
                category=train_category(train),
                translation_delay=translation,
                past=past,
                future=future,
                targets=targets,
                target_mask=mask,
            )
        )

    midnight = datetime.combine(day, datetime.min.time())
    exo = Exogenous(t0.weekday(), _minutes(t0 - midnight), len(tokens))
    return Snapshot(t0, tokens, exo)


def snapshot_schedule(day: date, spacing_minutes: float) -> list[datetime]:
    """Evenly spaced cut times between 06:00 and 23:00 inclusive."""
    if spacing_minutes <= 0:
        raise DataError("snapshot spacing must be positive")
    start = datetime.combine(day, datetime.min.time()) + timedelta(hours=6)
    end = datetime.combine(day, datetime.min.time()) + timedelta(hours=23)
    out = []
    t = start
    step = timedelta(minutes=spacing_minutes)
    while t <= end:
        out.append(t)
        t = t + step
    return out


# ----------------------------------------------------------------------------
# Snapshot JSON (one file per t0)
# ----------------------------------------------------------------------------


def snapshot_to_dict(snap: Snapshot, include_targets: bool = True) -> dict:
    tokens = []
    for tok in snap.tokens:
        d = tok.feature_dict()
        if include_targets:
            d["targets"] = tok.targets
            d["target_mask"] = tok.target_mask
        tokens.append(d)
    return {
        "t0": snap.t0.strftime(TIME_FORMAT),
        "exogenous": {
            "day_of_week": snap.exogenous.day_of_week,
            "time_of_day_minutes": snap.exogenous.time_of_day_minutes,
            "n_trains": snap.exogenous.n_trains,
        },
        "tokens": tokens,
    }


def snapshot_to_json(snap: Snapshot, include_targets: bool = True) -> str:
    return json.dumps(snapshot_to_dict(snap, include_targets), sort_keys=True, separators=(",", ":"))


def snapshot_from_dict(d: dict) -> Snapshot:
    tokens = []
    for td in d["tokens"]:
        past = [PastEntry(p["rp"], p["minutes_since"], p["delay"], p["obs_type"]) for p in td["past"]]
        future = [FutureEntry(f["rp"], f["minutes_until"], f["obs_type"]) for f in td["future"]]
        n = len(future)
        tokens.append(
            TrainToken(
                train_number=td["train_number"],
                category=TrainCategory(td["category"]),
                translation_delay=td["translation_delay"],
                past=past,
                future=future,
                targets=td.get("targets", [None] * n),
                target_mask=td.get("target_mask", [0] * n),
            )
        )
    exo = d["exogenous"]
    return Snapshot(
        t0=datetime.strptime(d["t0"], TIME_FORMAT),
        tokens=tokens,
        exogenous=Exogenous(exo["day_of_week"], exo["time_of_day_minutes"], exo["n_trains"]),
    )


def load_snapshot(path: str | Path) -> Snapshot:
    with open(path) as fh:
        return snapshot_from_dict(json.load(fh))


def save_snapshot(snap: Snapshot, path: str | Path) -> None:
    Path(path).write_text(snapshot_to_json(snap))
