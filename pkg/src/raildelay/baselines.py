"""Comparison predictors: translation, per-trajectory AR(2), and a
Bayesian network over (train, RP) nodes.

Translation repeats the last measured delay for every remaining RP. The
AR(2) model fits delay(n) = alpha*delay(n-1) + beta*delay(n-2) + gamma per
trajectory by least squares. The Bayesian network keeps an edge y -> x
only when x chronologically follows y and the nodes share a train, share
an RP, or typically occur within a time window; prediction evaluates
L(x) = b(x) + sum_y w(y,x) L(y) in topological order, using measured
delays where available.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import (
    ObservationEvent,
    PAD_OBS_TYPE,
    Snapshot,
    SnapshotParams,
    TrainToken,
    event_sort_key,
    service_groups,
)

# ----------------------------------------------------------------------------
# Translation
# ----------------------------------------------------------------------------


def translation_predict(token: TrainToken) -> np.ndarray:
    """The last measured delay, repeated for every future position."""
    return np.full(len(token.future), float(token.translation_delay))


class TranslationPredictor:
    """Snapshot-level predictor interface around translation."""

    name = "translation"

    def __init__(self, snapshot_params: SnapshotParams):
        self.snapshot_params = snapshot_params

    def predict_snapshot(self, snap: Snapshot) -> np.ndarray:
        if not snap.tokens:
            return np.zeros((0, self.snapshot_params.n_foll))
        return np.stack([translation_predict(t) for t in snap.tokens])


# ----------------------------------------------------------------------------
# AR(2)
# ----------------------------------------------------------------------------


@dataclass
class Ar2Params:
    alpha: float
    beta: float
    gamma: float
    residual_var: float = 0.0
    fallback: bool = False  # series too short; translation used instead


def fit_ar2(series: list[float] | np.ndarray) -> Ar2Params:
    """Least-squares fit of delay(n) on (delay(n-1), delay(n-2), 1).

    Series shorter than 3 cannot form a single equation and fall back to
    translation (alpha=1, beta=0, gamma=0), flagged.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.size < 3:
        return Ar2Params(1.0, 0.0, 0.0, fallback=True)
    y = s[2:]
    design = np.stack([s[1:-1], s[:-2], np.ones(s.size - 2)], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return Ar2Params(
        alpha=float(coef[0]),
        beta=float(coef[1]),
        gamma=float(coef[2]),
        residual_var=float(resid.var()) if resid.size else 0.0,
    )


def ar2_predict(params: Ar2Params, eps_prev: float, eps_prev2: float, steps: int) -> np.ndarray:
    """Multi-step forecast by recursion from the two latest delays."""
    out = np.empty(steps)
    a, b = float(eps_prev), float(eps_prev2)
    for i in range(steps):
        nxt = params.alpha * a + params.beta * b + params.gamma
        out[i] = nxt
        a, b = nxt, a
    return out


def ar2_stationary(params: Ar2Params) -> bool:
    """Stationarity triangle for AR(2); outside it the recursion diverges."""
    return (
        abs(params.beta) < 1.0
        and params.alpha + params.beta < 1.0
        and params.beta - params.alpha < 1.0
    )


class Ar2Predictor:
    """Fits each token's observed past window on the fly; tokens with a
    too-short or non-stationary fit fall back to translation."""

    name = "ar2"

    def __init__(self, snapshot_params: SnapshotParams):
        self.snapshot_params = snapshot_params

    def predict_snapshot(self, snap: Snapshot) -> np.ndarray:
        n_foll = self.snapshot_params.n_foll
        if not snap.tokens:
            return np.zeros((0, n_foll))
        rows = []
        for tok in snap.tokens:
            series = [float(p.delay) for p in tok.past if p.obs_type != PAD_OBS_TYPE]
            params = fit_ar2(series)
            if params.fallback or len(series) < 2 or not ar2_stationary(params):
                rows.append(translation_predict(tok))
            else:
                rows.append(ar2_predict(params, series[-1], series[-2], n_foll))
        return np.stack(rows)


# ----------------------------------------------------------------------------
# Bayesian network
# ----------------------------------------------------------------------------

NodeKey = tuple[int, str]  # (train number, rp)


@dataclass
class BayesNode:
    key: NodeKey
    chron_minutes: float  # typical time of day, orders the DAG
    historical_mean: float
    n_samples: int
    parents: list[NodeKey] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    bias: float = 0.0
    underdetermined: bool = False


@dataclass
class BayesNet:
    nodes: dict[NodeKey, BayesNode]
    window_minutes: float
    global_mean: float = 0.0
    fitted: bool = False

    def topological_order(self) -> list[NodeKey]:
        return sorted(self.nodes, key=lambda k: (self.nodes[k].chron_minutes, k))

    def to_dict(self) -> dict:
        return {
            "window_minutes": self.window_minutes,
            "global_mean": self.global_mean,
            "fitted": self.fitted,
            "nodes": [
                {
                    "train": k[0],
                    "rp": k[1],
                    "chron_minutes": n.chron_minutes,
                    "historical_mean": n.historical_mean,
                    "n_samples": n.n_samples,
                    "parents": [[p[0], p[1]] for p in n.parents],
                    "weights": n.weights,
                    "bias": n.bias,
                    "underdetermined": n.underdetermined,
                }
                for k, n in sorted(self.nodes.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BayesNet":
        nodes = {}
        for nd in d["nodes"]:
            key = (int(nd["train"]), nd["rp"])
            nodes[key] = BayesNode(
                key=key,
                chron_minutes=float(nd["chron_minutes"]),
                historical_mean=float(nd["historical_mean"]),
                n_samples=int(nd["n_samples"]),
                parents=[(int(t), r) for t, r in nd["parents"]],
                weights=[float(w) for w in nd["weights"]],
                bias=float(nd["bias"]),
                underdetermined=bool(nd["underdetermined"]),
            )
        return cls(
            nodes=nodes,
            window_minutes=float(d["window_minutes"]),
            global_mean=float(d.get("global_mean", 0.0)),
            fitted=bool(d.get("fitted", False)),
        )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "BayesNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _observations(events: list[ObservationEvent]) -> dict[NodeKey, dict[str, float]]:
    """Per (train, rp): day -> delay of the first observation that day,
    plus the per-day time of day in minutes."""
    first: dict[tuple[str, int, str], ObservationEvent] = {}
    for (day, train), evs in service_groups(events).items():
        for e in sorted(evs, key=event_sort_key):
            k = (day.isoformat(), train, e.rp)
            if k not in first:
                first[k] = e
    obs: dict[NodeKey, dict[str, tuple[float, float]]] = {}
    for (day, train, rp), e in first.items():
        tod = e.time.hour * 60 + e.time.minute + e.time.second / 60.0
        obs.setdefault((train, rp), {})[day] = (float(e.delay), tod)
    return obs


def build_bayes_graph(events: list[ObservationEvent], window_minutes: float = 30.0) -> BayesNet:
    """Node per observed (train, RP) pair; an edge y -> x is kept iff x
    typically occurs strictly after y and they share a train, share an RP,
    or their typical times fall within the window."""
    obs = _observations(events)
    if not obs:
        raise DataError("no events to build a network from")
    nodes: dict[NodeKey, BayesNode] = {}
    for key, per_day in obs.items():
        delays = [d for d, _ in per_day.values()]
        tods = [t for _, t in per_day.values()]
        nodes[key] = BayesNode(
            key=key,
            chron_minutes=float(np.mean(tods)),
            historical_mean=float(np.mean(delays)),
            n_samples=len(delays),
        )
    ordered = sorted(nodes.values(), key=lambda n: (n.chron_minutes, n.key))
    for i, target in enumerate(ordered):
        t_x, rp_x = target.key
        for source in ordered[:i]:
            if source.chron_minutes >= target.chron_minutes:
                continue  # strict chronology only
            t_y, rp_y = source.key
            if (
                t_y == t_x
                or rp_y == rp_x
                or abs(source.chron_minutes - target.chron_minutes) <= window_minutes
            ):
                target.parents.append(source.key)
    all_delays = [d for per_day in obs.values() for d, _ in per_day.values()]
    return BayesNet(nodes=nodes, window_minutes=window_minutes, global_mean=float(np.mean(all_delays)))


def fit_bayes(net: BayesNet, history: list[ObservationEvent], ridge: float = 1e-3) -> BayesNet:
    """Per-node ridge least squares of the node's delay on its parents'
    same-day delays (missing parent observations count as on time).
    Parentless nodes keep bias = historical mean. Nodes with fewer samples
    than coefficients are flagged as underdetermined."""
    obs = _observations(history)
    for key in net.topological_order():
        node = net.nodes[key]
        if not node.parents:
            node.bias = node.historical_mean
            node.weights = []
            continue
        days = sorted(obs.get(key, {}))
        rows = []
        ys = []
        for day in days:
            ys.append(obs[key][day][0])
            rows.append([obs.get(p, {}).get(day, (0.0, 0.0))[0] for p in node.parents])
        node.underdetermined = len(ys) < len(node.parents) + 1
        if not ys:
            node.bias = node.historical_mean
            node.weights = [0.0] * len(node.parents)
            continue
        a = np.hstack([np.asarray(rows, dtype=np.float64), np.ones((len(ys), 1))])
        y = np.asarray(ys, dtype=np.float64)
        # ridge on the weights, intercept unpenalized
        reg = ridge * np.eye(a.shape[1])
        reg[-1, -1] = 0.0
        coef = np.linalg.solve(a.T @ a + reg, a.T @ y)
        node.weights = [float(w) for w in coef[:-1]]
        node.bias = float(coef[-1])
    net.fitted = True
    return net


def bayes_predict(net: BayesNet, observed: dict[NodeKey, float]) -> dict[NodeKey, float]:
    """Evaluate the recursion in topological order: measured delays where
    available, b(x) + sum of weighted parent values otherwise."""
    values: dict[NodeKey, float] = {}
    for key in net.topological_order():
        if key in observed:
            values[key] = float(observed[key])
            continue
        node = net.nodes[key]
        total = node.bias
        for parent, w in zip(node.parents, node.weights):
            total += w * values.get(parent, 0.0)
        values[key] = total
    return values


class BayesPredictor:
    """Snapshot predictor over a fitted network: token pasts provide the
    measured delays, future entries are looked up from the recursion.
    Nodes unseen in training fall back to the global mean delay."""

    name = "bayes"

    def __init__(self, net: BayesNet, snapshot_params: SnapshotParams):
        if not net.fitted:
            raise DataError("Bayesian network must be fitted before prediction")
        self.net = net
        self.snapshot_params = snapshot_params
        self.unseen_nodes = 0

    def predict_snapshot(self, snap: Snapshot) -> np.ndarray:
        n_foll = self.snapshot_params.n_foll
        if not snap.tokens:
            return np.zeros((0, n_foll))
        observed: dict[NodeKey, float] = {}
        for tok in snap.tokens:
            for p in tok.past:
                if p.obs_type != PAD_OBS_TYPE:
                    observed[(tok.train_number, p.rp)] = float(p.delay)
        values = bayes_predict(self.net, observed)
        rows = []
        for tok in snap.tokens:
            row = np.full(n_foll, float(tok.translation_delay))
            for j, fut in enumerate(tok.future):
                if fut.obs_type == PAD_OBS_TYPE:
                    continue
                key = (tok.train_number, fut.rp)
                if key in values:
                    row[j] = values[key]
                else:
                    self.unseen_nodes += 1
                    row[j] = self.net.global_mean
            rows.append(row)
        return np.stack(rows)
