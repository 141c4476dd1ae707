"""Pre-trained lookup tables for RPs and train numbers.

RP vectors are trained on itinerary-length estimation: given two RPs, a
small probe network estimates the shortest-path length in minutes and in
RP count, with the vectors trained jointly by gradient descent. Train
number vectors are trained on masked next-RP prediction over the padded
itinerary accessor. Both tables are plain key -> vector maps afterwards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .ingest import POST_ARRIVAL, PRE_DEPARTURE, ObservationEvent, event_sort_key, service_groups
from .nnkit import (
    Adam,
    Tensor,
    concatenate,
    cross_entropy,
    linear,
    mse_loss,
    prelu,
    take_rows,
    xavier_uniform,
)
from .railgraph import NetworkGraph, connected_components, shortest_path


@dataclass
class EmbeddingTable:
    """Fixed-dimension vectors keyed by RP id or train number string."""

    dimension: int
    keys: list[str]
    matrix: np.ndarray  # (len(keys), dimension)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.index = {k: i for i, k in enumerate(self.keys)}
        if self.matrix.shape != (len(self.keys), self.dimension):
            raise DataError(
                f"embedding matrix shape {self.matrix.shape} inconsistent with "
                f"{len(self.keys)} keys x d={self.dimension}"
            )

    def vector(self, key: str) -> np.ndarray:
        if key not in self.index:
            raise DataError(f"unknown embedding key {key!r}")
        return self.matrix[self.index[key]]

    def has(self, key: str) -> bool:
        return key in self.index

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "vectors": {k: [float(x) for x in self.matrix[i]] for k, i in self.index.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingTable":
        keys = sorted(d["vectors"])
        matrix = np.array([d["vectors"][k] for k in keys], dtype=np.float64)
        return cls(dimension=int(d["dimension"]), keys=keys, matrix=matrix, meta=d.get("meta", {}))

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load_json(cls, path: str | Path) -> "EmbeddingTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def rp_table_keys(g: NetworkGraph) -> list[str]:
    """All RPs plus the two stand-ins used for window padding."""
    return sorted(g.nodes) + [PRE_DEPARTURE, POST_ARRIVAL]


# ----------------------------------------------------------------------------
# Padded itineraries and the masking law
# ----------------------------------------------------------------------------


@dataclass
class PaddedItinerary:
    """Ordered RPs visited by one train, with stand-in padding outside the
    real range: R(k) is preDeparture for k < 0 and postArrival for
    k > n_max."""

    train_number: int
    rps: list[str]

    @property
    def n_max(self) -> int:
        return len(self.rps) - 1

    def R(self, k: int) -> str:
        if k < 0:
            return PRE_DEPARTURE
        if k > self.n_max:
            return POST_ARRIVAL
        return self.rps[k]


def itineraries_from_events(events: list[ObservationEvent]) -> list[PaddedItinerary]:
    """One padded itinerary per (day, train) service; consecutive repeats
    (arrival/departure at a station) collapse to one visit."""
    out = []
    for (day, train), evs in sorted(service_groups(events).items()):
        evs = sorted(evs, key=event_sort_key)
        rps: list[str] = []
        for e in evs:
            if not rps or rps[-1] != e.rp:
                rps.append(e.rp)
        out.append(PaddedItinerary(train, rps))
    return out


@dataclass(frozen=True)
class MaskingLaw:
    """Hide the current RP with probability p; the prediction target is
    the RP at a random offset in {-1, +1, +2}."""

    p: float = 0.15
    q_minus1: float = 0.07
    q_plus1: float = 0.75
    q_plus2: float = 0.18

    def __post_init__(self) -> None:
        qs = (self.q_minus1, self.q_plus1, self.q_plus2)
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"hide probability p={self.p} outside [0, 1]")
        if any(q < 0 for q in qs) or abs(sum(qs) - 1.0) > 1e-9:
            raise ConfigError(f"offset probabilities {qs} must be non-negative and sum to 1")

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        """Returns (keep flags x in {0,1}, offsets n in {-1,1,2})."""
        x = (rng.random(size) >= self.p).astype(np.int64)
        n = rng.choice([-1, 1, 2], size=size, p=[self.q_minus1, self.q_plus1, self.q_plus2])
        return x, n


# ----------------------------------------------------------------------------
# Length-estimation dataset and RP embedding training
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LengthSample:
    rp_a: str
    rp_b: str
    minutes: float
    n_rps: int  # RP count on the path (identity pair -> 1)


def make_length_dataset(
    g: NetworkGraph, n_samples: int, rng: np.random.Generator
) -> list[LengthSample]:
    """Uniformly sampled same-component RP pairs labeled with their
    shortest-path length in minutes and in RPs."""
    comps = [c for c in connected_components(g) if len(c) >= 2]
    if not comps:
        raise DataError("no component with at least two nodes")
    sizes = np.array([len(c) for c in comps], dtype=float)
    weights = sizes**2 / (sizes**2).sum()  # uniform over ordered same-component pairs
    out = []
    for _ in range(n_samples):
        comp = comps[int(rng.choice(len(comps), p=weights))]
        a = str(rng.choice(comp))
        b = str(rng.choice(comp))
        res = shortest_path(g, a, b)
        out.append(LengthSample(a, b, res.minutes, res.hops + 1))
    return out


@dataclass
class ProbeConfig:
    hidden: int = 64
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0


@dataclass
class ProbeNet:
    """Depth-2 feed-forward probe with a PReLU, shared by both side tasks."""

    w1: Tensor
    b1: Tensor
    slope: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, hidden: int, d_out: int) -> "ProbeNet":
        return cls(
            w1=Tensor(xavier_uniform(rng, (d_in, hidden)), requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            slope=Tensor(0.25, requires_grad=True),
            w2=Tensor(xavier_uniform(rng, (hidden, d_out)), requires_grad=True),
            b2=Tensor(np.zeros(d_out), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        return linear(prelu(linear(x, self.w1, self.b1), self.slope), self.w2, self.b2)

    def named(self, prefix: str = "probe") -> dict[str, Tensor]:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("w1", "b1", "slope", "w2", "b2")}


@dataclass
class RpEmbeddingResult:
    table: EmbeddingTable
    probe: ProbeNet
    final_mse: float

    def predict_pair(self, rp_a: str, rp_b: str) -> tuple[float, float]:
        """Denormalized (minutes, n_rps) estimate for a pair."""
        va = self.table.vector(rp_a)
        vb = self.table.vector(rp_b)
        x = Tensor(np.concatenate([va, vb])[None, :])
        y = self.probe.forward(x).data[0]
        stats = self.table.meta["label_stats"]
        return (
            y[0] * stats["minutes_std"] + stats["minutes_mean"],
            y[1] * stats["nrps_std"] + stats["nrps_mean"],
        )


def train_rp_embedding(
    g: NetworkGraph,
    dataset: list[LengthSample],
    d_rp: int,
    config: ProbeConfig | None = None,
) -> RpEmbeddingResult:
    """Jointly optimize RP vectors and the probe on z-scored length labels
    with MSE and Adam. Stand-in vectors are initialized randomly and stay
    trainable (the length task never touches them)."""
    if not dataset:
        raise DataError("length dataset is empty")
    config = config or ProbeConfig()
    rng = np.random.default_rng(config.seed)

    keys = rp_table_keys(g)
    index = {k: i for i, k in enumerate(keys)}
    emb = Tensor(rng.normal(0.0, 0.5, size=(len(keys), d_rp)), requires_grad=True)
    probe = ProbeNet.create(rng, 2 * d_rp, config.hidden, 2)

    ia = np.array([index[s.rp_a] for s in dataset])
    ib = np.array([index[s.rp_b] for s in dataset])
    minutes = np.array([s.minutes for s in dataset], dtype=np.float64)
    nrps = np.array([s.n_rps for s in dataset], dtype=np.float64)
    stats = {
        "minutes_mean": float(minutes.mean()),
        "minutes_std": float(max(minutes.std(), 1e-9)),
        "nrps_mean": float(nrps.mean()),
        "nrps_std": float(max(nrps.std(), 1e-9)),
    }
    labels = np.stack(
        [
            (minutes - stats["minutes_mean"]) / stats["minutes_std"],
            (nrps - stats["nrps_mean"]) / stats["nrps_std"],
        ],
        axis=1,
    )

    params = {"emb": emb, **probe.named()}
    opt = Adam(params, lr=config.lr)
    n = len(dataset)
    final = float("nan")
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x = concatenate([take_rows(emb, ia[batch]), take_rows(emb, ib[batch])], axis=1)
            loss = mse_loss(probe.forward(x), labels[batch])
            if not np.isfinite(loss.item()):
                raise NumericError("rp embedding training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(batch)
        final = epoch_loss / n

    table = EmbeddingTable(
        dimension=d_rp,
        keys=keys,
        matrix=emb.data.copy(),
        meta={"task": "itinerary_length", "label_stats": stats, "final_mse": final},
    )
    return RpEmbeddingResult(table=table, probe=probe, final_mse=final)


# ----------------------------------------------------------------------------
# Train-number embedding: masked next-RP prediction
# ----------------------------------------------------------------------------


@dataclass
class TrainEmbeddingConfig:
    hidden: int = 256
    lr: float = 5e-3
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0
    freeze_rp: bool = False


def train_trainnum_embedding(
    itineraries: list[PaddedItinerary],
    law: MaskingLaw,
    d_train: int,
    rp_table: EmbeddingTable,
    config: TrainEmbeddingConfig | None = None,
) -> EmbeddingTable:
    """Classify the RP at a random offset from the (sometimes hidden)
    current RP, given the train-number vector; cross-entropy over the full
    RP vocabulary including both stand-ins. The RP table is trained
    jointly from its length-task initialization unless frozen."""
    if not itineraries:
        raise DataError("no itineraries to train on")
    config = config or TrainEmbeddingConfig()
    rng = np.random.default_rng(config.seed)

    train_keys = sorted({str(it.train_number) for it in itineraries})
    t_index = {k: i for i, k in enumerate(train_keys)}
    vocab = rp_table.keys
    v_index = rp_table.index
    for it in itineraries:
        for rp in it.rps:
            if rp not in v_index:
                raise DataError(f"itinerary RP {rp!r} missing from the RP table")

    # one sample per (train, itinerary position)
    sample_train: list[int] = []
    sample_pos: list[int] = []
    its_by_train: dict[int, PaddedItinerary] = {}
    for it in itineraries:
        ti = t_index[str(it.train_number)]
        its_by_train[ti] = it
        for k in range(it.n_max + 1):
            sample_train.append(ti)
            sample_pos.append(k)
    sample_train = np.array(sample_train)
    sample_pos = np.array(sample_pos)
    n = len(sample_train)

    t_emb = Tensor(rng.normal(0.0, 0.5, size=(len(train_keys), d_train)), requires_grad=True)
    rp_emb = Tensor(rp_table.matrix.copy(), requires_grad=not config.freeze_rp)
    net = ProbeNet.create(rng, d_train + rp_table.dimension, config.hidden, len(vocab))

    params = {"t_emb": t_emb, **net.named("cls")}
    if not config.freeze_rp:
        params["rp_emb"] = rp_emb
    opt = Adam(params, lr=config.lr)

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x_keep, offsets = law.sample(rng, len(batch))
            cur_idx = np.array(
                [v_index[its_by_train[t].R(k)] for t, k in zip(sample_train[batch], sample_pos[batch])]
            )
            target = np.array(
                [
                    v_index[its_by_train[t].R(k + o)]
                    for t, k, o in zip(sample_train[batch], sample_pos[batch], offsets)
                ]
            )
            rp_vec = take_rows(rp_emb, cur_idx) * x_keep[:, None].astype(np.float64)
            x = concatenate([take_rows(t_emb, sample_train[batch]), rp_vec], axis=1)
            loss = cross_entropy(net.forward(x), target)
            if not np.isfinite(loss.item()):
                raise NumericError("train-number embedding training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()

    return EmbeddingTable(
        dimension=d_train,
        keys=train_keys,
        matrix=t_emb.data.copy(),
        meta={"task": "masked_next_rp", "law": {"p": law.p, "q": [law.q_minus1, law.q_plus1, law.q_plus2]}},
    )


# ----------------------------------------------------------------------------
# Interpretability diagnostics
# ----------------------------------------------------------------------------


def knn_diagnostic(table: EmbeddingTable, key: str, k: int) -> list[str]:
    """k nearest keys by Euclidean distance, ties broken by key."""
    if not table.has(key):
        raise DataError(f"unknown key {key!r}")
    center = table.vector(key)
    dists = np.linalg.norm(table.matrix - center[None, :], axis=1)
    ranked = sorted(
        (float(dists[i]), other)
        for other, i in table.index.items()
        if other != key
    )
    return [name for _, name in ranked[:k]]


@dataclass
class ProbeRegressionResult:
    r2: float
    n_train: int
    n_test: int
    degenerate: bool = False


def linear_probe_distance(
    table: EmbeddingTable,
    positions: dict[str, tuple[float, float]],
    hub_rp: str,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> ProbeRegressionResult:
    """Ordinary least squares from embedding vectors to Euclidean
    distance-from-hub; returns the coefficient of determination on a
    held-out split. lstsq falls back to the pseudo-inverse solution on a
    singular design, which is flagged as degenerate."""
    if hub_rp not in positions:
        raise DataError(f"hub {hub_rp!r} has no position")
    keys = [k for k in table.keys if k in positions]
    if len(keys) < 5:
        raise DataError("too few positioned keys for a regression")
    hub = np.array(positions[hub_rp], dtype=np.float64)
    x = np.array([table.vector(k) for k in keys])
    y = np.array([np.linalg.norm(np.array(positions[k]) - hub) for k in keys])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n_test = max(1, int(round(len(keys) * test_fraction)))
    test, train = order[:n_test], order[n_test:]

    design = np.hstack([x, np.ones((len(keys), 1))])
    coef, _, rank, _ = np.linalg.lstsq(design[train], y[train], rcond=None)
    pred = design[test] @ coef
    ss_res = float(((y[test] - pred) ** 2).sum())
    ss_tot = float(((y[test] - y[test].mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return ProbeRegressionResult(
        r2=r2, n_train=len(train), n_test=len(test), degenerate=rank < design.shape[1]
    )
