"""Delay forecasting model: linear -> transformer encoder stack -> linear.

Every train token of a snapshot is one encoder input; outputs are, per
token, one value per upcoming itinerary position. The model predicts the
difference to the last measured delay (translation residual) in a
compressed value space: with a zero-initialized output layer it starts
exactly at translation performance. At evaluation time the single
postprocessing step clips predictions so no unreached RP is placed in the
past.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .embeddings import EmbeddingTable
from .ingest import (
    OBS_TYPES,
    POST_ARRIVAL,
    Snapshot,
    TrainCategory,
    TrainToken,
)
from .nnkit import (
    Adam,
    EncoderLayerParams,
    Tensor,
    absolute,
    encoder_layer,
    l1_masked_loss,
    linear,
    load_arrays,
    mul,
    save_arrays,
    tensor_sum,
    xavier_uniform,
)

TRANSFORM_KINDS = ("identity", "sqrt", "log")

_CATEGORIES = [c.value for c in TrainCategory]
_CAT_INDEX = {c: i for i, c in enumerate(_CATEGORIES)}
_OBS_INDEX = {t: i for i, t in enumerate(OBS_TYPES)}


# ----------------------------------------------------------------------------
# Value transforms: odd, total, exactly invertible
# ----------------------------------------------------------------------------


def value_transform(x, kind: str):
    x = np.asarray(x, dtype=np.float64)
    if kind == "identity":
        return x.copy()
    if kind == "sqrt":
        return np.sign(x) * np.sqrt(np.abs(x))
    if kind == "log":
        return np.sign(x) * np.log1p(np.abs(x))
    raise ConfigError(f"unknown transform kind {kind!r}")


def value_untransform(y, kind: str):
    y = np.asarray(y, dtype=np.float64)
    if kind == "identity":
        return y.copy()
    if kind == "sqrt":
        return np.abs(y) * y
    if kind == "log":
        return np.sign(y) * np.expm1(np.abs(y))
    raise ConfigError(f"unknown transform kind {kind!r}")


# ----------------------------------------------------------------------------
# Configuration and normalization constants
# ----------------------------------------------------------------------------


@dataclass
class ForecastConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 2
    depth: int = 2
    p_drop: float = 0.1
    n_prev: int = 4
    n_foll: int = 8
    transform: str = "sqrt"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 40

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("n_heads must divide d_model")
        if self.transform not in TRANSFORM_KINDS:
            raise ConfigError(f"transform must be one of {TRANSFORM_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ForecastConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class NormStats:
    """Empirical normalization constants.

    mu/sigma describe the transformed training residuals (actual delay
    minus translation). feature_mu/feature_sigma hold per-feature input
    stats; non-numeric positions stay at (0, 1).
    """

    mu: float
    sigma: float
    feature_mu: np.ndarray
    feature_sigma: np.ndarray

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")

    @classmethod
    def initial(cls, n_features: int) -> "NormStats":
        return cls(0.0, 1.0, np.zeros(n_features), np.ones(n_features))


# ----------------------------------------------------------------------------
# Feature assembly
# ----------------------------------------------------------------------------


@dataclass
class FeatureSpec:
    """Layout of a token's feature vector and which positions are numeric."""

    n_prev: int
    n_foll: int
    d_rp: int
    d_train: int
    width: int = field(init=False)
    duration_idx: list[int] = field(init=False)  # transformed then normalized
    plain_idx: list[int] = field(init=False)  # normalized only

    def __post_init__(self) -> None:
        self.duration_idx = []
        self.plain_idx = []
        w = len(_CATEGORIES) + self.d_train
        for _ in range(self.n_prev):
            w += self.d_rp
            self.duration_idx.append(w)  # minutes since visit
            self.duration_idx.append(w + 1)  # measured delay
            w += 2 + len(OBS_TYPES)
        for _ in range(self.n_foll):
            w += self.d_rp
            self.duration_idx.append(w)  # minutes until scheduled
            w += 1 + len(OBS_TYPES)
        w += 7  # day-of-week one-hot
        self.plain_idx.append(w)  # time of day
        self.plain_idx.append(w + 1)  # trains on network
        w += 2
        self.width = w


def _emb_or_zeros(table: EmbeddingTable, key: str) -> np.ndarray:
    if table.has(key):
        return table.vector(key)
    return np.zeros(table.dimension)


def token_features(
    token: TrainToken,
    exogenous,
    rp_table: EmbeddingTable,
    train_table: EmbeddingTable,
    spec: FeatureSpec,
) -> np.ndarray:
    """Raw (untransformed, unnormalized) feature vector for one token."""
    if len(token.past) != spec.n_prev or len(token.future) != spec.n_foll:
        raise DataError(
            f"token windows ({len(token.past)}, {len(token.future)}) do not match "
            f"the configured ({spec.n_prev}, {spec.n_foll})"
        )
    parts: list[np.ndarray] = []
    cat = np.zeros(len(_CATEGORIES))
    cat[_CAT_INDEX[token.category.value]] = 1.0
    parts.append(cat)
    parts.append(_emb_or_zeros(train_table, str(token.train_number)))
    for p in token.past:
        parts.append(_emb_or_zeros(rp_table, p.rp))
        parts.append(np.array([p.minutes_since, float(p.delay)]))
        onehot = np.zeros(len(OBS_TYPES))
        if p.obs_type in _OBS_INDEX:
            onehot[_OBS_INDEX[p.obs_type]] = 1.0
        parts.append(onehot)
    for f in token.future:
        parts.append(_emb_or_zeros(rp_table, f.rp))
        parts.append(np.array([f.minutes_until]))
        onehot = np.zeros(len(OBS_TYPES))
        if f.obs_type in _OBS_INDEX:
            onehot[_OBS_INDEX[f.obs_type]] = 1.0
        parts.append(onehot)
    dow = np.zeros(7)
    dow[exogenous.day_of_week] = 1.0
    parts.append(dow)
    parts.append(np.array([exogenous.time_of_day_minutes, float(exogenous.n_trains)]))
    vec = np.concatenate(parts)
    if vec.size != spec.width:
        raise DataError(f"feature width {vec.size} != spec width {spec.width}")
    return vec


def snapshot_features(
    snap: Snapshot, rp_table: EmbeddingTable, train_table: EmbeddingTable, spec: FeatureSpec
) -> np.ndarray:
    if not snap.tokens:
        return np.zeros((0, spec.width))
    return np.stack(
        [token_features(t, snap.exogenous, rp_table, train_table, spec) for t in snap.tokens]
    )


def apply_input_norm(raw: np.ndarray, stats: NormStats, spec: FeatureSpec, kind: str) -> np.ndarray:
    """Transform duration/delay features, then z-normalize numeric ones."""
    x = raw.copy()
    if x.size == 0:
        return x
    di = spec.duration_idx
    x[:, di] = value_transform(x[:, di], kind)
    return (x - stats.feature_mu[None, :]) / stats.feature_sigma[None, :]


def fit_feature_stats(
    raw_matrices: list[np.ndarray], spec: FeatureSpec, kind: str
) -> tuple[np.ndarray, np.ndarray]:
    mu = np.zeros(spec.width)
    sigma = np.ones(spec.width)
    nonempty = [m for m in raw_matrices if m.size]
    if not nonempty:
        return mu, sigma
    stacked = np.concatenate(nonempty, axis=0)
    di = spec.duration_idx
    transformed = value_transform(stacked[:, di], kind)
    mu[di] = transformed.mean(axis=0)
    s = transformed.std(axis=0)
    sigma[di] = np.where(s > 1e-9, s, 1.0)
    pi = spec.plain_idx
    mu[pi] = stacked[:, pi].mean(axis=0)
    s = stacked[:, pi].std(axis=0)
    sigma[pi] = np.where(s > 1e-9, s, 1.0)
    return mu, sigma


# ----------------------------------------------------------------------------
# Targets, loss, predictions
# ----------------------------------------------------------------------------


def encode_targets(
    actual: np.ndarray, translation: np.ndarray, stats: NormStats, kind: str
) -> np.ndarray:
    """Model-space value whose decoded prediction reproduces `actual`."""
    residual = np.asarray(actual, dtype=np.float64) - translation
    return value_transform((residual - stats.mu) / stats.sigma, kind)


def predict(
    raw: np.ndarray,
    stats: NormStats,
    translation: np.ndarray,
    scheduled: np.ndarray,
    mode: str,
    kind: str = "sqrt",
) -> np.ndarray:
    """Decode raw outputs into delay minutes.

    Training mode returns sigma * f^-1(y) + mu + translation; evaluation
    mode clips so prediction + scheduled remaining time never goes
    negative (no unreached RP predicted in the past).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    base = stats.sigma * value_untransform(raw, kind) + stats.mu + np.asarray(translation)
    if mode == "train":
        return base
    scheduled = np.asarray(scheduled, dtype=np.float64)
    return np.maximum(base + scheduled, 0.0) - scheduled


def training_loss(raw: Tensor, targets: np.ndarray, masks: np.ndarray) -> Tensor:
    """Mean absolute error over valid positions in model space."""
    return l1_masked_loss(raw, targets, masks)


# ----------------------------------------------------------------------------
# The model
# ----------------------------------------------------------------------------


@dataclass
class AttentionSnapshot:
    """First-encoder attention for one snapshot: per head, a row-stochastic
    matrix over the snapshot's tokens."""

    t0: str
    train_numbers: list[int]
    head_weights: list[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "t0": self.t0,
            "train_numbers": self.train_numbers,
            "head_weights": [w.tolist() for w in self.head_weights],
        }


@dataclass
class PredictionBatch:
    train_numbers: list[int]
    raw: np.ndarray  # (n_tokens, n_foll)
    predicted_minutes: np.ndarray  # decoded, eval or train mode
    plan_mask: np.ndarray  # 1 where the future entry is a real plan entry
    target_mask: np.ndarray  # 1 where a realized delay exists
    targets: np.ndarray  # realized delays (0 where missing)
    translation: np.ndarray  # per token
    scheduled: np.ndarray  # minutes until each future entry


class TransformerForecaster:
    """Holds parameters, embeddings (frozen), and normalization stats."""

    def __init__(
        self,
        config: ForecastConfig,
        rp_table: EmbeddingTable,
        train_table: EmbeddingTable,
        seed: int = 0,
    ):
        config.validate()
        self.config = config
        self.rp_table = rp_table
        self.train_table = train_table
        self.spec = FeatureSpec(config.n_prev, config.n_foll, rp_table.dimension, train_table.dimension)
        self.stats = NormStats.initial(self.spec.width)
        self.seed = seed
        rng = np.random.default_rng([seed, 11])
        self.w_in = Tensor(xavier_uniform(rng, (self.spec.width, config.d_model)), requires_grad=True)
        self.b_in = Tensor(np.zeros(config.d_model), requires_grad=True)
        self.layers = [
            EncoderLayerParams.create(rng, config.d_model, config.d_ff, config.n_heads)
            for _ in range(config.depth)
        ]
        # zero output layer: the fresh model reproduces translation exactly
        self.w_out = Tensor(np.zeros((config.d_model, config.n_foll)), requires_grad=True)
        self.b_out = Tensor(np.zeros(config.n_foll), requires_grad=True)
        self.curve: list[dict] = []

    def parameters(self) -> dict[str, Tensor]:
        params = {"w_in": self.w_in, "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out}
        for i, layer in enumerate(self.layers):
            params.update(layer.named(f"enc{i}"))
        return params

    def forward_features(
        self,
        x_norm: np.ndarray,
        train_flag: bool = False,
        rng: np.random.Generator | None = None,
        capture_attention: bool = False,
    ) -> tuple[Tensor, list[np.ndarray] | None]:
        """Normalized features (n, width) -> raw outputs (n, n_foll); the
        first encoder's attention is captured on request."""
        if x_norm.ndim != 2 or x_norm.shape[1] != self.spec.width:
            raise DataError(f"feature matrix {x_norm.shape} does not match width {self.spec.width}")
        if x_norm.shape[0] == 0:
            return Tensor(np.zeros((0, self.config.n_foll))), [] if capture_attention else None
        rng = rng or np.random.default_rng(0)
        h = linear(Tensor(x_norm), self.w_in, self.b_in)
        first_attention: list[np.ndarray] | None = None
        for i, layer in enumerate(self.layers):
            h, weights = encoder_layer(h, layer, self.config.p_drop, rng, train_flag)
            if i == 0 and capture_attention:
                first_attention = [w.data.copy() for w in weights]
        raw = linear(h, self.w_out, self.b_out)
        return raw, first_attention

    # ---- snapshot-level API ----

    def snapshot_tensors(self, snap: Snapshot) -> dict[str, np.ndarray]:
        """Raw features plus aligned target/mask/scheduled arrays."""
        n = len(snap.tokens)
        feats = snapshot_features(snap, self.rp_table, self.train_table, self.spec)
        targets = np.zeros((n, self.config.n_foll))
        target_mask = np.zeros((n, self.config.n_foll))
        plan_mask = np.zeros((n, self.config.n_foll))
        scheduled = np.zeros((n, self.config.n_foll))
        translation = np.zeros(n)
        for i, tok in enumerate(snap.tokens):
            translation[i] = float(tok.translation_delay)
            for j, fut in enumerate(tok.future):
                scheduled[i, j] = fut.minutes_until
                if fut.rp != POST_ARRIVAL:
                    plan_mask[i, j] = 1.0
            for j, (t, m) in enumerate(zip(tok.targets, tok.target_mask)):
                if m:
                    targets[i, j] = float(t)
                    target_mask[i, j] = 1.0
        # outputs for the postArrival stand-in are never scored
        target_mask = target_mask * plan_mask
        return {
            "features": feats,
            "targets": targets,
            "target_mask": target_mask,
            "plan_mask": plan_mask,
            "scheduled": scheduled,
            "translation": translation,
        }

    def predict_snapshot(
        self, snap: Snapshot, mode: str = "eval", capture_attention: bool = False
    ) -> tuple[PredictionBatch, AttentionSnapshot | None]:
        data = self.snapshot_tensors(snap)
        x = apply_input_norm(data["features"], self.stats, self.spec, self.config.transform)
        raw, attn = self.forward_features(x, train_flag=False, capture_attention=capture_attention)
        raw_np = raw.data
        minutes = predict(
            raw_np,
            self.stats,
            data["translation"][:, None],
            data["scheduled"],
            mode,
            self.config.transform,
        )
        batch = PredictionBatch(
            train_numbers=[t.train_number for t in snap.tokens],
            raw=raw_np,
            predicted_minutes=minutes,
            plan_mask=data["plan_mask"],
            target_mask=data["target_mask"],
            targets=data["targets"],
            translation=data["translation"],
            scheduled=data["scheduled"],
        )
        snapshot_attn = None
        if capture_attention and attn is not None:
            snapshot_attn = AttentionSnapshot(
                t0=snap.t0.strftime("%Y-%m-%d %H:%M:%S"),
                train_numbers=batch.train_numbers,
                head_weights=attn,
            )
        return batch, snapshot_attn


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


def fit(
    train_snapshots: list[Snapshot],
    config: ForecastConfig,
    seed: int,
    rp_table: EmbeddingTable,
    train_table: EmbeddingTable,
    val_snapshots: list[Snapshot] | None = None,
    val_every: int = 5,
) -> TransformerForecaster:
    """Train with Adam on the masked L1 residual loss. Deterministic per
    seed; epoch losses and periodic validation MAE land on model.curve.
    With a validation set, the parameters of the best-scoring epoch are
    restored at the end (the desk-scale model overfits past its best
    point well before a fixed budget runs out)."""
    if not train_snapshots:
        raise DataError("no training snapshots")
    config.validate()
    model = TransformerForecaster(config, rp_table, train_table, seed=seed)

    cache = [model.snapshot_tensors(s) for s in train_snapshots]
    cache = [c for c in cache if c["features"].shape[0] > 0]
    if not cache:
        raise DataError("training snapshots contain no tokens")

    model.stats = NormStats.initial(model.spec.width)
    fmu, fsigma = fit_feature_stats([c["features"] for c in cache], model.spec, config.transform)
    residuals = np.concatenate(
        [
            (c["targets"] - c["translation"][:, None])[c["target_mask"] > 0]
            for c in cache
        ]
    )
    if residuals.size == 0:
        raise DataError("no valid targets in the training snapshots")
    tr = value_transform(residuals, config.transform)
    model.stats = NormStats(
        mu=float(tr.mean()),
        sigma=float(max(tr.std(), 1e-6)),
        feature_mu=fmu,
        feature_sigma=fsigma,
    )

    encoded = []
    for c in cache:
        enc = encode_targets(c["targets"], c["translation"][:, None], model.stats, config.transform)
        encoded.append(np.where(c["target_mask"] > 0, enc, 0.0))

    opt = Adam(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng([seed, 21])
    drop_rng = np.random.default_rng([seed, 31])

    params = model.parameters()
    best_val = float("inf")
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = -1

    n = len(cache)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_abs = 0.0
        epoch_count = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            batch_terms = []
            batch_valid = 0.0
            for si in idx:
                c = cache[si]
                mask = c["target_mask"]
                if mask.sum() == 0:
                    continue
                x = apply_input_norm(c["features"], model.stats, model.spec, config.transform)
                raw, _ = model.forward_features(x, train_flag=True, rng=drop_rng)
                # pooled masked L1 across the snapshots of the batch
                diff = absolute(mul(raw - encoded[si], mask))
                batch_terms.append(tensor_sum(diff))
                batch_valid += float(mask.sum())
            if not batch_terms:
                continue
            total = batch_terms[0]
            for t in batch_terms[1:]:
                total = total + t
            loss = total * (1.0 / batch_valid)
            if not np.isfinite(loss.item()):
                raise NumericError(f"training diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            epoch_abs += loss.item() * batch_valid
            epoch_count += batch_valid
        entry = {"epoch": epoch, "train_loss": epoch_abs / max(epoch_count, 1.0)}
        if val_snapshots and (epoch % val_every == val_every - 1 or epoch == config.epochs - 1):
            entry["val_mae"] = evaluate_mae(model, val_snapshots)
            if entry["val_mae"] < best_val:
                best_val = entry["val_mae"]
                best_epoch = epoch
                best_state = {k: p.data.copy() for k, p in params.items()}
        model.curve.append(entry)

    if best_state is not None:
        for k, p in params.items():
            p.data = best_state[k]
        model.curve.append({"selected_epoch": best_epoch, "selected_val_mae": best_val})
    return model


class ForecastPredictor:
    """Snapshot-level predictor interface around a trained model; emits
    clipped evaluation-mode predictions."""

    name = "transformer"

    def __init__(self, model: TransformerForecaster, h_arr_minutes: float = 30.0, h_dep_minutes: float = 30.0):
        from .ingest import SnapshotParams

        self.model = model
        self.snapshot_params = SnapshotParams(
            n_prev=model.config.n_prev,
            n_foll=model.config.n_foll,
            h_arr_minutes=h_arr_minutes,
            h_dep_minutes=h_dep_minutes,
        )

    def predict_snapshot(self, snap: Snapshot) -> np.ndarray:
        batch, _ = self.model.predict_snapshot(snap, mode="eval")
        return batch.predicted_minutes


def evaluate_mae(model: TransformerForecaster, snapshots: list[Snapshot]) -> float:
    """Minute-space MAE of clipped evaluation predictions over all valid
    positions of the given snapshots."""
    abs_sum = 0.0
    count = 0.0
    for snap in snapshots:
        if not snap.tokens:
            continue
        batch, _ = model.predict_snapshot(snap, mode="eval")
        m = batch.target_mask
        if m.sum() == 0:
            continue
        abs_sum += np.abs((batch.predicted_minutes - batch.targets))[m > 0].sum()
        count += m.sum()
    return abs_sum / count if count else float("nan")


# ----------------------------------------------------------------------------
# Checkpointing
# ----------------------------------------------------------------------------


def save_checkpoint(model: TransformerForecaster, path) -> None:
    arrays = {f"param.{k}": p.data for k, p in model.parameters().items()}
    arrays["stats.feature_mu"] = model.stats.feature_mu
    arrays["stats.feature_sigma"] = model.stats.feature_sigma
    arrays["emb.rp"] = model.rp_table.matrix
    arrays["emb.train"] = model.train_table.matrix
    meta = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "stats": {"mu": model.stats.mu, "sigma": model.stats.sigma},
        "rp_keys": model.rp_table.keys,
        "rp_dimension": model.rp_table.dimension,
        "train_keys": model.train_table.keys,
        "train_dimension": model.train_table.dimension,
        "curve": model.curve,
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> TransformerForecaster:
    arrays, meta = load_arrays(path)
    config = ForecastConfig.from_dict(meta["config"])
    rp_table = EmbeddingTable(meta["rp_dimension"], meta["rp_keys"], arrays["emb.rp"])
    train_table = EmbeddingTable(meta["train_dimension"], meta["train_keys"], arrays["emb.train"])
    model = TransformerForecaster(config, rp_table, train_table, seed=meta["seed"])
    params = model.parameters()
    for name, p in params.items():
        key = f"param.{name}"
        if key not in arrays:
            raise DataError(f"checkpoint missing parameter {name}")
        if arrays[key].shape != p.data.shape:
            raise DataError(f"checkpoint parameter {name} has shape {arrays[key].shape}")
        p.data = arrays[key]
    model.stats = NormStats(
        mu=float(meta["stats"]["mu"]),
        sigma=float(meta["stats"]["sigma"]),
        feature_mu=arrays["stats.feature_mu"],
        feature_sigma=arrays["stats.feature_sigma"],
    )
    model.curve = list(meta.get("curve", []))
    return model
