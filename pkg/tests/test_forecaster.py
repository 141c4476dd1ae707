from __future__ import annotations

import numpy as np
import pytest

from raildelay.embeddings import EmbeddingTable
from raildelay.errors import ConfigError, DataError
from raildelay.forecaster import (
    AttentionSnapshot,
    ForecastConfig,
    NormStats,
    TransformerForecaster,
    apply_input_norm,
    encode_targets,
    evaluate_mae,
    fit,
    load_checkpoint,
    predict,
    save_checkpoint,
    snapshot_features,
    training_loss,
    value_transform,
    value_untransform,
)
from raildelay.ingest import (
    POST_ARRIVAL,
    PRE_DEPARTURE,
    Exogenous,
    FutureEntry,
    PastEntry,
    Snapshot,
    TrainCategory,
    TrainToken,
)
from raildelay.nnkit import Tensor, grad_check
from datetime import datetime


class TestValueTransforms:
    def test_sqrt_definition(self):
        assert value_transform(9.0, "sqrt") == pytest.approx(3.0)
        assert value_transform(-4.0, "sqrt") == pytest.approx(-2.0)
        assert value_untransform(3.0, "sqrt") == pytest.approx(9.0)
        assert value_untransform(-2.0, "sqrt") == pytest.approx(-4.0)

    def test_identity(self):
        x = np.array([-5.0, 0.0, 2.5])
        assert np.array_equal(value_transform(x, "identity"), x)
        assert np.array_equal(value_untransform(x, "identity"), x)

    def test_round_trip_all_kinds(self):
        grid = np.concatenate([np.linspace(-100, 100, 997), [0.0, -1.0, 0.5, 27.0]])
        for kind in ("identity", "sqrt", "log"):
            back = value_untransform(value_transform(grid, kind), kind)
            assert np.max(np.abs(back - grid)) < 1e-9

    def test_specific_points(self):
        for x in (-100.0, -1.0, 0.0, 0.5, 27.0):
            for kind in ("identity", "sqrt", "log"):
                assert value_untransform(value_transform(x, kind), kind) == pytest.approx(x, abs=1e-9)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            value_transform(1.0, "cube")


class TestPredictFormula:
    def test_zero_output_is_translation_in_training_mode(self):
        stats = NormStats(0.0, 1.0, np.zeros(1), np.ones(1))
        out = predict(np.array([0.0]), stats, np.array([7.0]), np.array([5.0]), "train", "sqrt")
        assert out == pytest.approx([7.0])

    def test_eval_clip_active(self):
        # unclipped value -12 with s = 5 -> max(-7, 0) - 5 = -5
        stats = NormStats(0.0, 1.0, np.zeros(1), np.ones(1))
        raw = value_transform(np.array([-12.0]), "sqrt")  # decodes to -12
        out = predict(raw, stats, np.array([0.0]), np.array([5.0]), "eval", "sqrt")
        assert out == pytest.approx([-5.0])

    def test_eval_clip_inactive(self):
        stats = NormStats(0.0, 1.0, np.zeros(1), np.ones(1))
        raw = value_transform(np.array([3.0]), "sqrt")
        out = predict(raw, stats, np.array([0.0]), np.array([10.0]), "eval", "sqrt")
        assert out == pytest.approx([3.0])

    def test_encode_decode_round_trip(self):
        stats = NormStats(1.3, 2.7, np.zeros(1), np.ones(1))
        actual = np.array([17.0, -3.0, 0.0, 111.0])
        translation = np.array([5.0, -3.0, 1.0, 100.0])
        for kind in ("identity", "sqrt", "log"):
            y = encode_targets(actual, translation, stats, kind)
            back = predict(y, stats, translation, np.zeros(4), "train", kind)
            assert np.allclose(back, actual, atol=1e-9)

    def test_bad_mode(self):
        stats = NormStats(0.0, 1.0, np.zeros(1), np.ones(1))
        with pytest.raises(ConfigError):
            predict(np.zeros(1), stats, np.zeros(1), np.zeros(1), "test", "sqrt")


class TestTrainingLoss:
    def test_perfect_predictions(self):
        raw = Tensor(np.array([[1.0, 2.0]]))
        assert training_loss(raw, np.array([[1.0, 2.0]]), np.ones((1, 2))).item() == 0.0

    def test_hand_batch(self):
        # residuals {1, -1, 2, 0} in normalized space -> mean |.| = 1.0
        raw = Tensor(np.array([[1.0, -1.0], [2.0, 0.0]]))
        targets = np.zeros((2, 2))
        loss = training_loss(raw, targets, np.ones((2, 2)))
        assert loss.item() == pytest.approx(1.0)

    def test_all_masked_warns(self):
        raw = Tensor(np.ones((2, 2)))
        with pytest.warns(UserWarning):
            loss = training_loss(raw, np.zeros((2, 2)), np.zeros((2, 2)))
        assert loss.item() == 0.0


# ----------------------------------------------------------------------------
# Snapshot machinery
# ----------------------------------------------------------------------------

RPS = [f"{900100 + i:06d}BV" for i in range(6)]


def tables(d_rp=4, d_train=4, trains=(4001, 4003, 4005)) -> tuple[EmbeddingTable, EmbeddingTable]:
    rng = np.random.default_rng(3)
    rp_keys = sorted(RPS) + [PRE_DEPARTURE, POST_ARRIVAL]
    rp = EmbeddingTable(d_rp, rp_keys, rng.normal(size=(len(rp_keys), d_rp)))
    train_keys = sorted(str(t) for t in trains)
    tr = EmbeddingTable(d_train, train_keys, rng.normal(size=(len(train_keys), d_train)))
    return rp, tr


def make_token(train, translation, past_delays, future_targets, n_prev=3, n_foll=4) -> TrainToken:
    past = [PastEntry(PRE_DEPARTURE, 0.0, 0, "pad")] * (n_prev - len(past_delays))
    past += [
        PastEntry(RPS[i], 10.0 * (len(past_delays) - i), d, "P")
        for i, d in enumerate(past_delays)
    ]
    future = [
        FutureEntry(RPS[(i + 2) % len(RPS)], 5.0 * (i + 1), "P") for i in range(len(future_targets))
    ]
    future += [FutureEntry(POST_ARRIVAL, 0.0, "pad")] * (n_foll - len(future_targets))
    targets = [float(t) for t in future_targets] + [None] * (n_foll - len(future_targets))
    mask = [1] * len(future_targets) + [0] * (n_foll - len(future_targets))
    return TrainToken(
        train_number=train,
        category=TrainCategory.HIGH_SPEED,
        translation_delay=translation,
        past=past,
        future=future,
        targets=targets,
        target_mask=mask,
    )


def make_snapshot(tokens) -> Snapshot:
    return Snapshot(
        t0=datetime(2024, 1, 8, 10, 0),
        tokens=tokens,
        exogenous=Exogenous(0, 600.0, len(tokens)),
    )


def small_config(**kw) -> ForecastConfig:
    base = dict(d_model=8, d_ff=16, n_heads=2, depth=2, p_drop=0.0, n_prev=3, n_foll=4, epochs=5)
    base.update(kw)
    return ForecastConfig(**base)


def random_snapshots(n, rng, trains=(4001, 4003, 4005)):
    snaps = []
    for _ in range(n):
        tokens = []
        for t in trains:
            past = list(rng.integers(-2, 15, size=int(rng.integers(1, 4))))
            fut = list(rng.integers(-2, 20, size=int(rng.integers(1, 5))))
            tokens.append(make_token(t, past[-1] if past else 0, past, fut))
        snaps.append(make_snapshot(tokens))
    return snaps


class TestForward:
    def test_output_shape_contract(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=1)
        snap = make_snapshot([make_token(4001, 2, [1, 2], [3, 4]), make_token(4003, 0, [], [1])])
        batch, _ = model.predict_snapshot(snap)
        assert batch.raw.shape == (2, 4)
        assert batch.predicted_minutes.shape == (2, 4)

    def test_empty_snapshot(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=1)
        batch, _ = model.predict_snapshot(make_snapshot([]))
        assert batch.raw.shape == (0, 4)

    def test_zero_init_outputs_zero(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=1)
        snap = make_snapshot([make_token(4001, 2, [1, 2], [3, 4])])
        batch, _ = model.predict_snapshot(snap, mode="train")
        assert np.array_equal(batch.raw, np.zeros((1, 4)))

    def test_permutation_equivariance(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=2)
        # give the model non-zero outputs
        model.w_out.data = np.random.default_rng(0).normal(size=model.w_out.shape) * 0.1
        toks = [
            make_token(4001, 2, [1, 2], [3, 4]),
            make_token(4003, 0, [5], [1, 2]),
            make_token(4005, 7, [7, 7, 7], [8]),
        ]
        b1, _ = model.predict_snapshot(make_snapshot(toks))
        b2, _ = model.predict_snapshot(make_snapshot([toks[2], toks[0], toks[1]]))
        assert np.allclose(b2.raw[1], b1.raw[0], atol=1e-12)
        assert np.allclose(b2.raw[0], b1.raw[2], atol=1e-12)

    def test_translation_equivalence_at_init(self):
        # zero-initialized final layer, mu=0: training-mode predictions
        # equal translation everywhere, so MAE matches translation MAE
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=3)
        rng = np.random.default_rng(5)
        for snap in random_snapshots(6, rng):
            batch, _ = model.predict_snapshot(snap, mode="train")
            m = batch.target_mask > 0
            model_err = np.abs(batch.predicted_minutes - batch.targets)[m]
            translation_err = np.abs(
                np.broadcast_to(batch.translation[:, None], batch.targets.shape) - batch.targets
            )[m]
            assert np.max(np.abs(model_err - translation_err)) < 1e-9

    def test_attention_snapshot_rows_sum_to_one(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=4)
        snap = make_snapshot(
            [make_token(4001, 2, [1], [3]), make_token(4003, 0, [2], [1]), make_token(4005, 1, [1], [2])]
        )
        _, attn = model.predict_snapshot(snap, capture_attention=True)
        assert isinstance(attn, AttentionSnapshot)
        assert len(attn.head_weights) == 2
        for w in attn.head_weights:
            assert w.shape == (3, 3)
            assert np.allclose(w.sum(axis=1), 1.0, atol=1e-9)

    def test_clip_safety(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=5)
        model.w_out.data = np.random.default_rng(1).normal(size=model.w_out.shape)
        rng = np.random.default_rng(6)
        for snap in random_snapshots(5, rng):
            batch, _ = model.predict_snapshot(snap, mode="eval")
            assert np.all(batch.predicted_minutes + batch.scheduled >= -1e-12)

    def test_feature_width_mismatch(self):
        rp, tr = tables()
        model = TransformerForecaster(small_config(), rp, tr, seed=1)
        with pytest.raises(DataError):
            model.forward_features(np.zeros((2, 5)))


class TestGradients:
    def test_full_model_loss_gradient(self):
        rp, tr = tables(d_rp=3, d_train=3)
        cfg = small_config(d_model=6, d_ff=8)
        model = TransformerForecaster(cfg, rp, tr, seed=7)
        # non-zero output layer so the loss has signal through every block
        rng = np.random.default_rng(2)
        model.w_out.data = rng.normal(size=model.w_out.shape) * 0.3
        snap = make_snapshot(
            [make_token(4001, 2, [1, 5], [3, 4, 2]), make_token(4003, 0, [2], [1])]
        )
        data = model.snapshot_tensors(snap)
        x = apply_input_norm(data["features"], model.stats, model.spec, cfg.transform)
        targets = encode_targets(
            data["targets"], data["translation"][:, None], model.stats, cfg.transform
        )
        targets = np.where(data["target_mask"] > 0, targets, 0.0)
        params = model.parameters()

        def f():
            raw, _ = model.forward_features(x, train_flag=False)
            return training_loss(raw, targets, data["target_mask"])

        err = grad_check(f, list(params.values()))
        assert err < 1e-4


class TestFit:
    def test_loss_non_increasing_on_toy_set(self):
        rp, tr = tables()
        rng = np.random.default_rng(8)
        # learnable structure: delay decays by 2 per future step
        snaps = []
        for _ in range(50):
            d0 = int(rng.integers(0, 20))
            toks = [
                make_token(4001, d0, [d0], [max(d0 - 2, 0), max(d0 - 4, 0), max(d0 - 6, 0)]),
                make_token(4003, d0 // 2, [d0 // 2], [d0 // 2] * 2),
            ]
            snaps.append(make_snapshot(toks))
        cfg = small_config(epochs=12, lr=5e-3, batch_size=16)
        model = fit(snaps, cfg, seed=1, rp_table=rp, train_table=tr)
        losses = [e["train_loss"] for e in model.curve]
        increases = sum(1 for a, b in zip(losses, losses[1:]) if b > a * 1.0001)
        assert increases <= max(1, int(0.05 * len(losses)) + 1)
        assert losses[-1] < losses[0]

    def test_fixed_seed_bit_identical(self, tmp_path):
        rp, tr = tables()
        rng = np.random.default_rng(9)
        snaps = random_snapshots(12, rng)
        cfg = small_config(epochs=3)
        m1 = fit(snaps, cfg, seed=5, rp_table=rp, train_table=tr)
        m2 = fit(snaps, cfg, seed=5, rp_table=rp, train_table=tr)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(m1, p1)
        save_checkpoint(m2, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_training_set(self):
        rp, tr = tables()
        with pytest.raises(DataError):
            fit([], small_config(), seed=0, rp_table=rp, train_table=tr)


class TestCheckpoint:
    def test_round_trip_predictions(self, tmp_path):
        rp, tr = tables()
        rng = np.random.default_rng(10)
        snaps = random_snapshots(8, rng)
        cfg = small_config(epochs=2)
        model = fit(snaps, cfg, seed=2, rp_table=rp, train_table=tr)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        snap = snaps[0]
        b1, _ = model.predict_snapshot(snap)
        b2, _ = back.predict_snapshot(snap)
        assert np.array_equal(b1.predicted_minutes, b2.predicted_minutes)
        assert back.config == model.config
        assert back.stats.mu == model.stats.mu
