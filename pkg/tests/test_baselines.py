from __future__ import annotations

import numpy as np
import pytest

from raildelay.baselines import (
    Ar2Params,
    Ar2Predictor,
    BayesNet,
    BayesPredictor,
    TranslationPredictor,
    ar2_predict,
    bayes_predict,
    build_bayes_graph,
    fit_ar2,
    fit_bayes,
    translation_predict,
)
from raildelay.errors import DataError
from raildelay.ingest import (
    PAD_OBS_TYPE,
    POST_ARRIVAL,
    PRE_DEPARTURE,
    FutureEntry,
    PastEntry,
    SnapshotParams,
    TrainCategory,
    TrainToken,
)
from tests.conftest import ev

A, B, C = "100001BV", "100002BV", "100003BV"


def token(translation, past_delays=(), n_foll=3, train=4453) -> TrainToken:
    past = [PastEntry(PRE_DEPARTURE, 0.0, 0, PAD_OBS_TYPE)] * (4 - len(past_delays))
    past += [PastEntry(A, 5.0, d, "P") for d in past_delays]
    future = [FutureEntry(B, 10.0 * (j + 1), "P") for j in range(n_foll)]
    return TrainToken(
        train_number=train,
        category=TrainCategory.HIGH_SPEED,
        translation_delay=translation,
        past=past,
        future=future,
        targets=[None] * n_foll,
        target_mask=[0] * n_foll,
    )


class TestTranslation:
    def test_last_delay_everywhere(self):
        # the sampled production row: train 4453 measured 111 minutes late
        out = translation_predict(token(111, (3, 111)))
        assert np.array_equal(out, [111.0, 111.0, 111.0])

    def test_never_observed_train(self):
        out = translation_predict(token(0, ()))
        assert np.array_equal(out, [0.0, 0.0, 0.0])

    def test_last_of_sequence(self):
        out = translation_predict(token(4, (3, 7, 4)))
        assert np.array_equal(out, [4.0, 4.0, 4.0])

    def test_constant_across_future_axis(self):
        out = translation_predict(token(7, (1, 7), n_foll=6))
        assert np.all(out == out[0]) and out[0] == 7.0


class TestAr2:
    def test_degenerate_translation(self):
        params = Ar2Params(1.0, 0.0, 0.0)
        out = ar2_predict(params, 5.0, 2.0, 4)
        assert np.array_equal(out, [5.0, 5.0, 5.0, 5.0])

    def test_recovers_known_parameters(self):
        rng = np.random.default_rng(0)
        alpha, beta, gamma = 0.6, 0.3, 1.0
        s = [0.0, 1.0]
        for _ in range(400):
            s.append(alpha * s[-1] + beta * s[-2] + gamma + rng.normal(0, 0.01))
        params = fit_ar2(s)
        assert params.alpha == pytest.approx(alpha, abs=0.05)
        assert params.beta == pytest.approx(beta, abs=0.05)
        assert params.gamma == pytest.approx(gamma, abs=0.05)
        assert not params.fallback

    def test_constant_series_stationarity_identity(self):
        c = 6.0
        params = fit_ar2([c] * 10)
        assert params.gamma == pytest.approx(c * (1 - params.alpha - params.beta), abs=1e-8)

    def test_short_series_falls_back(self):
        params = fit_ar2([3.0, 4.0])
        assert params.fallback
        assert (params.alpha, params.beta, params.gamma) == (1.0, 0.0, 0.0)

    def test_predictor_matches_translation_on_short_past(self):
        p = Ar2Predictor(SnapshotParams(n_prev=4, n_foll=3))
        from tests.test_baselines import token as tok

        snap_tok = tok(7, (7,))
        from raildelay.ingest import Exogenous, Snapshot
        from datetime import datetime

        snap = Snapshot(datetime(2024, 1, 8, 10, 0), [snap_tok], Exogenous(0, 600, 1))
        out = p.predict_snapshot(snap)
        assert np.array_equal(out[0], translation_predict(snap_tok))


def five_event_day():
    """Two trains, three RPs; hand-enumerable thinning predicate."""
    return [
        ev(1, "2024-01-08 08:00:00", A, "O", 2, 7001, rank=1),
        ev(2, "2024-01-08 08:30:00", B, "P", 4, 7001, rank=4),
        ev(3, "2024-01-08 09:40:00", C, "T", 5, 7001, rank=7),
        ev(4, "2024-01-08 08:20:00", B, "O", 0, 7003, rank=1),
        ev(5, "2024-01-08 11:00:00", C, "T", 1, 7003, rank=4),
    ]


class TestBayesGraph:
    def test_hand_enumerated_edges(self):
        net = build_bayes_graph(five_event_day(), window_minutes=30.0)
        parents = {k: set(v.parents) for k, v in net.nodes.items()}
        # chronology (minutes): (7001,A)=480, (7003,B)=500, (7001,B)=510,
        # (7001,C)=580, (7003,C)=660
        assert parents[(7001, A)] == set()
        # same RP as (7001,B)? no RP match for (7003,B) vs (7001,A): within
        # 30-minute window (480 vs 500) -> edge
        assert parents[(7003, B)] == {(7001, A)}
        # (7001,B): same train as (7001,A); same RP as (7003,B) (also window)
        assert parents[(7001, B)] == {(7001, A), (7003, B)}
        # (7001,C): same train edges; window to (7001,B)? 580-510=70 > 30, no;
        # (7003,B) same train? no, same rp? no, window 80 no
        assert parents[(7001, C)] == {(7001, A), (7001, B)}
        # (7003,C): same train (7003,B); same RP (7001,C); rest fails
        assert parents[(7003, C)] == {(7003, B), (7001, C)}

    def test_same_train_consecutive_rps_edge(self):
        events = five_event_day()[:2]
        net = build_bayes_graph(events)
        assert (7001, A) in net.nodes[(7001, B)].parents

    def test_unrelated_distant_trains_no_edge(self):
        events = [
            ev(1, "2024-01-08 08:00:00", A, "P", 0, 7001),
            ev(2, "2024-01-08 15:00:00", B, "P", 0, 7003),
        ]
        net = build_bayes_graph(events, window_minutes=30.0)
        assert net.nodes[(7003, B)].parents == []

    def test_acyclic_by_chronology(self):
        net = build_bayes_graph(five_event_day())
        order = {k: i for i, k in enumerate(net.topological_order())}
        for k, node in net.nodes.items():
            for p in node.parents:
                assert order[p] < order[k]


class TestBayesFitPredict:
    def test_parentless_node_historical_mean(self):
        events = [
            ev(1, "2024-01-08 08:00:00", A, "O", 2, 7001),
            ev(2, "2024-01-09 08:00:00", A, "O", 4, 7001),
        ]
        net = fit_bayes(build_bayes_graph(events), events)
        assert net.nodes[(7001, A)].bias == pytest.approx(3.0)
        values = bayes_predict(net, {})
        assert values[(7001, A)] == pytest.approx(3.0)

    def test_identity_chain_propagation(self):
        net = BayesNet(nodes={}, window_minutes=30.0, fitted=True)
        from raildelay.baselines import BayesNode

        net.nodes[(1, A)] = BayesNode((1, A), 480.0, 0.0, 1)
        net.nodes[(1, B)] = BayesNode((1, B), 500.0, 0.0, 1, parents=[(1, A)], weights=[1.0], bias=0.0)
        values = bayes_predict(net, {(1, A): 10.0})
        assert values[(1, B)] == pytest.approx(10.0)

    def test_three_node_hand_recursion(self):
        from raildelay.baselines import BayesNode

        net = BayesNet(nodes={}, window_minutes=30.0, fitted=True)
        net.nodes[(1, A)] = BayesNode((1, A), 480.0, 0.0, 1, bias=2.0)
        net.nodes[(1, B)] = BayesNode((1, B), 500.0, 0.0, 1, parents=[(1, A)], weights=[0.5], bias=1.0)
        net.nodes[(1, C)] = BayesNode(
            (1, C), 520.0, 0.0, 1, parents=[(1, A), (1, B)], weights=[0.25, 2.0], bias=-1.0
        )
        values = bayes_predict(net, {})
        # L(A)=2; L(B)=1+0.5*2=2; L(C)=-1+0.25*2+2*2=3.5
        assert values[(1, A)] == pytest.approx(2.0)
        assert values[(1, B)] == pytest.approx(2.0)
        assert values[(1, C)] == pytest.approx(3.5)

    def test_measured_values_override(self):
        from raildelay.baselines import BayesNode

        net = BayesNet(nodes={}, window_minutes=30.0, fitted=True)
        net.nodes[(1, A)] = BayesNode((1, A), 480.0, 0.0, 1, bias=2.0)
        net.nodes[(1, B)] = BayesNode((1, B), 500.0, 0.0, 1, parents=[(1, A)], weights=[1.0], bias=0.0)
        values = bayes_predict(net, {(1, A): 7.0})
        assert values[(1, B)] == pytest.approx(7.0)

    def test_zero_history_zero_biases_all_zero(self):
        events = five_event_day()
        zeroed = [ev(e.id, e.time.strftime("%Y-%m-%d %H:%M:%S"), e.rp, e.obs_type, 0, e.train_number, e.rank) for e in events]
        net = fit_bayes(build_bayes_graph(zeroed), zeroed)
        values = bayes_predict(net, {})
        assert all(abs(v) < 1e-9 for v in values.values())

    def test_underdetermined_flagged_and_finite(self):
        events = five_event_day()  # one day of history, several parents
        net = fit_bayes(build_bayes_graph(events), events)
        assert any(n.underdetermined for n in net.nodes.values() if n.parents)
        values = bayes_predict(net, {})
        assert all(np.isfinite(v) for v in values.values())

    def test_fit_recovers_linear_weight(self):
        events = []
        i = 0
        rng = np.random.default_rng(1)
        for day in range(8, 22):
            lead = int(rng.integers(0, 12))
            events.append(ev(i, f"2024-01-{day:02d} 08:00:00", A, "O", lead, 7001, rank=1))
            events.append(ev(i + 1, f"2024-01-{day:02d} 08:30:00", B, "T", 2 * lead + 1, 7001, rank=4))
            i += 2
        net = fit_bayes(build_bayes_graph(events, window_minutes=5.0), events)
        node = net.nodes[(7001, B)]
        assert node.parents == [(7001, A)]
        assert node.weights[0] == pytest.approx(2.0, abs=0.01)
        assert node.bias == pytest.approx(1.0, abs=0.1)

    def test_predictor_requires_fitted(self):
        net = build_bayes_graph(five_event_day())
        with pytest.raises(DataError):
            BayesPredictor(net, SnapshotParams())

    def test_serialization_round_trip(self, tmp_path):
        net = fit_bayes(build_bayes_graph(five_event_day()), five_event_day())
        p = tmp_path / "bayes.json"
        net.save_json(p)
        back = BayesNet.load_json(p)
        assert back.to_dict() == net.to_dict()
        assert bayes_predict(back, {}) == bayes_predict(net, {})
