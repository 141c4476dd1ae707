"""Command-line interface and pipeline orchestration.

One JSON config drives the full chain: simulate -> clean -> snapshot ->
train-embeddings -> train -> evaluate, with artifacts and content hashes
recorded in a run manifest so identical re-runs skip completed stages.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericError, RailDelayError
from . import baselines, embeddings, evalkit, forecaster, ingest, railgraph, simgen

STAGE_ORDER = ["simulate", "clean", "snapshot", "train-embeddings", "train", "evaluate"]


# ----------------------------------------------------------------------------
# Pipeline config
# ----------------------------------------------------------------------------

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "sim": {},  # simgen.SimConfig fields
    "train_days": 20,
    "test_days": 5,
    "snapshot": {
        "n_prev": 4,
        "n_foll": 8,
        "h_arr_minutes": 30.0,
        "h_dep_minutes": 30.0,
        "train_spacing_minutes": 15.0,
        "test_spacing_minutes": 4.0,
    },
    "embeddings": {
        "d_rp": 8,
        "d_train": 8,
        "length_samples": 3000,
        "rp_epochs": 200,
        "train_epochs": 150,
    },
    "model": {},  # forecaster.ForecastConfig fields
    "evaluate": {"baselines": ["translation", "ar2", "bayes"]},
}


def load_pipeline_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seeds: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    versions: dict = field(default_factory=lambda: {"raildelay": __version__})

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "stages": self.stages,
            "versions": self.versions,
        }

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        d = json.loads(path.read_text())
        m = cls(config_hash=d["config_hash"])
        m.seeds = d.get("seeds", {})
        m.stages = d.get("stages", {})
        m.versions = d.get("versions", {})
        return m


# ----------------------------------------------------------------------------
# Stage implementations (shared by subcommands and the pipeline)
# ----------------------------------------------------------------------------


def _sim_config(cfg: dict) -> simgen.SimConfig:
    sim = dict(cfg.get("sim", {}))
    sim.setdefault("seed", cfg.get("seed", 0))
    sim.setdefault("days", int(cfg.get("train_days", 20)) + int(cfg.get("test_days", 5)))
    return simgen.SimConfig.from_dict(sim)


def _snapshot_params(cfg: dict) -> ingest.SnapshotParams:
    s = cfg["snapshot"]
    return ingest.SnapshotParams(
        n_prev=int(s["n_prev"]),
        n_foll=int(s["n_foll"]),
        h_arr_minutes=float(s["h_arr_minutes"]),
        h_dep_minutes=float(s["h_dep_minutes"]),
    )


def stage_simulate(cfg: dict, out: Path) -> dict[str, Path]:
    sim_cfg = _sim_config(cfg)
    g = simgen.generate_network(sim_cfg)
    plan = simgen.generate_plan(g, sim_cfg)
    n_train = int(cfg["train_days"])
    n_test = int(cfg["test_days"])
    train_events = simgen.simulate_days(g, plan, sim_cfg, n_train)
    test_events = []
    for d in range(n_train, n_train + n_test):
        test_events.extend(simgen.simulate_day(g, plan, sim_cfg, d))
    paths = {
        "train_events": out / "train_events.csv",
        "test_events": out / "test_events.csv",
        "positions": out / "positions.json",
        "nominal_graph": out / "nominal_graph.json",
    }
    ingest.write_events_csv(train_events, paths["train_events"])
    ingest.write_events_csv(test_events, paths["test_events"])
    simgen.save_positions(g, paths["positions"])
    railgraph.save_graph(g, paths["nominal_graph"])
    return paths


def stage_clean(cfg: dict, out: Path) -> dict[str, Path]:
    paths = {}
    report_all = {}
    for split in ("train", "test"):
        src = out / f"{split}_events.csv"
        if not src.exists():
            raise DataError(f"missing {src}; run the simulate stage first")
        events, malformed = ingest.read_events_csv(src, strict=False)
        cleaned, report = ingest.clean_events(events)
        dst = out / f"{split}_clean.csv"
        ingest.write_events_csv(cleaned, dst)
        paths[f"{split}_clean"] = dst
        rd = report.to_dict()
        rd["csv_malformed"] = malformed
        report_all[split] = rd
    report_path = out / "clean_report.json"
    report_path.write_text(json.dumps(report_all, sort_keys=True, indent=1))
    paths["clean_report"] = report_path
    return paths


def _event_days(events) -> list[date]:
    return sorted({key[0] for key in ingest.service_groups(events)})


def stage_snapshot(cfg: dict, out: Path) -> dict[str, Path]:
    params = _snapshot_params(cfg)
    paths: dict[str, Path] = {}
    for split, spacing_key in (("train", "train_spacing_minutes"), ("test", "test_spacing_minutes")):
        src = out / f"{split}_clean.csv"
        if not src.exists():
            raise DataError(f"missing {src}; run the clean stage first")
        events, _ = ingest.read_events_csv(src)
        plan_view = ingest.reconstruct_plan_view(events)
        split_dir = out / "snapshots" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        spacing = float(cfg["snapshot"][spacing_key])
        count = 0
        for day in _event_days(events):
            for t0 in ingest.snapshot_schedule(day, spacing):
                snap = ingest.build_snapshot(events, plan_view, t0, params)
                if not snap.tokens:
                    continue
                name = t0.strftime("snap_%Y%m%d_%H%M.json")
                ingest.save_snapshot(snap, split_dir / name)
                count += 1
        if count == 0:
            raise DataError(f"no non-empty snapshots for split {split}")
        paths[f"snapshots_{split}"] = split_dir
    return paths


def load_snapshot_dir(path: Path) -> list[ingest.Snapshot]:
    if not path.is_dir():
        raise DataError(f"snapshot directory {path} does not exist")
    snaps = [ingest.load_snapshot(p) for p in sorted(path.glob("*.json"))]
    if not snaps:
        raise DataError(f"no snapshots under {path}")
    return snaps


def stage_train_embeddings(cfg: dict, out: Path) -> dict[str, Path]:
    src = out / "train_clean.csv"
    if not src.exists():
        raise DataError(f"missing {src}; run the clean stage first")
    events, _ = ingest.read_events_csv(src)
    emb_cfg = cfg["embeddings"]
    seed = int(cfg.get("seed", 0))

    g = railgraph.build_graph(events)
    graph_path = out / "graph.json"
    railgraph.save_graph(g, graph_path)

    rng = np.random.default_rng([seed, 41])
    dataset = embeddings.make_length_dataset(g, int(emb_cfg["length_samples"]), rng)
    rp_result = embeddings.train_rp_embedding(
        g,
        dataset,
        d_rp=int(emb_cfg["d_rp"]),
        config=embeddings.ProbeConfig(epochs=int(emb_cfg["rp_epochs"]), seed=seed),
    )
    its = embeddings.itineraries_from_events(events)
    # one itinerary per train number is enough (plans repeat daily)
    unique = {}
    for it in its:
        unique.setdefault(it.train_number, it)
    train_table = embeddings.train_trainnum_embedding(
        sorted(unique.values(), key=lambda it: it.train_number),
        embeddings.MaskingLaw(),
        d_train=int(emb_cfg["d_train"]),
        rp_table=rp_result.table,
        config=embeddings.TrainEmbeddingConfig(epochs=int(emb_cfg["train_epochs"]), seed=seed),
    )
    paths = {
        "graph": graph_path,
        "rp_embedding": out / "rp_embedding.json",
        "train_embedding": out / "train_embedding.json",
    }
    rp_result.table.save_json(paths["rp_embedding"])
    train_table.save_json(paths["train_embedding"])
    return paths


def stage_train(cfg: dict, out: Path) -> dict[str, Path]:
    for required, stage in (
        (out / "snapshots" / "train", "snapshot"),
        (out / "rp_embedding.json", "train-embeddings"),
    ):
        if not required.exists():
            raise DataError(f"missing {required}; run the {stage} stage first")
    snaps = load_snapshot_dir(out / "snapshots" / "train")
    rp_table = embeddings.EmbeddingTable.load_json(out / "rp_embedding.json")
    train_table = embeddings.EmbeddingTable.load_json(out / "train_embedding.json")
    model_cfg = forecaster.ForecastConfig.from_dict(
        {**cfg.get("model", {}), "n_prev": cfg["snapshot"]["n_prev"], "n_foll": cfg["snapshot"]["n_foll"]}
    )
    # hold out the last training days to pick the best epoch
    days = sorted({s.t0.date() for s in snaps})
    n_val_days = max(1, len(days) // 10) if len(days) > 2 else 0
    val_days = set(days[len(days) - n_val_days :]) if n_val_days else set()
    train_split = [s for s in snaps if s.t0.date() not in val_days]
    val_split = [s for s in snaps if s.t0.date() in val_days]
    model = forecaster.fit(
        train_split,
        model_cfg,
        seed=int(cfg.get("seed", 0)),
        rp_table=rp_table,
        train_table=train_table,
        val_snapshots=val_split or None,
    )
    ckpt = out / "model.ckpt"
    forecaster.save_checkpoint(model, ckpt)
    curve_path = out / "training_curve.json"
    curve_path.write_text(json.dumps(model.curve, sort_keys=True, indent=1))
    return {"checkpoint": ckpt, "training_curve": curve_path}


def _predictors(cfg: dict, out: Path) -> list:
    params = _snapshot_params(cfg)
    ckpt = out / "model.ckpt"
    if not ckpt.exists():
        raise DataError(f"missing {ckpt}; run the train stage first")
    model = forecaster.load_checkpoint(ckpt)
    preds = [
        forecaster.ForecastPredictor(
            model, h_arr_minutes=params.h_arr_minutes, h_dep_minutes=params.h_dep_minutes
        )
    ]
    wanted = cfg["evaluate"].get("baselines", [])
    if "translation" in wanted:
        preds.append(baselines.TranslationPredictor(params))
    if "ar2" in wanted:
        preds.append(baselines.Ar2Predictor(params))
    if "bayes" in wanted:
        train_events, _ = ingest.read_events_csv(out / "train_clean.csv")
        net = baselines.fit_bayes(
            baselines.build_bayes_graph(train_events), train_events
        )
        preds.append(baselines.BayesPredictor(net, params))
    return preds


def stage_evaluate(cfg: dict, out: Path) -> dict[str, Path]:
    src = out / "test_clean.csv"
    if not src.exists():
        raise DataError(f"missing {src}; run the clean stage first")
    events, _ = ingest.read_events_csv(src)
    days = _event_days(events)
    spacing = float(cfg["snapshot"]["test_spacing_minutes"])
    reports = []
    for predictor in _predictors(cfg, out):
        reports.append(evalkit.evaluate_predictor(predictor, events, days, spacing))
    by_name = {r.predictor: r for r in reports}
    summary = {"reports": [r.to_dict() for r in reports]}
    if "transformer" in by_name and "translation" in by_name:
        t = by_name["transformer"].mae
        b = by_name["translation"].mae
        if t is not None and b:
            summary["mae_improvement_vs_translation_pct"] = 100.0 * (b - t) / b
    path = out / "metrics.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=1))
    return {"metrics": path}


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "clean": stage_clean,
    "snapshot": stage_snapshot,
    "train-embeddings": stage_train_embeddings,
    "train": stage_train,
    "evaluate": stage_evaluate,
}


def _hash_outputs(outputs: dict[str, Path]) -> dict[str, str]:
    hashed = {}
    for name, path in outputs.items():
        if path.is_dir():
            parts = [f"{p.name}:{file_sha256(p)}" for p in sorted(path.glob("*.json"))]
            hashed[str(path)] = hashlib.sha256("\n".join(parts).encode()).hexdigest()
        else:
            hashed[str(path)] = file_sha256(path)
    return hashed


def run_pipeline(config_path: str | Path, out_dir: str | Path, stages: list[str] | None = None) -> RunManifest:
    """Execute requested stages in dependency order; a stage whose outputs
    already exist under a matching config hash is skipped."""
    cfg = load_pipeline_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest = RunManifest.load(manifest_path)
        if manifest.config_hash != chash:
            manifest = RunManifest(config_hash=chash)
    else:
        manifest = RunManifest(config_hash=chash)
    manifest.seeds = {"pipeline": cfg.get("seed", 0), "sim": _sim_config(cfg).seed}

    wanted = stages or STAGE_ORDER
    for stage in wanted:
        if stage not in STAGE_FUNCS:
            raise ConfigError(f"unknown stage {stage!r}; choose from {STAGE_ORDER}")

    for stage in STAGE_ORDER:
        if stage not in wanted:
            continue
        prior = manifest.stages.get(stage)
        if prior and all(
            Path(p).exists() for p in prior["outputs"]
        ) and _hash_outputs({k: Path(k) for k in prior["outputs"]}) == prior["outputs"]:
            print(f"[pipeline] {stage}: up to date, skipping")
            continue
        print(f"[pipeline] {stage}: running")
        outputs = STAGE_FUNCS[stage](cfg, out)
        manifest.stages[stage] = {"outputs": _hash_outputs(outputs)}
        manifest.save(manifest_path)
    manifest.save(manifest_path)
    return manifest


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = simgen.SimConfig.load(args.config) if args.config else simgen.SimConfig()
    if args.days is not None:
        cfg.days = args.days
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = simgen.generate_network(cfg)
    plan = simgen.generate_plan(g, cfg)
    events = simgen.simulate_days(g, plan, cfg)
    ingest.write_events_csv(events, out / "events.csv")
    simgen.save_positions(g, out / "positions.json")
    railgraph.save_graph(g, out / "nominal_graph.json")
    report = simgen.calibration_report(events)
    (out / "calibration.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    print(f"simulated {cfg.days} days, {len(events)} events -> {out}")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_clean(args) -> int:
    events, malformed = ingest.read_events_csv(args.events, strict=False)
    cleaned, report = ingest.clean_events(events)
    ingest.write_events_csv(cleaned, args.out)
    d = report.to_dict()
    d["csv_malformed"] = malformed
    if args.report:
        Path(args.report).write_text(json.dumps(d, sort_keys=True, indent=1))
    print(json.dumps(d, sort_keys=True))
    return 0


def cmd_snapshot(args) -> int:
    events, _ = ingest.read_events_csv(args.events)
    params = ingest.SnapshotParams(
        n_prev=args.n_prev, n_foll=args.n_foll, h_arr_minutes=args.h_arr, h_dep_minutes=args.h_dep
    )
    plan_view = ingest.reconstruct_plan_view(events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for day in _event_days(events):
        for t0 in ingest.snapshot_schedule(day, args.spacing):
            snap = ingest.build_snapshot(events, plan_view, t0, params)
            if not snap.tokens:
                continue
            ingest.save_snapshot(snap, out / t0.strftime("snap_%Y%m%d_%H%M.json"))
            count += 1
    print(f"wrote {count} snapshots -> {out}")
    return 0


def cmd_train_embeddings(args) -> int:
    events, _ = ingest.read_events_csv(args.events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["seed"] = args.seed
    cfg["embeddings"]["d_rp"] = args.d_rp
    cfg["embeddings"]["d_train"] = args.d_train
    tmp_csv = out / "train_clean.csv"
    ingest.write_events_csv(events, tmp_csv)
    paths = stage_train_embeddings(cfg, out)
    print(f"embeddings -> {paths['rp_embedding']}, {paths['train_embedding']}")
    return 0


def cmd_train(args) -> int:
    snaps = load_snapshot_dir(Path(args.snapshots))
    model_cfg = forecaster.ForecastConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else forecaster.ForecastConfig()
    rp_table = embeddings.EmbeddingTable.load_json(args.rp_embedding)
    train_table = embeddings.EmbeddingTable.load_json(args.train_embedding)
    model = forecaster.fit(snaps, model_cfg, seed=args.seed, rp_table=rp_table, train_table=train_table)
    forecaster.save_checkpoint(model, args.out)
    last = model.curve[-1] if model.curve else {}
    print(f"checkpoint -> {args.out} (final train loss {last.get('train_loss'):.4f})" if last else f"checkpoint -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = forecaster.load_checkpoint(args.checkpoint)
    snap = ingest.load_snapshot(args.snapshot)
    batch, attn = model.predict_snapshot(snap, capture_attention=args.attention_out is not None)
    lines = ["trainNum,position,rp,scheduled_in_minutes,predicted_delay"]
    for i, tok in enumerate(snap.tokens):
        for j, fut in enumerate(tok.future):
            if fut.obs_type == ingest.PAD_OBS_TYPE:
                continue
            lines.append(
                f"{tok.train_number},{j},{fut.rp},{fut.minutes_until:.2f},{batch.predicted_minutes[i, j]:.2f}"
            )
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.attention_out and attn is not None:
        Path(args.attention_out).write_text(json.dumps(attn.to_dict(), sort_keys=True))
    print(f"predictions -> {args.out}")
    return 0


def cmd_attention(args) -> int:
    model = forecaster.load_checkpoint(args.checkpoint)
    snap = ingest.load_snapshot(args.snapshot)
    _, attn = model.predict_snapshot(snap, capture_attention=True)
    if attn is None:
        raise DataError("snapshot has no tokens; no attention to export")
    Path(args.out).write_text(json.dumps(attn.to_dict(), sort_keys=True))
    print(f"attention -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    events, _ = ingest.read_events_csv(args.events)
    days = _event_days(events)
    params = ingest.SnapshotParams(n_prev=args.n_prev, n_foll=args.n_foll)
    preds = []
    if args.checkpoint:
        model = forecaster.load_checkpoint(args.checkpoint)
        preds.append(forecaster.ForecastPredictor(model))
    for name in (args.baselines.split(",") if args.baselines else []):
        name = name.strip()
        if name == "translation":
            preds.append(baselines.TranslationPredictor(params))
        elif name == "ar2":
            preds.append(baselines.Ar2Predictor(params))
        elif name == "bayes":
            if not args.history:
                raise ConfigError("--history is required for the bayes baseline")
            history, _ = ingest.read_events_csv(args.history)
            net = baselines.fit_bayes(baselines.build_bayes_graph(history), history)
            preds.append(baselines.BayesPredictor(net, params))
        elif name:
            raise ConfigError(f"unknown baseline {name!r}")
    if not preds:
        raise ConfigError("nothing to evaluate: give --checkpoint and/or --baselines")
    reports = [evalkit.evaluate_predictor(p, events, days, args.spacing) for p in preds]
    payload = {"reports": [r.to_dict() for r in reports]}
    Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1))
    for r in reports:
        print(r.to_json())
    return 0


def cmd_density(args) -> int:
    events, _ = ingest.read_events_csv(args.events)
    positions = simgen.load_positions(args.positions)
    t_center = datetime.strptime(args.at, ingest.TIME_FORMAT)
    grid = evalkit.density_grid(
        events, t_center, positions, bandwidth=args.bandwidth, grid_size=args.grid_size
    )
    grid.to_csv(args.out)
    print(f"density grid ({args.grid_size}x{args.grid_size}) -> {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    stages = args.stages.split(",") if args.stages else None
    manifest = run_pipeline(args.config, args.out, stages)
    metrics = Path(args.out) / "metrics.json"
    if metrics.exists():
        print(metrics.read_text())
    print(f"manifest -> {Path(args.out) / 'manifest.json'}")
    return 0


def cmd_default_config(args) -> int:
    Path(args.out).write_text(json.dumps(DEFAULT_CONFIG, sort_keys=True, indent=1))
    print(f"default config -> {args.out}")
    return 0


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raildelay", description=__doc__)
    parser.add_argument("--version", action="version", version=f"raildelay {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic event corpus")
    p.add_argument("--config", help="SimConfig JSON file")
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("clean", help="deduplicate and repair an events CSV")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("snapshot", help="build model-input snapshots")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=15.0)
    p.add_argument("--n-prev", type=int, default=4)
    p.add_argument("--n-foll", type=int, default=8)
    p.add_argument("--h-arr", type=float, default=30.0)
    p.add_argument("--h-dep", type=float, default=30.0)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("train-embeddings", help="pre-train RP and train-number tables")
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-rp", type=int, default=8)
    p.add_argument("--d-train", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_embeddings)

    p = sub.add_parser("train", help="train the forecasting model")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--config", help="ForecastConfig JSON file")
    p.add_argument("--rp-embedding", required=True)
    p.add_argument("--train-embedding", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-train predictions for one snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attention-out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attention", help="first-encoder attention for one snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("evaluate", help="metric report over test events")
    p.add_argument("--events", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baselines", default="")
    p.add_argument("--history", help="training events CSV (bayes baseline)")
    p.add_argument("--spacing", type=float, default=4.0)
    p.add_argument("--n-prev", type=int, default=4)
    p.add_argument("--n-foll", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("density", help="delay-density grid around a timestamp")
    p.add_argument("--events", required=True)
    p.add_argument("--positions", required=True)
    p.add_argument("--at", required=True, help="YYYY-MM-DD HH:MM:SS")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("pipeline", help="run the full chain from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", help="comma-separated subset of stages")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("default-config", help="write the default pipeline config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_default_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except RailDelayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
