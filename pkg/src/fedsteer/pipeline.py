"""The reference experiment, end to end.

Three robots collect private demonstrations (one per modality) and clone the
expert; their parameters travel over real HTTP to an in-process cloud
server, which fuses them into pseudo-labels and serves per-modality guides;
each robot then fine-tunes a transferred policy and both arms are evaluated
closed-loop across the weather suite. All artifacts land under one output
directory and contain no timestamps, so a rerun is byte-identical.
"""
from __future__ import annotations

import threading
import time
from pathlib import Path

import numpy as np
import uvicorn

from . import world as sim
from .client import FilClient
from .cloud import CloudState
from .config import ExperimentConfig
from .fusion import build_scene_bank, save_scene_bank
from .imitation import (
    collect_demonstrations,
    evaluate_offline,
    save_demonstrations,
    train_bc,
)
from .nn import serialize_params
from .obs import ModalityId
from .reports import svg_line_chart, write_csv
from .service import create_app
from .transfer import compare_training, fine_tune, transfer_init
from .world import EvalReport, WeatherPerturbation, run_episode

WEATHER_SUITE = ("none", "rain", "snow", "fog", "dust")


class ServerThread:
    """In-process uvicorn server on an ephemeral port."""

    def __init__(self, state: CloudState):
        self.config = uvicorn.Config(create_app(state), host="127.0.0.1",
                                     port=0, log_level="error")
        self.server = uvicorn.Server(self.config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self) -> str:
        self.thread.start()
        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        return f"http://127.0.0.1:{port}"

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


def _curve_rows(curve):
    return [[c.epoch, c.train_mse, c.val_mse] for c in curve]


def evaluate_suite(cfg, controllers, out_dir: Path, log=print) -> dict:
    """Closed-loop weather sweep; returns {(name, modality, kind): report}."""
    from .cli import EVAL_COLUMNS, evaluate_controller

    results = {}
    for (name, modality), controller in controllers.items():
        for kind in WEATHER_SUITE:
            weather = WeatherPerturbation(
                kind, 0.0 if kind == "none" else cfg["weather.intensity"],
                cfg["weather.seed"])
            total, rows = evaluate_controller(cfg, controller, modality, weather)
            results[(name, modality, kind)] = total
            out_rows = [[name, modality.name.lower(), kind, weather.intensity]
                        + row for row in rows]
            out_rows.append(
                [name, modality.name.lower(), kind, weather.intensity, "all",
                 total.episodes, total.collisions, total.turns_encountered,
                 total.turns_missed, total.straights_encountered,
                 total.straights_mistaken, total.off_track_exits,
                 total.hit_obstacle_rate, total.miss_turn_rate,
                 total.straight_mistake_rate, total.total_mistake_rate])
            write_csv(out_dir / f"{name}_{modality.name.lower()}_{kind}.csv",
                      EVAL_COLUMNS, out_rows, "evaluate", cfg.digest,
                      seed=",".join(map(str, cfg.eval_seeds())))
        log(f"  evaluated {name}/{modality.name.lower()} across "
            f"{len(WEATHER_SUITE)} weathers")
    return results


def run_pipeline(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    """Run the full reference experiment; returns the in-memory artifacts."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.net_spec()

    log("[1/7] local demonstrations and behavioral cloning")
    datasets, locals_ = {}, {}
    for i, modality in enumerate(ModalityId):
        data = collect_demonstrations(cfg.robot_seeds(i), modality,
                                      cfg["data.steps_per_track"],
                                      **cfg.track_kwargs())
        save_demonstrations(out / f"demos_{modality.name.lower()}.fild", data)
        model, curve = train_bc(data, spec, cfg.train_config())
        (out / f"local_{modality.name.lower()}.filp").write_bytes(
            serialize_params(model))
        write_csv(out / f"curve_local_{modality.name.lower()}.csv",
                  ["epoch", "train_mse", "val_mse"], _curve_rows(curve),
                  "train-local", cfg.digest, seed=cfg["train.seed"])
        datasets[modality], locals_[modality] = data, model
        log(f"  {modality.name.lower()}: N={data.N}, "
            f"val MSE {curve[-1].val_mse:.5f}")

    log("[2/7] cloud scene bank")
    bank = build_scene_bank(cfg.bank_seeds(), cfg["bank.scenes_per_seed"],
                            stride=cfg["bank.stride"], **cfg.track_kwargs())
    save_scene_bank(out / "bank.fils", bank)
    log(f"  M={bank.M}")

    log("[3/7] parameter upload and fusion over HTTP")
    state = CloudState(bank=bank, net_spec=spec, guide_cfg=cfg.guide_config(),
                       server_cfg=cfg.server_config())
    guides = {}
    with ServerThread(state) as base_url:
        with FilClient(base_url) as client:
            for i, modality in enumerate(ModalityId):
                client.hello(f"robot-{i}", modality)
            for round in range(1, cfg["server.fusion_every"] + 1):
                for i, modality in enumerate(ModalityId):
                    m = locals_[modality].copy()
                    m.version = round
                    client.upload(f"robot-{i}", round, m)
            status = client.status()
            log(f"  fusion_count={status['fusion_count']} "
                f"labels_round={status['labels_round']}")
            labels = client.labels()
            write_csv(out / "pseudo_labels.csv",
                      ["scene_id", "label", "round", "n_contributors"],
                      [[l["scene_id"], l["label"], l["round"],
                        l["n_contributors"]] for l in labels["labels"]],
                      "fuse", cfg.digest, seed=labels["round"])
            log("[4/7] guide models")
            for i, modality in enumerate(ModalityId):
                guide, fusion_round = client.request_guide(f"robot-{i}",
                                                           modality)
                guides[modality] = guide
                (out / f"guide_{modality.name.lower()}.filp").write_bytes(
                    serialize_params(guide))
                log(f"  {modality.name.lower()}: fusion round {fusion_round}")

    log("[5/7] layer transfer and fine-tuning")
    transferred = {}
    plan = cfg.transfer_plan()
    for modality in ModalityId:
        model = transfer_init(guides[modality], plan)
        model, curve = fine_tune(model, datasets[modality],
                                 cfg.transfer_config(), lr_scale=plan.lr_scale)
        transferred[modality] = model
        (out / f"transferred_{modality.name.lower()}.filp").write_bytes(
            serialize_params(model))
        write_csv(out / f"curve_transferred_{modality.name.lower()}.csv",
                  ["epoch", "train_mse", "val_mse"], _curve_rows(curve),
                  "transfer", cfg.digest, seed=cfg["train.seed"])
        log(f"  {modality.name.lower()}: val MSE {curve[0].val_mse:.5f} "
            f"-> {curve[-1].val_mse:.5f}")

    log("[6/7] paired scratch-vs-transferred comparison")
    compare_dir = out / "compare"
    comparisons = {}
    for modality in ModalityId:
        result = compare_training(guides[modality], datasets[modality], plan,
                                  cfg.transfer_config(),
                                  seeds=list(range(cfg["compare.seeds"])))
        comparisons[modality] = result
        mdir = compare_dir / modality.name.lower()
        write_csv(mdir / "curves.csv",
                  ["seed", "arm", "epoch", "train_mse", "val_mse"],
                  [[c.seed, c.arm, c.epoch, c.train_mse, c.val_mse]
                   for c in result.curves],
                  "compare", cfg.digest,
                  seed=",".join(map(str, range(cfg["compare.seeds"]))))
        rows = [[s, result.epoch0_val[s]["scratch"],
                 result.epoch0_val[s]["transferred"],
                 result.final_val[s]["scratch"],
                 result.final_val[s]["transferred"],
                 result.batch_digests[(s, "scratch")][:12]]
                for s in sorted(result.epoch0_val)]
        rows.append(["mean", "", "", result.mean_final["scratch"],
                     result.mean_final["transferred"], ""])
        write_csv(mdir / "summary.csv",
                  ["seed", "scratch_epoch0_val", "transferred_epoch0_val",
                   "scratch_final_val", "transferred_final_val",
                   "batch_digest"],
                  rows, "compare", cfg.digest)
        log(f"  {modality.name.lower()}: head-start wins "
            f"{result.head_start_wins()}/{cfg['compare.seeds']}, mean final "
            f"scratch={result.mean_final['scratch']:.5f} vs "
            f"transferred={result.mean_final['transferred']:.5f}")

    log("[7/7] closed-loop weather evaluation and report")
    controllers = {}
    for modality in ModalityId:
        controllers[("general", modality)] = locals_[modality]
        controllers[("transferred", modality)] = transferred[modality]
    eval_dir = out / "evals"
    reports = evaluate_suite(cfg, controllers, eval_dir, log=log)
    _write_report(cfg, out, out / "report")

    return {"datasets": datasets, "locals": locals_, "guides": guides,
            "transferred": transferred, "comparisons": comparisons,
            "reports": reports, "bank": bank}


def _write_report(cfg, in_dir: Path, out: Path):
    from .reports import read_csv
    from .cli import EVAL_COLUMNS

    rows = []
    for path in sorted(Path(in_dir).glob("**/*.csv")):
        _, columns, data = read_csv(path)
        if columns == EVAL_COLUMNS:
            rows.extend(dict(zip(columns, r)) for r in data
                        if r[columns.index("seed")] == "all")
    table1 = [[r["controller"], r["modality"], r["hit_obstacle_rate"],
               r["miss_turn_rate"], r["straight_mistake_rate"]]
              for r in rows if r["weather"] == "none"]
    write_csv(out / "table1.csv",
              ["controller", "modality", "hit_obstacle_rate",
               "miss_turn_rate", "straight_mistake_rate"],
              table1, "report", cfg.digest)
    by_ctrl = {}
    for r in rows:
        key = (r["controller"], r["modality"])
        by_ctrl.setdefault(key, {})[r["weather"]] = r["total_mistake_rate"]
    table2 = [[c, m] + [cell.get(w, "") for w in WEATHER_SUITE]
              for (c, m), cell in sorted(by_ctrl.items())]
    write_csv(out / "table2.csv",
              ["controller", "modality", "error_rate_normal",
               "error_rate_rain", "error_rate_snow", "error_rate_fog",
               "error_rate_dust"],
              table2, "report", cfg.digest)
    for path in sorted(Path(in_dir).glob("**/curves.csv")):
        _, columns, data = read_csv(path)
        series = {}
        for r in data:
            row = dict(zip(columns, r))
            series.setdefault(row["arm"], {}).setdefault(
                int(row["epoch"]), []).append(float(row["val_mse"]))
        chart = {arm: sorted((e, float(np.mean(v))) for e, v in pts.items())
                 for arm, pts in series.items()}
        svg_line_chart(out / (path.parent.name + "_curves.svg"), chart,
                       f"Validation MSE ({path.parent.name})", "epoch",
                       "val MSE")
