"""Command-line entry point: reproducible experiments end to end.

Data generation and training run locally; upload/fuse/request-guide are thin
HTTP calls against a running cloud service; ``pipeline`` wires the whole
reference experiment together (spinning up an in-process server) and writes
every artifact under one output directory.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import world as sim
from .client import CloudError, FilClient
from .config import ExperimentConfig
from .fusion import build_scene_bank, load_scene_bank, save_scene_bank
from .imitation import (
    collect_demonstrations,
    evaluate_offline,
    load_demonstrations,
    save_demonstrations,
    train_bc,
)
from .nn import deserialize_params, serialize_params
from .obs import ModalityId
from .reports import read_csv, svg_line_chart, write_csv
from .transfer import compare_training, fine_tune, transfer_init
from .world import EvalReport, WeatherPerturbation, run_episode

WEATHER_SUITE = ("none", "rain", "snow", "fog", "dust")


def _sidecar(path, subcommand, cfg, seed="n/a"):
    Path(str(path) + ".meta").write_text(
        f"subcommand={subcommand}\nconfig={cfg.digest}\nseed={seed}\n")


def _load_model(path):
    return deserialize_params(Path(path).read_bytes())


def _save_model(path, model, subcommand, cfg, seed="n/a"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_params(model))
    _sidecar(path, subcommand, cfg, seed)


def cmd_gen_tracks(args):
    cfg = ExperimentConfig.load(args.config)
    rows = []
    roles = [("robot", s) for i in range(cfg["server.robots"])
             for s in cfg.robot_seeds(i)]
    roles += [("bank", s) for s in cfg.bank_seeds()]
    roles += [("eval", s) for s in cfg.eval_seeds()]
    for role, seed in roles:
        w = sim.generate_track(seed, **cfg.track_kwargs())
        sim.validate_track(w.geometry)
        arcs = [s for s in w.geometry.segments if s.kind == "arc"]
        rows.append([role, seed, round(w.geometry.total_length, 1), len(arcs),
                     sum(1 for a in arcs if a.sweep > 0),
                     sum(1 for a in arcs if a.sweep < 0),
                     len(w.obstacles)])
    out = Path(args.out) / "tracks.csv"
    write_csv(out, ["role", "seed", "length_m", "turns", "left_turns",
                    "right_turns", "obstacles"], rows, "gen-tracks", cfg.digest)
    print(f"validated {len(rows)} tracks -> {out}")


def cmd_gen_data(args):
    cfg = ExperimentConfig.load(args.config)
    modality = ModalityId.from_name(args.modality)
    seeds = (cfg.robot_seeds(int(modality)) if args.seeds is None
             else [int(s) for s in args.seeds.split(",")])
    data = collect_demonstrations(seeds, modality, cfg["data.steps_per_track"],
                                  **cfg.track_kwargs())
    save_demonstrations(args.out, data)
    _sidecar(args.out, "gen-data", cfg, seed=",".join(map(str, seeds)))
    print(f"{data.N} demonstrations ({modality.name.lower()}) -> {args.out}")


def cmd_build_bank(args):
    cfg = ExperimentConfig.load(args.config)
    bank = build_scene_bank(cfg.bank_seeds(), cfg["bank.scenes_per_seed"],
                            stride=cfg["bank.stride"], **cfg.track_kwargs())
    save_scene_bank(args.out, bank)
    _sidecar(args.out, "build-bank", cfg,
             seed=",".join(map(str, cfg.bank_seeds())))
    print(f"scene bank M={bank.M} -> {args.out}")


def cmd_train_local(args):
    cfg = ExperimentConfig.load(args.config)
    data = load_demonstrations(args.data)
    train_cfg = cfg.train_config(seed=args.seed)
    model, curve = train_bc(data, cfg.net_spec(), train_cfg)
    _save_model(args.out, model, "train-local", cfg, seed=train_cfg.seed)
    if args.curve:
        write_csv(args.curve, ["epoch", "train_mse", "val_mse"],
                  [[c.epoch, c.train_mse, c.val_mse] for c in curve],
                  "train-local", cfg.digest, seed=train_cfg.seed)
    offline = evaluate_offline(model, data)
    print(f"trained {data.modality.name.lower()} policy: "
          f"final val MSE {curve[-1].val_mse:.5f}, "
          f"train-set mistakes {offline.mistake_rate:.3f} -> {args.out}")


def cmd_serve(args):
    from .cloud import CloudState
    from .service import run_server

    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    if args.robots is not None:
        overrides["server.robots"] = args.robots
    if args.freq is not None:
        overrides["server.fusion_every"] = args.freq
    if args.mode is not None:
        overrides["server.mode"] = {"sync": "synchronous",
                                    "async": "asynchronous"}[args.mode]
    if args.listen is not None:
        overrides["server.listen"] = args.listen
    cfg = ExperimentConfig.load(args.config, overrides=overrides)
    bank = load_scene_bank(args.bank)
    state = CloudState(bank=bank, net_spec=cfg.net_spec(),
                       guide_cfg=cfg.guide_config(),
                       server_cfg=cfg.server_config())
    host, _, port = cfg["server.listen"].partition(":")
    print(f"serving bank M={bank.M} on {host}:{port} "
          f"({cfg['server.mode']}, n={cfg['server.robots']}, "
          f"f={cfg['server.fusion_every']})")
    run_server(state, host, int(port))


def _hello_if_needed(client, robot_id, modality):
    try:
        client.hello(robot_id, modality)
    except CloudError as exc:
        if exc.code != "duplicate_robot":
            raise


def cmd_upload(args):
    model = _load_model(args.model)
    modality = (model.modality if model.modality is not None
                else ModalityId.from_name(args.modality))
    with FilClient(args.server) as client:
        _hello_if_needed(client, args.robot_id, modality)
        acked = client.upload(args.robot_id, args.round, model)
    print(f"uploaded {args.model} as {args.robot_id} round {acked}")


def cmd_fuse(args):
    with FilClient(args.server) as client:
        out = client.fuse()
    print(f"fused={out['fused']} fusion_count={out['fusion_count']} "
          f"labels_round={out['labels_round']}")


def cmd_request_guide(args):
    cfg = ExperimentConfig.load(args.config)
    modality = ModalityId.from_name(args.modality)
    with FilClient(args.server) as client:
        _hello_if_needed(client, args.robot_id, modality)
        guide, fusion_round = client.request_guide(args.robot_id, modality)
    _save_model(args.out, guide, "request-guide", cfg,
                seed=f"fusion_round={fusion_round}")
    print(f"guide ({modality.name.lower()}, fusion round {fusion_round}) "
          f"-> {args.out}")


def cmd_transfer(args):
    cfg = ExperimentConfig.load(args.config)
    guide = _load_model(args.guide)
    data = load_demonstrations(args.data)
    plan = cfg.transfer_plan()
    train_cfg = cfg.transfer_config(seed=args.seed)
    model = transfer_init(guide, plan)
    model, curve = fine_tune(model, data, train_cfg, lr_scale=plan.lr_scale)
    _save_model(args.out, model, "transfer", cfg, seed=train_cfg.seed)
    if args.curve:
        write_csv(args.curve, ["epoch", "train_mse", "val_mse"],
                  [[c.epoch, c.train_mse, c.val_mse] for c in curve],
                  "transfer", cfg.digest, seed=train_cfg.seed)
    print(f"fine-tuned guide (frozen below layer {plan.split_index}): "
          f"val MSE {curve[0].val_mse:.5f} -> {curve[-1].val_mse:.5f}")


def _parse_weather(text, cfg):
    kind, _, intensity = text.partition(":")
    if kind == "none":
        return WeatherPerturbation("none", 0.0, cfg["weather.seed"])
    level = float(intensity) if intensity else cfg["weather.intensity"]
    return WeatherPerturbation(kind, level, cfg["weather.seed"])


def evaluate_controller(cfg, controller, modality, weather) -> tuple[EvalReport, list]:
    """Closed-loop evaluation over the configured held-out tracks."""
    total = EvalReport(weather=weather)
    rows = []
    for seed in cfg.eval_seeds():
        w = sim.generate_track(seed, **cfg.track_kwargs())
        _, rep = run_episode(w, controller, modality, weather,
                             max_steps=cfg["eval.max_steps"])
        total = total.merge(rep)
        rows.append([seed, rep.episodes, rep.collisions, rep.turns_encountered,
                     rep.turns_missed, rep.straights_encountered,
                     rep.straights_mistaken, rep.off_track_exits,
                     rep.hit_obstacle_rate, rep.miss_turn_rate,
                     rep.straight_mistake_rate, rep.total_mistake_rate])
    return total, rows


def cmd_evaluate(args):
    cfg = ExperimentConfig.load(args.config)
    if args.expert:
        controller, name = "expert", "expert"
        modality = ModalityId.OCCUPANCY if args.modality is None \
            else ModalityId.from_name(args.modality)
    else:
        controller = _load_model(args.model)
        modality = (controller.modality if controller.modality is not None
                    else ModalityId.from_name(args.modality))
        name = args.name or Path(args.model).stem
    weather = _parse_weather(args.weather, cfg)
    total, rows = evaluate_controller(cfg, controller, modality, weather)
    out_rows = [[name, modality.name.lower(), weather.kind, weather.intensity]
                + row for row in rows]
    out_rows.append([name, modality.name.lower(), weather.kind,
                     weather.intensity, "all", total.episodes, total.collisions,
                     total.turns_encountered, total.turns_missed,
                     total.straights_encountered, total.straights_mistaken,
                     total.off_track_exits, total.hit_obstacle_rate,
                     total.miss_turn_rate, total.straight_mistake_rate,
                     total.total_mistake_rate])
    write_csv(args.out, EVAL_COLUMNS, out_rows, "evaluate", cfg.digest,
              seed=",".join(map(str, cfg.eval_seeds())))
    print(f"{name} [{weather.kind}]: hit={total.hit_obstacle_rate:.3f} "
          f"miss={total.miss_turn_rate:.3f} "
          f"straight={total.straight_mistake_rate:.3f} "
          f"total={total.total_mistake_rate:.3f} -> {args.out}")


EVAL_COLUMNS = ["controller", "modality", "weather", "intensity", "seed",
                "episodes", "collisions", "turns_encountered", "turns_missed",
                "straights_encountered", "straights_mistaken",
                "off_track_exits", "hit_obstacle_rate", "miss_turn_rate",
                "straight_mistake_rate", "total_mistake_rate"]


def cmd_compare(args):
    cfg = ExperimentConfig.load(args.config)
    guide = _load_model(args.guide)
    data = load_demonstrations(args.data)
    seeds = list(range(cfg["compare.seeds"]))
    result = compare_training(guide, data, cfg.transfer_plan(),
                              cfg.transfer_config(), seeds)
    out = Path(args.out)
    write_csv(out / "curves.csv",
              ["seed", "arm", "epoch", "train_mse", "val_mse"],
              [[c.seed, c.arm, c.epoch, c.train_mse, c.val_mse]
               for c in result.curves],
              "compare", cfg.digest, seed=",".join(map(str, seeds)))
    summary_rows = [
        [s, result.epoch0_val[s]["scratch"], result.epoch0_val[s]["transferred"],
         result.final_val[s]["scratch"], result.final_val[s]["transferred"],
         result.batch_digests[(s, "scratch")][:12]]
        for s in seeds]
    summary_rows.append(["mean", "", "", result.mean_final["scratch"],
                         result.mean_final["transferred"], ""])
    write_csv(out / "summary.csv",
              ["seed", "scratch_epoch0_val", "transferred_epoch0_val",
               "scratch_final_val", "transferred_final_val", "batch_digest"],
              summary_rows, "compare", cfg.digest)
    series = {}
    for arm in ("scratch", "transferred"):
        pts = {}
        for c in result.curves:
            if c.arm == arm:
                pts.setdefault(c.epoch, []).append(c.val_mse)
        series[arm] = sorted((e, float(np.mean(v))) for e, v in pts.items())
    svg_line_chart(out / "curves.svg", series,
                   "Validation MSE: scratch vs transferred",
                   "epoch", "val MSE")
    print(f"compared over {len(seeds)} seeds: mean final "
          f"scratch={result.mean_final['scratch']:.5f} "
          f"transferred={result.mean_final['transferred']:.5f} -> {out}")


def cmd_report(args):
    cfg = ExperimentConfig.load(args.config)
    in_dir, out = Path(args.indir), Path(args.out)
    rows = []
    for path in sorted(in_dir.glob("**/*.csv")):
        meta, columns, data = read_csv(path)
        if columns == EVAL_COLUMNS:
            if meta.get("config") not in ("", None, cfg.digest):
                print(f"warning: {path} was produced under config "
                      f"{meta.get('config')}, current is {cfg.digest}",
                      file=sys.stderr)
            rows.extend(dict(zip(columns, r)) for r in data
                        if r[columns.index("seed")] == "all")
    if rows:
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
        print(f"report: {len(table1)} controllers in table1, "
              f"{len(table2)} rows in table2 -> {out}")
    for path in sorted(in_dir.glob("**/curves.csv")):
        meta, columns, data = read_csv(path)
        series = {}
        for r in data:
            row = dict(zip(columns, r))
            series.setdefault(row["arm"], {}).setdefault(
                int(row["epoch"]), []).append(float(row["val_mse"]))
        chart = {arm: sorted((e, float(np.mean(v))) for e, v in pts.items())
                 for arm, pts in series.items()}
        target = out / (path.parent.name + "_curves.svg")
        svg_line_chart(target, chart, f"Validation MSE ({path.parent.name})",
                       "epoch", "val MSE")
        print(f"plot -> {target}")


def cmd_pipeline(args):
    from .pipeline import run_pipeline

    cfg = ExperimentConfig.load(args.config)
    run_pipeline(cfg, Path(args.out))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedsteer",
        description="Federated imitation learning for steering policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None,
                       help="key=value config file (defaults built in)")
        return p

    p = add("gen-tracks", cmd_gen_tracks, help="generate and validate tracks")
    p.add_argument("--out", required=True)

    p = add("gen-data", cmd_gen_data, help="collect expert demonstrations")
    p.add_argument("--modality", required=True,
                   choices=["occupancy", "distance", "semantic"])
    p.add_argument("--seeds", default=None,
                   help="comma-separated track seeds (default: per config)")
    p.add_argument("--out", required=True)

    p = add("build-bank", cmd_build_bank, help="build the cloud scene bank")
    p.add_argument("--out", required=True)

    p = add("train-local", cmd_train_local, help="behavioral cloning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("serve", cmd_serve, help="run the cloud service")
    p.add_argument("--listen", default=None, metavar="ADDR:PORT")
    p.add_argument("--robots", type=int, default=None)
    p.add_argument("--freq", type=int, default=None)
    p.add_argument("--mode", choices=["sync", "async"], default=None)
    p.add_argument("--bank", required=True)

    p = add("upload", cmd_upload, help="upload local parameters to the cloud")
    p.add_argument("--server", required=True)
    p.add_argument("--robot-id", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--round", type=int, default=1)
    p.add_argument("--modality", default="occupancy")

    p = add("fuse", cmd_fuse, help="trigger a fusion round")
    p.add_argument("--server", required=True)

    p = add("request-guide", cmd_request_guide, help="fetch a guide model")
    p.add_argument("--server", required=True)
    p.add_argument("--robot-id", required=True)
    p.add_argument("--modality", required=True,
                   choices=["occupancy", "distance", "semantic"])
    p.add_argument("--out", required=True)

    p = add("transfer", cmd_transfer, help="freeze guide layers and fine-tune")
    p.add_argument("--guide", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = add("evaluate", cmd_evaluate, help="closed-loop evaluation")
    p.add_argument("--model", default=None)
    p.add_argument("--expert", action="store_true")
    p.add_argument("--modality", default=None)
    p.add_argument("--weather", default="none", metavar="KIND[:INTENSITY]")
    p.add_argument("--name", default=None)
    p.add_argument("--out", required=True)

    p = add("compare", cmd_compare, help="scratch vs transferred curves")
    p.add_argument("--guide", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, help="aggregate eval CSVs into tables/plots")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)

    p = add("pipeline", cmd_pipeline, help="full reference experiment")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (FileNotFoundError,) as exc:
        parser.exit(2, f"error: missing input: {exc}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
