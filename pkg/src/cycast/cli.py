"""Command-line surface tying the pipeline together.

Every command reads the run configuration (flags > file > defaults), writes
its artifacts under the configured output directory and drops a manifest
recording inputs, outputs, config hash and seed.  Failures exit nonzero
with a single machine-parseable ``CYCAST-ERROR: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timedelta, timezone

import numpy as np

from . import __version__
from . import explain as explain_mod
from . import ingest, nowcast, pipeline, profiles, structsim, synth, verify
from .config import RunConfig, config_dict, config_hash, load_config

logger = logging.getLogger(__name__)

_TIME_FMT = "%Y-%m-%dT%H:%M:%SZ"


def _parse_time(text: str) -> datetime:
    for fmt in (_TIME_FMT, "%Y-%m-%dT%H:%M", "%Y%m%d%H"):
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            continue
    raise ValueError(f"unrecognized time {text!r}; use e.g. 2021-08-03T12:00Z or 2021080312")


class _Run:
    """Output-directory bookkeeping: advisory lock plus manifest."""

    def __init__(self, command: str, cfg: RunConfig, seed=None):
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.out_dir = cfg.paths.output_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.lock_path = os.path.join(self.out_dir, ".cycast.lock")
        if os.path.exists(self.lock_path):
            logger.warning("output dir %s appears in use (lock file present)", self.out_dir)
        with open(self.lock_path, "w") as fh:
            fh.write(f"{command} pid={os.getpid()}\n")

    def read(self, path: str) -> str:
        self.inputs.append(path)
        return path

    def write(self, path: str) -> str:
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        import torch

        manifest = {
            "command": self.command,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "inputs": sorted(set(self.inputs)),
            "outputs": sorted(set(self.outputs)),
            "versions": {
                "cycast": __version__,
                "numpy": np.__version__,
                "torch": torch.__version__,
            },
        }
        path = os.path.join(self.out_dir, f"manifest_{self.command.replace('-', '_')}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        if os.path.exists(self.lock_path):
            os.remove(self.lock_path)


def _data_path(cfg: RunConfig, name: str, override: str | None = None) -> str:
    return override or os.path.join(cfg.paths.data_dir, name)


def _out_path(cfg: RunConfig, name: str, override: str | None = None) -> str:
    return override or os.path.join(cfg.paths.output_dir, name)


def _ckpt_path(cfg: RunConfig, name: str, override: str | None = None) -> str:
    return override or os.path.join(cfg.paths.checkpoint_dir, name)


# ---------------------------------------------------------------------------
# Data plumbing shared by commands


def _load_splits(path: str) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _truth_series(points) -> dict[datetime, float]:
    kept = ingest.lifetime_filter(points)
    if len(kept) < 2:
        return {}
    return {p.time: float(p.vmax) for p in ingest.interpolate_track(kept, timedelta(hours=2))}


def _operational_series(points) -> dict[datetime, float]:
    if len(points) < 2:
        return {}
    return {p.time: float(p.vmax) for p in ingest.interpolate_track(points, timedelta(hours=2))}


def _storm_data_from_files(run: _Run, cfg: RunConfig, storm_ids, profiles_path=None,
                           hurdat2_path=None, adeck_path=None, ships_path=None):
    prof_path = run.read(_out_path(cfg, "profiles.csv", profiles_path))
    profiles_by_storm = profiles.read_profiles_csv(prof_path)
    with open(run.read(_data_path(cfg, "best_track.hurdat2", hurdat2_path)), encoding="utf-8") as fh:
        best = {h.storm_id: pts for h, pts in ingest.parse_hurdat2(fh.read())}
    with open(run.read(_data_path(cfg, "adeck.dat", adeck_path)), encoding="utf-8") as fh:
        carq = ingest.parse_adeck_carq(fh.read())
    shear_path = _data_path(cfg, "ships.txt", ships_path)
    shear_by_storm: dict[str, dict] = {}
    if os.path.exists(shear_path):
        with open(run.read(shear_path), encoding="utf-8") as fh:
            for rec in ingest.parse_ships_shear(fh.read(), cfg.ships):
                shear_by_storm.setdefault(rec.storm_id, {})[rec.time] = (rec.magnitude, rec.direction)
    carq_by_storm: dict[str, list] = {}
    for p in carq:
        carq_by_storm.setdefault(p.storm_id, []).append(p)

    out = []
    for sid in storm_ids:
        if sid not in profiles_by_storm:
            raise ValueError(f"no profiles for storm {sid} in {prof_path}")
        out.append(
            pipeline.StormData(
                storm_id=sid,
                profiles_by_time=profiles_by_storm[sid],
                truth_2h=_truth_series(best.get(sid, [])),
                operational_2h=_operational_series(carq_by_storm.get(sid, [])),
                shear_by_time=shear_by_storm.get(sid, {}),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg: RunConfig) -> int:
    run = _Run("synth", cfg, seed=args.seed)
    n = args.storms or cfg.synth.n_storms
    corpus = synth.gen_corpus(n, args.seed)
    data_dir = cfg.paths.data_dir
    stamps_dir = os.path.join(data_dir, "stamps")
    os.makedirs(stamps_dir, exist_ok=True)

    headers, carq_lines, shear_records = [], [], []
    for storm in corpus.all_storms():
        sdir = os.path.join(stamps_dir, storm.storm_id)
        os.makedirs(sdir, exist_ok=True)
        for stamp in storm.stamps:
            path = os.path.join(sdir, stamp.time.strftime("%Y%m%d%H%M") + ".stamp")
            ingest.store_stamp(stamp, path)
        run.write(sdir)
        headers.append(
            (ingest.StormHeader(storm.storm_id, "SYNTH", len(storm.best_track)), storm.best_track)
        )
        carq_lines.extend(synth.operational_series(storm, cfg.synth.operational_noise_kt))
        shear_records.extend(storm.shear)

    best_path = run.write(os.path.join(data_dir, "best_track.hurdat2"))
    with open(best_path, "w", encoding="utf-8") as fh:
        fh.write(ingest.format_hurdat2(headers))
    adeck_path = run.write(os.path.join(data_dir, "adeck.dat"))
    with open(adeck_path, "w", encoding="utf-8") as fh:
        fh.write(ingest.format_adeck_carq(carq_lines))
    ships_path = run.write(os.path.join(data_dir, "ships.txt"))
    with open(ships_path, "w", encoding="utf-8") as fh:
        fh.write(ingest.format_ships(shear_records, cfg.ships))
    splits = {
        "train": [s.storm_id for s in corpus.train],
        "validation": [s.storm_id for s in corpus.validation],
        "test": [s.storm_id for s in corpus.test],
    }
    splits_path = run.write(os.path.join(data_dir, "splits.json"))
    with open(splits_path, "w", encoding="utf-8") as fh:
        json.dump(splits, fh, indent=1)
        fh.write("\n")
    run.finish()
    print(f"synth: {n} storms -> {data_dir}")
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    run = _Run("ingest", cfg)
    import csv as csv_mod

    def dump_points(points, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv_mod.writer(fh)
            w.writerow(["storm_id", "time", "lat", "lon", "vmax_kt", "status", "source"])
            for p in points:
                w.writerow([
                    p.storm_id, p.time.strftime(_TIME_FMT), p.lat, p.lon,
                    "" if p.vmax is None else p.vmax, p.status.value, p.source.value,
                ])

    if args.hurdat2:
        with open(run.read(args.hurdat2), encoding="utf-8") as fh:
            storms = ingest.parse_hurdat2(fh.read())
        points = [p for _, pts in storms for p in pts]
        dump_points(points, run.write(_out_path(cfg, "best_track.csv")))
    if args.adeck:
        with open(run.read(args.adeck), encoding="utf-8") as fh:
            points = ingest.parse_adeck_carq(fh.read())
        dump_points(points, run.write(_out_path(cfg, "operational.csv")))
    if args.ships:
        with open(run.read(args.ships), encoding="utf-8") as fh:
            records = ingest.parse_ships_shear(fh.read(), cfg.ships)
        path = run.write(_out_path(cfg, "shear.csv"))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv_mod.writer(fh)
            w.writerow(["storm_id", "time", "magnitude_kt", "direction_deg"])
            for r in records:
                w.writerow([r.storm_id, r.time.strftime(_TIME_FMT), r.magnitude,
                            "" if r.direction is None else r.direction])
    run.finish()
    return 0


def cmd_extract_orb(args, cfg: RunConfig) -> int:
    run = _Run("extract-orb", cfg)
    stamps_dir = run.read(args.stamps or os.path.join(cfg.paths.data_dir, "stamps"))
    out_path = run.write(_out_path(cfg, "profiles.csv"))
    first = True
    n = 0
    for root, _dirs, files in sorted(os.walk(stamps_dir)):
        for name in sorted(files):
            if not name.endswith(".stamp"):
                continue
            stamp = ingest.load_stamp(os.path.join(root, name))
            ps = profiles.compute_radial_profiles(stamp)
            profiles.write_profiles_csv(out_path, stamp.storm_id, [ps], append=not first)
            first = False
            n += 1
    if n == 0:
        raise ValueError(f"no .stamp files under {stamps_dir}")
    run.finish()
    print(f"extract-orb: {n} stamps -> {out_path}")
    return 0


def cmd_train_sim(args, cfg: RunConfig) -> int:
    run = _Run("train-sim", cfg, seed=args.seed)
    prof_path = run.read(_out_path(cfg, "profiles.csv", args.profiles))
    by_storm = profiles.read_profiles_csv(prof_path)
    splits = _load_splits(run.read(_data_path(cfg, "splits.json", args.splits)))
    window_sets = [
        pipeline.sim_windows_from_profiles(by_storm[sid])
        for sid in splits["train"] if sid in by_storm
    ]
    hold_sets = [
        pipeline.sim_windows_from_profiles(by_storm[sid])
        for sid in splits["validation"] if sid in by_storm
    ]
    windows = np.concatenate([w for w in window_sets if w.size]) if window_sets else np.empty(0)
    holdout = np.concatenate([w for w in hold_sets if w.size]) if hold_sets else None
    model = structsim.train(windows, cfg.structsim, seed=args.seed, holdout_degc=holdout)
    ckpt = run.write(_ckpt_path(cfg, "structsim.pt", args.checkpoint))
    os.makedirs(os.path.dirname(ckpt) or ".", exist_ok=True)
    structsim.save_checkpoint(model, ckpt)
    _write_training_log(model.training_log, run.write(_out_path(cfg, "train_sim_log.csv")))
    run.finish()
    best = min(e["holdout_nll"] for e in model.training_log)
    print(f"train-sim: {windows.shape[0]} windows, best holdout NLL {best:.4f} -> {ckpt}")
    return 0


def cmd_train_nowcast(args, cfg: RunConfig) -> int:
    run = _Run("train-nowcast", cfg, seed=args.seed)
    prof_path = run.read(_out_path(cfg, "profiles.csv", args.profiles))
    by_storm = profiles.read_profiles_csv(prof_path)
    with open(run.read(_data_path(cfg, "best_track.hurdat2", args.hurdat2)), encoding="utf-8") as fh:
        best = {h.storm_id: pts for h, pts in ingest.parse_hurdat2(fh.read())}
    splits = _load_splits(run.read(_data_path(cfg, "splits.json", args.splits)))

    def pairs(storm_ids):
        feats, targets = [], []
        for sid in storm_ids:
            if sid not in by_storm or sid not in best:
                continue
            series = _truth_series(best[sid])
            f, y = pipeline.nowcast_pairs(
                by_storm[sid], series, series, delta_resolution=cfg.nowcast.delta_resolution
            )
            feats.extend(f)
            targets.extend(y)
        return feats, np.array(targets)

    train_feats, train_y = pairs(splits["train"])
    val_feats, val_y = pairs(splits["validation"])
    holdout = (val_feats, val_y) if val_feats else None
    model = nowcast.train(train_feats, train_y, cfg.nowcast, seed=args.seed, holdout=holdout)
    ckpt = run.write(_ckpt_path(cfg, "nowcast.pt", args.checkpoint))
    os.makedirs(os.path.dirname(ckpt) or ".", exist_ok=True)
    nowcast.save_checkpoint(model, ckpt)
    _write_training_log(model.training_log, run.write(_out_path(cfg, "train_nowcast_log.csv")))
    run.finish()
    best_mse = min(e["holdout_mse"] for e in model.training_log)
    print(f"train-nowcast: {len(train_feats)} pairs, best holdout MSE {best_mse:.2f} -> {ckpt}")
    return 0


def _write_training_log(log: list[dict], path: str) -> None:
    import csv as csv_mod

    if not log:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv_mod.DictWriter(fh, fieldnames=list(log[0].keys()))
        w.writeheader()
        w.writerows(log)


def _load_models(run, cfg, sim_path=None, now_path=None):
    sim_model = structsim.load_checkpoint(run.read(_ckpt_path(cfg, "structsim.pt", sim_path)))
    now_model = nowcast.load_checkpoint(run.read(_ckpt_path(cfg, "nowcast.pt", now_path)))
    return sim_model, now_model


def cmd_forecast(args, cfg: RunConfig) -> int:
    run = _Run("forecast", cfg, seed=args.seed)
    sim_model, now_model = _load_models(run, cfg, args.sim_checkpoint, args.nowcast_checkpoint)
    (storm,) = _storm_data_from_files(
        run, cfg, [args.storm], profiles_path=args.profiles, adeck_path=args.adeck
    )
    t = _parse_time(args.time)
    members = args.members or cfg.ensemble.case_members
    ens = pipeline.forecast(
        sim_model, now_model, storm.profiles_by_time, storm.operational_2h,
        t, args.lead, members, args.seed,
        chain_intensity=cfg.ensemble.chain_intensity, storm_id=args.storm,
    )
    created = pipeline.emit_guidance(ens, cfg.paths.output_dir)
    for path in created:
        run.write(path)
    run.finish()
    print(f"forecast: {args.storm} {t.strftime(_TIME_FMT)} +{args.lead}h "
          f"mean {ens.mean_intensity:.1f} kt spread {ens.spread:.1f} kt ({members} members)")
    return 0


def cmd_verify(args, cfg: RunConfig) -> int:
    run = _Run("verify", cfg, seed=args.seed)
    sim_model, now_model = _load_models(run, cfg, args.sim_checkpoint, args.nowcast_checkpoint)
    splits = _load_splits(run.read(_data_path(cfg, "splits.json", args.splits)))
    storm_ids = args.storms.split(",") if args.storms else splits["test"]
    storms = _storm_data_from_files(run, cfg, storm_ids, profiles_path=args.profiles,
                                    adeck_path=args.adeck, ships_path=args.ships)
    members = args.members or cfg.ensemble.bulk_members
    leads = [int(x) for x in args.leads.split(",")]

    all_records = []
    guidance_path = run.write(_out_path(cfg, "guidance_records.jsonl"))
    open(guidance_path, "w").close()
    traj_scores = {}
    for lead in leads:
        result = pipeline.run_bulk_verification(
            sim_model, now_model, storms, lead, members, args.seed,
            stride_h=args.stride, max_anchors_per_storm=args.max_anchors,
            chain_intensity=cfg.ensemble.chain_intensity,
        )
        pipeline.write_guidance_records(result.ensembles, guidance_path, append=True)
        all_records.extend(result.records)
        traj_scores[f"structural_{lead}h"] = result.trajectory_score
        traj_scores[f"persistence_{lead}h"] = result.persistence_trajectory_score
        score = verify.intensity_score(
            [r.prediction for r in result.records], [r.truth for r in result.records]
        )
        base = verify.intensity_score(
            [r.prediction for r in result.baseline_records],
            [r.truth for r in result.baseline_records],
        )
        print(f"lead {lead:2d} h: RMSE {score.rmse:.2f} MAE {score.mae:.2f} "
              f"Bias {score.bias:+.2f} kt (n={score.n}; persistence MAE {base.mae:.2f})")

    tables = verify.binned_verification(all_records)
    txt_path = run.write(_out_path(cfg, "verification_tables.txt"))
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(verify.format_tables(tables))
    verify.write_tables_csv(tables, run.write(_out_path(cfg, "verification_tables.csv")))
    verify.write_trajectory_scores_csv(traj_scores, run.write(_out_path(cfg, "trajectory_scores.csv")))
    run.finish()
    return 0


def cmd_explain(args, cfg: RunConfig) -> int:
    run = _Run("explain", cfg, seed=args.seed)
    now_model = nowcast.load_checkpoint(run.read(_ckpt_path(cfg, "nowcast.pt", args.nowcast_checkpoint)))
    (storm,) = _storm_data_from_files(run, cfg, [args.storm], profiles_path=args.profiles,
                                      adeck_path=args.adeck)
    t = _parse_time(args.time)
    traj = profiles.assemble_trajectory(storm.profiles_by_time, t)
    series = storm.operational_2h if args.intensity_source == "operational" else storm.truth_2h
    feats = nowcast.build_features(traj, series, t, delta_resolution=now_model.config.delta_resolution)

    sal = explain_mod.gradient_saliency(now_model, feats)
    stamp = t.strftime("%Y%m%d%H")
    fig_path = run.write(_out_path(cfg, f"saliency_{args.storm}_{stamp}.png"))
    explain_mod.save_saliency_figure(sal, fig_path)
    explain_mod.write_channel_table(
        sal.channel_totals, run.write(_out_path(cfg, f"saliency_channels_{args.storm}_{stamp}.csv")),
        value_name="saliency_sum",
    )
    shap = explain_mod.channel_shapley(
        now_model, feats, n_samples=args.shapley_samples, rng=np.random.default_rng(args.seed)
    )
    explain_mod.write_channel_table(
        shap.values, run.write(_out_path(cfg, f"shapley_channels_{args.storm}_{stamp}.csv")),
        value_name="shapley_kt",
    )
    run.finish()
    print(f"explain: saliency + shapley for {args.storm} at {t.strftime(_TIME_FMT)}")
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    run = _Run("render", cfg)
    prof_path = run.read(_out_path(cfg, "profiles.csv", args.profiles))
    by_storm = profiles.read_profiles_csv(prof_path)
    if args.storm not in by_storm:
        raise ValueError(f"no profiles for storm {args.storm}")
    t = _parse_time(args.time)
    traj = profiles.assemble_trajectory(by_storm[args.storm], t)
    out = run.write(_out_path(cfg, f"hovmoller_{args.storm}_{t.strftime('%Y%m%d%H')}.png"))
    profiles.render_hovmoller(traj, out)
    run.finish()
    print(f"render: {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cycast",
        description="Short-term TC structure and intensity guidance from IR stamps",
    )
    parser.add_argument("--config", help="run-configuration JSON (or set CYCAST_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--storms", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse raw track/shear files to CSV")
    p.add_argument("--hurdat2")
    p.add_argument("--adeck")
    p.add_argument("--ships")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("extract-orb", help="compute radial profiles from stamps")
    p.add_argument("--stamps")
    p.set_defaults(func=cmd_extract_orb)

    p = sub.add_parser("train-sim", help="train the structural simulator")
    p.add_argument("--profiles")
    p.add_argument("--splits")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_sim)

    p = sub.add_parser("train-nowcast", help="train the intensity nowcaster")
    p.add_argument("--profiles")
    p.add_argument("--hurdat2")
    p.add_argument("--splits")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_nowcast)

    p = sub.add_parser("forecast", help="ensemble forecast for one storm/time")
    p.add_argument("--storm", required=True)
    p.add_argument("--time", required=True)
    p.add_argument("--lead", type=int, choices=(6, 12), default=6)
    p.add_argument("--members", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profiles")
    p.add_argument("--adeck")
    p.add_argument("--sim-checkpoint")
    p.add_argument("--nowcast-checkpoint")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("verify", help="bulk verification over a storm split")
    p.add_argument("--leads", default="6,12")
    p.add_argument("--members", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--storms", help="comma-separated storm ids (default: test split)")
    p.add_argument("--stride", type=int, default=6)
    p.add_argument("--max-anchors", type=int)
    p.add_argument("--splits")
    p.add_argument("--profiles")
    p.add_argument("--adeck")
    p.add_argument("--ships")
    p.add_argument("--sim-checkpoint")
    p.add_argument("--nowcast-checkpoint")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("explain", help="saliency and channel attribution")
    p.add_argument("--storm", required=True)
    p.add_argument("--time", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapley-samples", type=int, default=64)
    p.add_argument("--intensity-source", choices=("best", "operational"), default="operational")
    p.add_argument("--profiles")
    p.add_argument("--adeck")
    p.add_argument("--nowcast-checkpoint")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("render", help="Hovmoller raster for one storm/time")
    p.add_argument("--storm", required=True)
    p.add_argument("--time", required=True)
    p.add_argument("--profiles")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"CYCAST-ERROR: config: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except Exception as exc:  # surface a single parseable line, nonzero exit
        print(f"CYCAST-ERROR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
