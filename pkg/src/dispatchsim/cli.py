"""Experiment orchestration CLI: gen-data, train, evaluate, ceiling, compare."""

from __future__ import annotations

import dataclasses
import json
import math
import pathlib

import click
import numpy as np

from . import ceilings as ceilings_mod
from .config import (
    STREAM_CITY,
    STREAM_MATRIX,
    STREAM_TEST_DAY,
    STREAM_TRAIN_DAY,
    ExperimentConfig,
    rng_for,
)
from .geo import build_travel_times, generate_city, load_locations, load_matrix, save_locations, save_matrix
from .nn import load_checkpoint, restore_qnet, restore_value_net, save_checkpoint
from .policies import DrlPolicy, MyopicPolicy, NeurAdpPolicy, ddqn_train
from .sim import ArrivalProfile, DayStream, build_shift_plan, default_profile, run_episode, sample_day
from .vfa import train_neuradp

POLICY_NAMES = (
    "neuradp",
    "myopic-dc",
    "myopic-df",
    "myopic-ce",
    "myopic-cf",
    "drl-dc",
    "drl-df",
    "drl-ce",
    "drl-cf",
)


def _resolve_config(config_path, out_dir, seed) -> ExperimentConfig:
    if config_path is not None:
        cfg = ExperimentConfig.from_json(config_path)
    else:
        manifest = pathlib.Path(out_dir) / "manifest.json"
        cfg = ExperimentConfig.from_json(manifest) if manifest.exists() else ExperimentConfig()
    if seed is not None:
        cfg = cfg.replaced(seed=seed)
    cfg.validate()
    return cfg


def _workspace(out_dir):
    out = pathlib.Path(out_dir)
    cfg = ExperimentConfig.from_json(out / "manifest.json")
    locations = load_locations(out / "locations.csv")
    matrix = load_matrix(out / "travel_minutes.csv")
    profile = ArrivalProfile.load(out / "arrival_profile.json")
    plan = build_shift_plan(
        cfg.n_couriers, profile, cfg.horizon_minutes, cfg.delta_minutes, cfg.shift_length
    )
    return cfg, locations, matrix, profile, plan


def _load_days(out_dir, kind: str, n: int, n_epochs: int) -> list[DayStream]:
    out = pathlib.Path(out_dir) / "days"
    days = []
    for k in range(n):
        path = out / f"{kind}_{k:03d}.csv"
        if not path.exists():
            raise click.ClickException(
                f"missing day stream {path}; run `dispatchsim gen-data` first"
            )
        days.append(DayStream.load(path, n_epochs))
    return days


def _write_json(path, payload) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _build_policy(name: str, out_dir, cfg, matrix, checkpoint=None):
    if name == "neuradp":
        path = checkpoint or pathlib.Path(out_dir) / "checkpoints" / "neuradp.json"
        if not pathlib.Path(path).exists():
            raise click.ClickException(
                f"no checkpoint at {path}; run `dispatchsim train --policy neuradp` first"
            )
        net = restore_value_net(load_checkpoint(path, "value_net"))
        return NeurAdpPolicy(net, gamma=cfg.gamma)
    if name.startswith("myopic-"):
        return MyopicPolicy(name.split("-", 1)[1])
    if name.startswith("drl-"):
        path = checkpoint or pathlib.Path(out_dir) / "checkpoints" / "ddqn.json"
        if not pathlib.Path(path).exists():
            raise click.ClickException(
                f"no checkpoint at {path}; run `dispatchsim train --policy ddqn` first"
            )
        qnet = restore_qnet(load_checkpoint(path, "ddqn"))
        return DrlPolicy(qnet, name.split("-", 1)[1])
    raise click.ClickException(f"unknown policy {name!r}; choose from {POLICY_NAMES}")


@click.group()
def main():
    """Ultra-fast order dispatching: simulation, training, evaluation."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
def cmd_gen_data(config_path, out_dir, seed):
    """Generate the city, travel times, arrival profile and cached day streams."""
    cfg = _resolve_config(config_path, out_dir, seed)
    out = pathlib.Path(out_dir)
    (out / "days").mkdir(parents=True, exist_ok=True)

    locations = generate_city(
        cfg.n_locations,
        cfg.spread_km,
        cfg.cluster_count,
        seed=int(rng_for(cfg.seed, STREAM_CITY).integers(2**31)),
    )
    matrix = build_travel_times(
        locations,
        cfg.speed_kmh,
        cfg.noise_fraction,
        seed=int(rng_for(cfg.seed, STREAM_MATRIX).integers(2**31)),
    )
    profile = default_profile(cfg.n_epochs, cfg.delta_minutes, cfg.daily_orders, cfg.arrival_sigma)

    save_locations(out / "locations.csv", locations)
    save_matrix(out / "travel_minutes.csv", matrix)
    profile.save(out / "arrival_profile.json")
    cfg.to_json(out / "manifest.json")

    for kind, stream, n in (
        ("train", STREAM_TRAIN_DAY, cfg.n_train_days),
        ("test", STREAM_TEST_DAY, cfg.n_test_days),
    ):
        for k in range(n):
            day = sample_day(cfg, profile, locations, matrix, rng_for(cfg.seed, stream, k))
            day.save(out / "days" / f"{kind}_{k:03d}.csv")
    click.echo(
        f"wrote {cfg.n_locations} locations, {cfg.n_train_days} train days, "
        f"{cfg.n_test_days} test days to {out}"
    )


@main.command("train")
@click.option("--out-dir", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--policy", type=click.Choice(["neuradp", "ddqn"]), default="neuradp")
@click.option("--episodes", type=int, default=None, help="override the configured episode count")
def cmd_train(out_dir, seed, policy, episodes):
    """Train a policy on the cached training days and write a checkpoint."""
    cfg, locations, matrix, profile, plan = _workspace(out_dir)
    if seed is not None:
        cfg = cfg.replaced(seed=seed)
    days = _load_days(out_dir, "train", cfg.n_train_days, cfg.n_epochs)
    out = pathlib.Path(out_dir)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)

    if policy == "neuradp":
        net, log = train_neuradp(cfg, matrix, plan, days, cfg.seed, episodes=episodes)
        save_checkpoint(
            out / "checkpoints" / "neuradp.json",
            net,
            "value_net",
            meta={"seed": cfg.seed, "episodes": episodes if episodes is not None else cfg.train_episodes},
        )
        with open(out / "logs" / "train_log.jsonl", "w") as fh:
            for entry in log:
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")
        click.echo(f"trained value net: {len(log)} updates, checkpoint in {out / 'checkpoints'}")
    else:
        qnet = ddqn_train(cfg, matrix, plan, days, cfg.seed, episodes=episodes)
        save_checkpoint(
            out / "checkpoints" / "ddqn.json",
            qnet,
            "ddqn",
            meta={"seed": cfg.seed, "episodes": episodes if episodes is not None else cfg.ddqn_episodes},
        )
        click.echo(f"trained ddqn, checkpoint in {out / 'checkpoints'}")


def _evaluate_policy(name, policy, cfg, matrix, plan, days):
    per_day = []
    for k, day in enumerate(days):
        metrics = run_episode(policy, day, cfg, matrix, plan)
        row = {"day": k, "arrivals": day.total}
        row.update(metrics.to_dict())
        per_day.append(row)
    fulfilled = np.array([d["total_fulfilled"] for d in per_day], dtype=float)
    aggregate = {
        "mean_fulfilled": float(fulfilled.mean()),
        "std_fulfilled": float(fulfilled.std()),
        "mean_lost": float(np.mean([d["total_lost"] for d in per_day])),
        "mean_return_time": float(np.mean([d["avg_return_time"] for d in per_day])),
        "mean_inflight_queue": float(np.mean([d["avg_inflight_queue"] for d in per_day])),
        "mean_at_depot": float(np.mean([d["avg_at_depot"] for d in per_day])),
        "mean_accepted_direct": float(np.mean([d["avg_accepted_direct"] for d in per_day])),
    }
    return {"policy": name, "seed": cfg.seed, "per_day": per_day, "aggregate": aggregate}


def _attach_fill(report, ceiling_values):
    denom = float(np.mean(ceiling_values))
    fulfilled = np.array([d["total_fulfilled"] for d in report["per_day"]], dtype=float)
    report["aggregate"]["fill_pct_mean"] = float(fulfilled.mean() / denom * 100.0)
    report["aggregate"]["fill_pct_std"] = float(fulfilled.std() / denom * 100.0)
    report["aggregate"]["ceiling_mean"] = denom


def _ceiling_values(out_dir, kind: str):
    path = pathlib.Path(out_dir) / "reports" / "ceiling.json"
    if not path.exists():
        return None
    with open(path) as fh:
        payload = json.load(fh)
    values = [d.get(kind) for d in payload["days"]]
    if any(v is None for v in values):
        return None
    return values


@main.command("evaluate")
@click.option("--out-dir", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--policy", required=True)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--ceiling", type=click.Choice(["direct", "fixed"]), default="direct")
def cmd_evaluate(out_dir, seed, policy, checkpoint, ceiling):
    """Greedy evaluation of one policy over the cached test days."""
    cfg, locations, matrix, profile, plan = _workspace(out_dir)
    if seed is not None:
        cfg = cfg.replaced(seed=seed)
    days = _load_days(out_dir, "test", cfg.n_test_days, cfg.n_epochs)
    pol = _build_policy(policy, out_dir, cfg, matrix, checkpoint)
    report = _evaluate_policy(policy, pol, cfg, matrix, plan, days)
    values = _ceiling_values(out_dir, ceiling)
    if values is not None:
        report["ceiling"] = ceiling
        _attach_fill(report, values)
    path = pathlib.Path(out_dir) / "reports" / f"eval_{policy}.json"
    _write_json(path, report)
    agg = report["aggregate"]
    fill = f", fill {agg['fill_pct_mean']:.2f}%" if "fill_pct_mean" in agg else ""
    click.echo(
        f"{policy}: mean fulfilled {agg['mean_fulfilled']:.2f} "
        f"± {agg['std_fulfilled']:.2f}{fill} -> {path}"
    )


@main.command("ceiling")
@click.option("--out-dir", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--ceiling", "kinds", type=click.Choice(["direct", "fixed", "both"]), default="direct")
@click.option("--episodes", type=int, default=None, help="training budget per day for the fixed ceiling")
def cmd_ceiling(out_dir, seed, kinds, episodes):
    """Compute performance ceilings over the cached test days."""
    cfg, locations, matrix, profile, plan = _workspace(out_dir)
    if seed is not None:
        cfg = cfg.replaced(seed=seed)
    days = _load_days(out_dir, "test", cfg.n_test_days, cfg.n_epochs)
    path = pathlib.Path(out_dir) / "reports" / "ceiling.json"
    if path.exists():
        with open(path) as fh:
            payload = json.load(fh)
    else:
        payload = {
            "seed": cfg.seed,
            "days": [{"day": k, "arrivals": d.total} for k, d in enumerate(days)],
        }
    if kinds in ("direct", "both"):
        for k, day in enumerate(days):
            payload["days"][k]["direct"] = ceilings_mod.direct_ceiling(day, cfg, matrix, plan).fulfilled
    if kinds in ("fixed", "both"):
        counts = ceilings_mod.fixed_ceiling(days, cfg, matrix, plan, cfg.seed, episodes=episodes)
        for k, count in enumerate(counts):
            payload["days"][k]["fixed"] = count
    _write_json(path, payload)
    click.echo(f"ceiling report -> {path}")


@main.command("compare")
@click.option("--out-dir", required=True, type=click.Path(exists=True))
@click.option("--ceiling", type=click.Choice(["direct", "fixed"]), default="direct")
@click.option("--reference", default="neuradp", help="policy whose increment is reported")
@click.option("--policies", default=None, help="comma-separated list; default: every eval report found")
def cmd_compare(out_dir, ceiling, reference, policies):
    """Tabulate fill percentages and increments of the reference policy."""
    reports_dir = pathlib.Path(out_dir) / "reports"
    values = _ceiling_values(out_dir, ceiling)
    if values is None:
        raise click.ClickException(
            f"no {ceiling} ceiling values; run `dispatchsim ceiling --ceiling {ceiling}` first"
        )
    if policies is None:
        names = sorted(
            p.stem.removeprefix("eval_") for p in reports_dir.glob("eval_*.json")
        )
    else:
        names = [n.strip() for n in policies.split(",") if n.strip()]
    loaded = {}
    for name in names:
        path = reports_dir / f"eval_{name}.json"
        if not path.exists():
            raise click.ClickException(
                f"missing evaluation for {name!r}; run `dispatchsim evaluate --policy {name}` first"
            )
        with open(path) as fh:
            loaded[name] = json.load(fh)
    if reference not in loaded:
        raise click.ClickException(f"reference policy {reference!r} has no evaluation report")

    denom = float(np.mean(values))
    ref_mean = float(
        np.mean([d["total_fulfilled"] for d in loaded[reference]["per_day"]])
    )
    rows = []
    for name in names:
        per_day = np.array([d["total_fulfilled"] for d in loaded[name]["per_day"]], dtype=float)
        rows.append(
            {
                "policy": name,
                "fill_pct_mean": float(per_day.mean() / denom * 100.0),
                "fill_pct_std": float(per_day.std() / denom * 100.0),
                "incr_vs_reference": float((ref_mean - per_day.mean()) / denom * 100.0),
            }
        )
    payload = {
        "ceiling": ceiling,
        "ceiling_mean": denom,
        "reference": reference,
        "rows": rows,
    }
    _write_json(reports_dir / "compare.json", payload)
    click.echo(f"{'policy':<14} {'% filled':>16} {'% incr ' + reference:>18}")
    for row in rows:
        click.echo(
            f"{row['policy']:<14} {row['fill_pct_mean']:>8.2f} ± {row['fill_pct_std']:<5.2f} "
            f"{row['incr_vs_reference']:>15.2f}"
        )


if __name__ == "__main__":
    main()
