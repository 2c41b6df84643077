"""Exploratory harness for desk-scale environment tuning (not part of the package)."""

import argparse
import json
import sys
import time

import numpy as np

from dispatchsim.config import ExperimentConfig, rng_for
from dispatchsim.geo import generate_city, build_travel_times
from dispatchsim.sim import default_profile, build_shift_plan, sample_day, run_episode
from dispatchsim.policies import NeurAdpPolicy, MyopicPolicy
from dispatchsim.ceilings import direct_ceiling
from dispatchsim.vfa import train_neuradp


def build_world(cfg):
    locs = generate_city(cfg.n_locations, cfg.spread_km, cfg.cluster_count,
                         seed=int(rng_for(cfg.seed, 1).integers(2**31)))
    mat = build_travel_times(locs, cfg.speed_kmh, cfg.noise_fraction,
                             seed=int(rng_for(cfg.seed, 2).integers(2**31)))
    prof = default_profile(cfg.n_epochs, cfg.delta_minutes, cfg.daily_orders, cfg.arrival_sigma)
    plan = build_shift_plan(cfg.n_couriers, prof, cfg.horizon_minutes, cfg.delta_minutes, cfg.shift_length)
    return locs, mat, prof, plan


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--json", type=json.loads, default={})
    ap.add_argument("--train-seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--test-days", type=int, default=6)
    ap.add_argument("--train-days", type=int, default=10)
    args = ap.parse_args()

    cfg = ExperimentConfig(**args.json)
    locs, mat, prof, plan = build_world(cfg)
    direct_times = [mat[0, j] for j in range(1, cfg.n_locations)]
    inter = mat.minutes[1:, 1:]
    inter_nz = inter[inter > 0]
    print(f"mean direct {np.mean(direct_times):.1f} min, median inter-hop {np.median(inter_nz):.1f} min", flush=True)

    train_days = [sample_day(cfg, prof, locs, mat, rng_for(cfg.seed, 10, k)) for k in range(args.train_days)]
    test_days = [sample_day(cfg, prof, locs, mat, rng_for(cfg.seed, 11, k)) for k in range(args.test_days)]

    t0 = time.time()
    net, log = train_neuradp(cfg, mat, plan, train_days, seed=args.train_seed, episodes=args.episodes)
    print(f"trained {args.episodes} eps in {(time.time()-t0)/60:.1f} min", flush=True)

    rows = []
    for day in test_days:
        dcl = direct_ceiling(day, cfg, mat, plan).fulfilled
        tr = run_episode(NeurAdpPolicy(net), day, cfg, mat, plan)
        ip = run_episode(NeurAdpPolicy(None), day, cfg, mat, plan)
        my = run_episode(MyopicPolicy("dc"), day, cfg, mat, plan)
        rows.append((day.total, dcl, tr.total_fulfilled, ip.total_fulfilled, my.total_fulfilled,
                     tr.avg_return_time, my.avg_return_time,
                     tr.avg_inflight_queue, my.avg_inflight_queue))
    arr = np.array(rows)
    adv_tr = (arr[:, 2] - arr[:, 4]) / arr[:, 1] * 100
    adv_ip = (arr[:, 3] - arr[:, 4]) / arr[:, 1] * 100
    print("arrivals direct trained ip0 myopic:", arr[:, :5].mean(axis=0).round(1), flush=True)
    print("fill% trained:", (arr[:, 2] / arr[:, 1] * 100).mean().round(1),
          "myopic:", (arr[:, 4] / arr[:, 1] * 100).mean().round(1))
    print("ADV trained:", adv_tr.round(2).tolist(), "mean", round(adv_tr.mean(), 2))
    print("ADV ip0    : mean", round(adv_ip.mean(), 2))
    print("return_time trained/myopic:", round(arr[:, 5].mean(), 2), round(arr[:, 6].mean(), 2))
    print("queue trained/myopic:", round(arr[:, 7].mean(), 2), round(arr[:, 8].mean(), 2))


if __name__ == "__main__":
    main()
