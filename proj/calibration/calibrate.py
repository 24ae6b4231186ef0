#!/usr/bin/env python3
"""Runs config variants of the desk suite through the CLI and tabulates
final mean linear accuracy and late-round rolling std per run."""

import argparse
import csv
import os
import shutil
import statistics
import subprocess
import sys
import time
from pathlib import Path

import yaml

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent


def set_key(cfg, dotted, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node[p]
    node[parts[-1]] = value


def series(metrics):
    out = {}
    with open(metrics) as f:
        for row in csv.DictReader(f):
            if row["protocol"] == "linear":
                out.setdefault(row["client"], []).append((int(row["round"]), float(row["value"])))
    return [out[k] for k in sorted(out, key=int)]


def final_acc(s, points=1):
    return statistics.mean(statistics.mean(v for _, v in c[-points:]) for c in s)


def rolling_std(s, rounds, fraction=0.5, window=5):
    per_client = []
    for c in s:
        tail = [v for r, v in c if r + 1 > rounds * (1 - fraction)]
        stds = [statistics.stdev(tail[i:i + window]) for i in range(len(tail) - window + 1)]
        if stds:
            per_client.append(statistics.mean(stds))
    return statistics.mean(per_client) if per_client else float("nan")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("plan", help="YAML list of {name, set: {dotted.key: value}}")
    ap.add_argument("--base", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--cli", default=str(ROOT / "build" / "tools" / "fedskel"))
    ap.add_argument("--work", default="/tmp/fedskel-calibration")
    ap.add_argument("--out", default=None, help="results CSV (default: <plan>.csv next to the plan)")
    args = ap.parse_args()

    plan = yaml.safe_load(open(args.plan))
    base = yaml.safe_load(open(args.base))
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    out = Path(args.out) if args.out else Path(args.plan).with_suffix(".csv")

    # frozen copy of the CLI and its library so rebuilds during a plan do not leak in
    cli = Path(args.cli)
    frozen = work / f"bin-{os.getpid()}"
    frozen.mkdir(exist_ok=True)
    shutil.copy2(cli, frozen / cli.name)
    for lib in (cli.parent.parent / "src").glob("libfedskel.so*"):
        shutil.copy2(lib, frozen / lib.name)
    env = dict(os.environ, LD_LIBRARY_PATH=str(frozen))

    rows = []
    for entry in plan:
        cfg = yaml.safe_load(yaml.safe_dump(base))
        for k, v in (entry.get("set") or {}).items():
            set_key(cfg, k, v)
        name = entry["name"]
        cfg_path = work / f"{name}.yaml"
        run_dir = work / name
        cfg_path.write_text(yaml.safe_dump(cfg, sort_keys=False))
        t0 = time.time()
        proc = subprocess.run([str(frozen / cli.name), "train", "--config", str(cfg_path), "--out", str(run_dir), "--quiet"],
                              capture_output=True, text=True, env=env)
        wall = time.time() - t0
        rounds = cfg["federation"]["rounds"]
        s = series(run_dir / "metrics.csv") if (run_dir / "metrics.csv").exists() else []
        row = {
            "name": name,
            "status": "ok" if proc.returncode == 0 else f"exit{proc.returncode}",
            "final_acc": f"{final_acc(s):.4f}" if s else "",
            "final_acc_last3": f"{final_acc(s, 3):.4f}" if s else "",
            "best_acc": f"{max(statistics.mean(c[i][1] for c in s) for i in range(len(s[0]))):.4f}" if s else "",
            "rolling_std": f"{rolling_std(s, rounds):.4f}" if s else "",
            "per_client": " ".join(f"{c[-1][1]:.3f}" for c in s),
            "wall_s": f"{wall:.0f}",
            "settings": " ".join(f"{k}={v}" for k, v in (entry.get("set") or {}).items()),
        }
        rows.append(row)
        print(",".join(str(v) for v in row.values()), flush=True)
        if proc.returncode != 0:
            print(proc.stderr.strip(), file=sys.stderr)

    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
