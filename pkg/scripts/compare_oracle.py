"""Print unsupervised vs oracle AP for a finished run, plus the cluster-count trajectory."""

import argparse
import json

from lidarseed.pipeline import PipelineConfig, read_reports


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--ratio", type=float, default=0.7, help="required fraction of oracle AP")
    ap.add_argument("--floor", type=float, default=0.6, help="required absolute AP")
    args = ap.parse_args()
    cfg = PipelineConfig.load(args.config)
    d = cfg.stage_dir("eval")
    ours = json.loads((d / "ap.json").read_text())["mean"]["AP"]
    oracle = json.loads((d / "oracle_ap.json").read_text())["mean"]["AP"]
    print(f"AP unsupervised {ours:.4f} oracle {oracle:.4f} ratio {ours / oracle:.3f}")
    ok = ours >= args.floor and ours >= args.ratio * oracle
    for r in read_reports(cfg.stage_dir("iterate") / "reports.jsonl"):
        n100, n90, _ = r.coverage
        print(f"round {r.round:2d} non_empty {n100:5d} clusters_90 {n90:5d} foreground {r.n_foreground}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
