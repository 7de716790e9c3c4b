"""Collective traffic of one MLP forward pass, rule plan vs same-dim baseline.

Writes CSV to stdout (or --out): one row per (hidden, n_shards, plan).
"""
import argparse
import csv
import sys

from shardwise.audit import mlp_forward_traffic


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hidden", type=int, nargs="+", default=[64, 256, 1024])
    ap.add_argument("--n-shards", type=int, nargs="+", default=[2, 4])
    ap.add_argument("--d-model", type=int, default=16)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--out")
    args = ap.parse_args(argv)

    f = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(f)
    w.writerow(["hidden", "n_shards", "plan", "all_reduce", "all_gather", "payload_bytes", "wire_bytes"])
    for h in args.hidden:
        for n in args.n_shards:
            for name, baseline in (("rule", False), ("same-dim", True)):
                rep, _ = mlp_forward_traffic(h, n, baseline=baseline, d_model=args.d_model, batch=args.batch)
                w.writerow([h, n, name, rep["all_reduce"].count, rep["all_gather"].count,
                            rep.total_payload_bytes, rep.total_wire_bytes])
    if args.out:
        f.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
