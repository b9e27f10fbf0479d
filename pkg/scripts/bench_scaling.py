"""Time the k-row rank-matrix product against the full product and fit
log-log scaling exponents.

    python3 scripts/bench_scaling.py [--n 16 64 256 1024] [--k 5] [--repeats 5]
"""
import argparse

from difftopk.bench import bench_eq3, scaling_exponents


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[16, 64, 256, 1024])
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    results = bench_eq3(args.n, args.k, repeats=args.repeats)
    print(f"{'n':>6}  {'scheme':<12} {'layers':>6}  {'median ms':>10}")
    for r in results:
        print(f"{r.n:>6}  {r.operator:<12} {r.iterations:>6}  {1e3 * r.median_time:>10.3f}")
    for scheme, slope in scaling_exponents(results).items():
        print(f"exponent {scheme}: {slope:.2f}")


if __name__ == "__main__":
    main()
