"""Print the network depth table as aligned text, one row per (n, construction).

    python3 scripts/depth_table.py [--n 16 1024 10450 65536] [--k-max 8]
"""
import argparse

from difftopk.selnet import depth_table, reference_depth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[16, 1024, 10450, 65536])
    ap.add_argument("--k-max", type=int, default=8)
    args = ap.parse_args()
    rows = depth_table(args.n, range(1, args.k_max + 1))
    header = ["n", "construction"] + [f"k={k}" for k in range(1, args.k_max + 1)]
    print(f"{header[0]:>8}  {header[1]:<20}  " + "  ".join(f"{h:>8}" for h in header[2:]))
    for n in args.n:
        for construction in ("splitter-selection", "classic-selection", "full-sort"):
            cells = {r["k"]: r for r in rows if r["n"] == n and r["construction"] == construction}
            text = []
            for k in range(1, args.k_max + 1):
                r = cells.get(k) or cells.get(None)
                ref = reference_depth(n, r["k"], construction)
                mark = "" if ref in (None, r["depth"]) else "*"
                text.append(f"{r['depth']}{mark}".rjust(8))
            print(f"{n:>8}  {construction:<20}  " + "  ".join(text))
    print("* differs from the reference depth")


if __name__ == "__main__":
    main()
