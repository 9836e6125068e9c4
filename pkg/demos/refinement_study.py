"""First-order duality gap under joint (h, dt) refinement, printed as a table.

Pass ``--order 2`` for the second-order adjoint (a few minutes).
"""

import argparse

from viscoadjoint.verify import dot_test


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--order", type=int, default=1, choices=(1, 2))
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    rep = dot_test("pde-continuous", args.order, trials=args.trials)
    print(f"{'n':>4} {'nt':>5} {'trial':>5} {'normalised gap':>15} {'relative gap':>13}")
    for n, nt, k, _, _, norm, rel in rep.rows:
        print(f"{n:4d} {nt:5d} {k:5d} {norm:15.3e} {rel:13.3e}")
    print(rep.line(), f"observed_order={rep.metrics['observed_order']:.2f}")
    if args.csv:
        rep.write_csv(args.csv)


if __name__ == "__main__":
    main()
