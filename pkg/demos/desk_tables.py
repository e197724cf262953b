"""Desk-scale analogs of the BLEU and multimodality tables.

    python3 demos/desk_tables.py            # swap_halves task, all four systems
    python3 demos/desk_tables.py --ambiguous 16 --steps 1500

Takes roughly 5-10 minutes on one CPU core.
"""

import argparse

from reordernat.data import SyntheticTaskSpec
from reordernat.evaluation import render_table
from reordernat.experiments import DeskSetup, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--rule", default="swap_halves")
    p.add_argument("--ambiguous", type=int, default=0, help="number of source types with two translations")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--distill", action="store_true")
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args()
    task = SyntheticTaskSpec(vocab_size=64, rule=a.rule, ambiguous=tuple(range(a.ambiguous)), seed=a.seed)
    result = run_desk(DeskSetup(task=task, steps=a.steps, distill=a.distill), progress=print)
    print(render_table(list(result.reports.values()), result.speedup))
    print(f"total {result.seconds['total']:.0f}s")


if __name__ == "__main__":
    main()
