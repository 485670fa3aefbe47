"""gridforge command line: demos and benchmarks on the in-process runtime.

    gridforge gol --width 10 --height 10 --steps 100 --ranks 4 --partition rcb
    gridforge advect --base 16 --levels 2 --cfl 0.4 --steps 500 --adapt-every 1
    gridforge bench amr-speed --base 8 --target 128
    gridforge bench exchange --cells 1000 --bytes 128 --ranks 4 --batching per-rank
    gridforge bench kernels

Every run prints one stats line per step: step=<k> cells=<n> mass=<m> fc=<f>
dt=<dt>. Exit code 0 on success, 1 with a one-line diagnostic otherwise.
"""

import argparse
import sys

from ..partition import METHODS
from ..transport import run_ranks
from . import advect, bench, life


def _add_ranks(parser):
    parser.add_argument("--ranks", type=int, default=1, help="logical ranks on the in-process runtime")
    parser.add_argument("--partition", choices=METHODS, default="block")
    parser.add_argument("--partition-seed", type=int, default=0, help="seed for the seeded partitioners")


def build_parser():
    parser = argparse.ArgumentParser(prog="gridforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gol = sub.add_parser("gol", help="distributed Game of Life")
    gol.add_argument("--width", type=int, default=10)
    gol.add_argument("--height", type=int, default=10)
    gol.add_argument("--steps", type=int, default=100)
    gol.add_argument("--pattern", default="glider-blinker", choices=life.PATTERNS)
    gol.add_argument("--print-board", action="store_true", help="render the final board")
    _add_ranks(gol)

    adv = sub.add_parser("advect", help="conservative advection with runtime AMR")
    adv.add_argument("--base", type=int, default=16, help="level-0 cells per dimension")
    adv.add_argument("--levels", type=int, default=2, help="maximum refinement level")
    adv.add_argument("--cfl", type=float, default=0.4)
    adv.add_argument("--steps", type=int, default=100)
    adv.add_argument("--adapt-every", type=int, default=1, help="adapt every Nth step (0 disables)")
    adv.add_argument("--rebalance-fc", type=float, default=2.0, help="rebalance when f_c reaches this (0 disables)")
    adv.add_argument("--velocity", default="1,0.5,0.25", help="vx,vy,vz")
    adv.add_argument("--dump-dir", default=None)
    adv.add_argument("--dump-every", type=int, default=0)
    adv.add_argument("--vtk", default=None, help="write the final state as legacy VTK")
    _add_ranks(adv)

    ben = sub.add_parser("bench", help="benchmarks")
    bsub = ben.add_subparsers(dest="bench_command", required=True)
    amr = bsub.add_parser("amr-speed", help="pure refinement speed")
    amr.add_argument("--base", type=int, default=8)
    amr.add_argument("--target", type=int, default=128)
    _add_ranks(amr)
    exc = bsub.add_parser("exchange", help="ghost update throughput")
    exc.add_argument("--cells", type=int, default=1000)
    exc.add_argument("--bytes", type=int, default=128)
    exc.add_argument("--rounds", type=int, default=20)
    exc.add_argument("--batching", choices=("per-rank", "per-cell"), default="per-rank")
    _add_ranks(exc)
    ker = bsub.add_parser("kernels", help="compare compiled and pure kernels")
    ker.add_argument("--base", type=int, default=32)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gol":
            boards = run_ranks(
                args.ranks,
                lambda comm: life.gol_run(
                    comm,
                    args.width,
                    args.height,
                    args.steps,
                    partition=args.partition,
                    pattern=args.pattern,
                    partition_seed=args.partition_seed,
                    print_stats=True,
                ),
            )
            board = boards[0]
            if args.print_board and board is not None:
                for row in board[::-1]:
                    print("".join("#" if v else "." for v in row))
        elif args.command == "advect":
            velocity = tuple(float(v) for v in args.velocity.split(","))
            if len(velocity) != 3:
                raise ValueError("--velocity needs three comma-separated components")
            run_ranks(
                args.ranks,
                lambda comm: advect.advect_run(
                    comm,
                    base=args.base,
                    levels=args.levels,
                    cfl=args.cfl,
                    steps=args.steps,
                    adapt_every=args.adapt_every,
                    rebalance_fc=args.rebalance_fc,
                    velocity=velocity,
                    partition=args.partition,
                    partition_seed=args.partition_seed,
                    dump_dir=args.dump_dir,
                    dump_every=args.dump_every,
                    vtk_path=args.vtk,
                ),
            )
        elif args.command == "bench":
            if args.bench_command == "amr-speed":
                run_ranks(args.ranks, lambda comm: bench.bench_amr_speed(comm, args.base, args.target))
            elif args.bench_command == "exchange":
                run_ranks(
                    args.ranks,
                    lambda comm: bench.bench_exchange(
                        comm, args.cells, args.bytes, batching=args.batching, rounds=args.rounds
                    ),
                )
            else:
                bench.bench_kernels(base=args.base)
        return 0
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"gridforge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
