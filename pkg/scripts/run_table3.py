"""Loss-combination grid: two Gen-0 losses, each distilled with two Gen-1 losses."""

from _common import base_parser, progress, setup

from skd import ablation


def main() -> None:
    args = base_parser(__doc__).parse_args()
    run, train, test, seeds = setup(args)
    cells = ablation.table3_cells(run.alpha, run.beta)
    results = ablation.run_grid(train, test, run, cells, seeds, on_result=progress)
    rows = ablation.write_outputs(results, args.out, run)
    print(ablation.format_summary(rows))


if __name__ == "__main__":
    main()
