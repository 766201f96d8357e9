"""Gen-0 with the rotation pretext versus the crop-quadrant pretext, against the alpha=0 baseline."""

from _common import base_parser, progress, setup

from skd import ablation


def main() -> None:
    args = base_parser(__doc__).parse_args()
    run, train, test, seeds = setup(args)
    cells = [ablation.Cell("gen0 ce", 0.0),
             ablation.Cell("gen0 ce+ss rotation", run.alpha),
             ablation.Cell("gen0 ce+ss crop", run.alpha, pretext="crop")]
    results = ablation.run_grid(train, test, run, cells, seeds, on_result=progress)
    print(ablation.format_summary(ablation.write_outputs(results, args.out, run)))


if __name__ == "__main__":
    main()
