"""Sensitivity of Gen-0 to alpha and of Gen-1 to beta."""

from _common import base_parser, progress, setup

from skd import ablation


def main() -> None:
    p = base_parser(__doc__)
    p.add_argument("--alphas", default="0,0.5,1,2,4")
    p.add_argument("--betas", default="0,0.05,0.1,0.5,1")
    args = p.parse_args()
    run, train, test, seeds = setup(args)
    cells = ablation.alpha_cells(float(a) for a in args.alphas.split(","))
    cells += ablation.beta_cells(run.alpha, (float(b) for b in args.betas.split(",")))
    results = ablation.run_grid(train, test, run, cells, seeds, on_result=progress)
    print(ablation.format_summary(ablation.write_outputs(results, args.out, run)))


if __name__ == "__main__":
    main()
