"""Run the loss-kind x shift ablation through the CLI and compare widths at matched coverage."""

from _common import config, parser, save

from sparseq import studies


def main():
    p = parser("ablation", __doc__)
    p.add_argument("--runs", default="ablation_runs", help="directory for the six run directories")
    args = p.parse_args()
    cfg = config(args)
    comp = studies.run_ablation(args.runs, cfg)
    print((comp / "comparison.md").read_text(encoding="utf-8"))
    rows = studies.matched_widths(args.runs, cfg)
    print("shift  alpha  PICP     quantile MPIW  gaussian MPIW at same PICP")
    for r in rows:
        print(f"{str(r.shift):5}  {r.alpha:.1f}    {r.picp:.4f}   {r.quantile_mpiw:10.3f}   {r.gaussian_mpiw:10.3f}")
    save(args, {"comparison_dir": str(comp), "matched": [r.__dict__ for r in rows]})


if __name__ == "__main__":
    main()
