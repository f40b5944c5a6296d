"""Compare training with and without the shift-resilient loss over several seeds."""

from _common import config, parser, save

from sparseq import studies


def main():
    p = parser("shift_benefit", __doc__)
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    cfg = config(args)
    rows = []
    print("seed  MAE shift/plain      border PIW shift/plain   interior PIW shift/plain")
    for seed in range(args.seeds):
        r = studies.shift_benefit_seed(cfg, seed)
        rows.append(r)
        print(f"{seed:4d}  {r.mae[True]:7.3f} / {r.mae[False]:7.3f}   {r.border_piw[True]:8.3f} / "
              f"{r.border_piw[False]:8.3f}     {r.interior_piw[True]:8.3f} / {r.interior_piw[False]:8.3f}",
              flush=True)
    verdict = studies.shift_verdict(rows)
    print(verdict)
    save(args, {
        "seeds": [{"seed": r.seed, "mae": {"shift": r.mae[True], "plain": r.mae[False]},
                   "border_piw": {"shift": r.border_piw[True], "plain": r.border_piw[False]},
                   "interior_piw": {"shift": r.interior_piw[True], "plain": r.interior_piw[False]}}
                  for r in rows],
        "verdict": verdict,
    })


if __name__ == "__main__":
    main()
