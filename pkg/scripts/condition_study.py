"""Interval width at forest borders and across slope bins on slope-driven noise."""

from _common import config, parser, save

from sparseq import studies


def main():
    args = parser("conditions", __doc__).parse_args()
    cfg = config(args)
    r = studies.condition_study(cfg)
    print(f"median PIW: border {r.border_median:.3f}, interior {r.interior_median:.3f}")
    for name, n, m in r.slope_medians:
        print(f"slope {name:>9}  n={n:6d}  median PIW {m:.3f}")
    print(f"nondecreasing across slope bins: {r.slope_nondecreasing()}")
    save(args, {
        "border_median": r.border_median, "interior_median": r.interior_median,
        "slope": [{"bin": name, "count": n, "median_piw": m} for name, n, m in r.slope_medians],
    })


if __name__ == "__main__":
    main()
