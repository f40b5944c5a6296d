"""Train one quantile model on log-normal scenes and report pooled EC and PICP."""

from _common import config, parser, save

from sparseq import studies


def main():
    args = parser("calibration", __doc__).parse_args()
    cfg = config(args)
    r = studies.calibration_recovery(cfg)
    print(f"{r.n_labels} test labels, training {r.train_seconds:.0f} s")
    for t, v in r.ec.items():
        print(f"tau={t:.2f}  EC={v:.4f}  error={v - t:+.4f}")
    for a, v in r.picp.items():
        print(f"alpha={a:.1f}  PICP={v:.4f}  error={v - a:+.4f}  MPIW={r.mpiw[a]:.3f}")
    print(f"alpha=0.9 median half-widths: upper {r.asymmetry_upper:.3f}, lower {r.asymmetry_lower:.3f}")
    save(args, {
        "n_labels": r.n_labels, "train_seconds": r.train_seconds,
        "ec": {f"{t:g}": v for t, v in r.ec.items()},
        "picp": {f"{a:g}": v for a, v in r.picp.items()},
        "mpiw": {f"{a:g}": v for a, v in r.mpiw.items()},
        "asymmetry": {"upper": r.asymmetry_upper, "lower": r.asymmetry_lower},
    })


if __name__ == "__main__":
    main()
