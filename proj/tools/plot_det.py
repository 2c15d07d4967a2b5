#!/usr/bin/env python3
"""Draw DET curves from `veinatn eval --det-out` CSV files."""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_det(path):
    fmr, fnmr = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["threshold", "fmr", "fnmr"]:
            raise SystemExit(f"{path}: expected header threshold,fmr,fnmr")
        for row in reader:
            fmr.append(float(row["fmr"]))
            fnmr.append(float(row["fnmr"]))
    return fmr, fnmr


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv", nargs="+", help="DET CSV files")
    parser.add_argument("--out", required=True, help="output image, e.g. det.png")
    parser.add_argument("--title", default="DET")
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(5, 5))
    for path in args.csv:
        fmr, fnmr = read_det(path)
        ax.plot(fmr, fnmr, drawstyle="steps-post", label=path)
    ax.set_xscale("symlog", linthresh=1e-4)
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("FMR")
    ax.set_ylabel("FNMR")
    ax.set_title(args.title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)


if __name__ == "__main__":
    main()
