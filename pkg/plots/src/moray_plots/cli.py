"""Command-line entry point: `moray-plot --kind K --in A[,B] --labels X[,Y] --out F.png`."""
from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotJob, SchemaMismatch, render


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moray-plot", description=__doc__)
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--in", dest="inputs", required=True,
                   help="comma-separated input files (harness exports)")
    p.add_argument("--labels", default="", help="comma-separated series labels")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--scenario", default=None,
                   help="scenario json with node positions (topology kind)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = PlotJob(
        kind=args.kind,
        inputs=[t for t in args.inputs.split(",") if t],
        labels=[t for t in args.labels.split(",") if t],
        output=args.out,
        scenario=args.scenario,
    )
    try:
        render(job)
    except (SchemaMismatch, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
