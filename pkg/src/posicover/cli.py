"""Command-line entry point.

Values come from built-in defaults, then an optional ``--config`` INI file,
then command-line flags. Errors exit with the ``code`` of their class.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import RunConfig
from .errors import ConfigError, OutputError, PosiError
from .reports import REPORTS
from .util import atomic_write_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p):
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="INI file with run settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    g.add_argument("--alpha", type=float)
    g.add_argument("--out", help="output CSV path, '-' for stdout")
    g.add_argument("--r", help="residual degrees of freedom, or inf")
    g.add_argument("--draws", type=int, help="Monte Carlo draws for PoSI constants")


def _design(p, rho_flag=True, c_flag=True):
    g = p.add_argument_group("design")
    g.add_argument("--design", help="orthogonal, exchangeable, equicorrelated, one-vs-rest, nested, csv, gram")
    g.add_argument("--p", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--a", type=float, help="exchangeable design strength")
    if c_flag:
        g.add_argument("--c", help="equicorrelation (default sqrt(0.8/(p-1)))")
    if rho_flag:
        g.add_argument("--rho", type=float, help="correlation for the nested design")
    g.add_argument("--design-csv", dest="design_csv")
    g.add_argument("--gram", help="rows separated by ';', entries by ','")
    g.add_argument("--protected", type=int)
    g.add_argument("--embedding-seed", dest="embedding_seed",
                   help="seed of the orthonormal map into n-space, or 'none' for zero padding (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posicover", description="Coverage of confidence intervals after model selection.",
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("constants", help="naive, PoSI1, PoSI, all-subsets PoSI and Scheffe constants",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    _design(p)

    p = sub.add_parser("exact", help="exact coverage curves for two nested models", argument_default=argparse.SUPPRESS)
    _common(p)
    p.add_argument("--figure", type=int, choices=(1, 2, 3))
    p.add_argument("--rho", dest="rhos", help="comma list of correlations (figure 1)")
    p.add_argument("--c", dest="c_threshold", help="comma list of selection thresholds, e.g. sqrt2,sqrtlog10")
    p.add_argument("--rho-points", dest="rho_points", type=int)
    p.add_argument("--rho-max", dest="rho_max", type=float)
    p.add_argument("--zeta-max", dest="zeta_max", type=float)
    p.add_argument("--zeta-points", dest="zeta_points", type=int)

    p = sub.add_parser("search", help="staged Monte Carlo search for minimal coverage", argument_default=argparse.SUPPRESS)
    _common(p)
    _design(p)
    p.add_argument("--selectors", help="comma list: aic, bic, lasso, spar, nested:C, stepwise:PENALTY")
    p.add_argument("--ks", help="comma list: naive, posi1, posi, posi-all-subsets, scheffe")
    p.add_argument("--targets", help="comma list: selected, full")
    p.add_argument("--plan", help="stages as COUNTxREPS, e.g. 1000x100,100x1000,1x100000")
    p.add_argument("--checkpoint", help="path prefix for per-stage checkpoint files")
    p.add_argument("--timing", action="store_true", help="add a wall_time column (output no longer reproducible)")

    p = sub.add_parser("validate-appendix", help="coverage of zero-restricted intervals under random selectors",
                       argument_default=argparse.SUPPRESS)
    _common(p)
    _design(p)
    p.add_argument("--selectors", dest="n_selectors", type=int, help="number of random selectors")
    p.add_argument("--points", dest="n_points", type=int, help="parameter points per selector")
    p.add_argument("--replications", type=int)
    p.add_argument("--m0", help="model without the protected column, e.g. 2,3")
    p.add_argument("--m1", help="model with the protected column, e.g. 1,2")
    return parser


def config_from_args(argv) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    path = args.pop("config", None)
    base = RunConfig.load(path) if path else RunConfig(command=args["command"])
    values = {**base.__dict__, **args}
    if "threads" not in args and not path:
        values["threads"] = os.cpu_count() or 1
    return RunConfig(**values)


def run(cfg: RunConfig) -> int:
    text = REPORTS[cfg.command](cfg)
    if cfg.out in ("", "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(cfg.out, text)
    return 0


def main(argv=None) -> int:
    try:
        cfg = config_from_args(sys.argv[1:] if argv is None else argv)
        return run(cfg)
    except PosiError as exc:
        print(f"posicover: error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"posicover: error: {exc}", file=sys.stderr)
        return OutputError.code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
