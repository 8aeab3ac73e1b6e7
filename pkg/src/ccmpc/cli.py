"""Command-line driver: ``synth``, ``verify-lmi``, ``simulate`` and ``geodesic``.

Exit codes: 0 success, 1 negative verification (or a halted simulation),
2 no certificate found, 64 usage or configuration error, 65 bad data file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .metric import CertificateFormatError, certificate_id, load, save
from .riemann import DEFAULT_SEGMENTS, geodesic
from .simulator import run, trace_l2_gain, write_trace
from .synthesis import NoCertificateFound, verify_certificate, synthesize

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64
EXIT_DATA = 65

log = logging.getLogger("ccmpc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _load_cert(path: Path):
    if not path.is_file():
        raise UsageError(f"certificate {path} does not exist")
    return load(path)


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    model, scfg = cfg.model(), cfg.synthesis()
    out = Path(args.out) if args.out else cfg.certificate_path
    try:
        cert = synthesize(model, scfg)
    except NoCertificateFound as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    _ensure_parent(out)
    save(cert, out)
    print(f"certificate {out} id={certificate_id(cert)}")
    print(f"margin {_fmt(cert.margin)}")
    print(f"m_lower {_fmt(cert.m_lower)} m_upper {_fmt(cert.m_upper)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    cert = _load_cert(Path(args.cert) if args.cert else cfg.certificate_path)
    model = cfg.model()
    report = verify_certificate(model, cert)
    worst = " ".join(_fmt(v) for v in report.point)
    succ = " ".join(_fmt(v) for v in report.successor)
    print(f"mode {report.mode} pairs {report.n_pairs}")
    print(f"margin {_fmt(report.margin)} at x=({worst}) x+=({succ})")
    return EXIT_OK if report.margin >= 0 else EXIT_NEGATIVE


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    cert = _load_cert(Path(args.cert) if args.cert else cfg.certificate_path)
    model = cfg.model()
    sim = cfg.simulation(controller=args.mode, seed=args.seed, steps=args.steps)
    out = Path(args.out) if args.out else cfg.trace_path
    trace = run(sim, model, cert)
    _ensure_parent(out)
    write_trace(trace, out)
    err = trace.tracking_error
    counts = trace.status_counts()
    fallback = counts.get("fallback_ccm", 0) / max(len(trace), 1)
    gain = trace_l2_gain(trace)
    print(f"trace {out} records {len(trace)} controller {sim.controller} seed {sim.scenario.seed}")
    print(f"final_tracking_error {_fmt(err[-1])}")
    print(f"mean_stage_cost {_fmt(np.mean(trace.cost))}")
    print(f"fallback_rate {_fmt(fallback)}")
    print(f"empirical_l2_gain {'n/a' if gain is None else _fmt(gain)}")
    print(f"clamped_steps {trace.clamped}")
    if trace.halted:
        print("simulation halted: state box infeasible", file=sys.stderr)
        return EXIT_NEGATIVE
    return EXIT_OK


def cmd_geodesic(args) -> int:
    cert = _load_cert(Path(args.cert))
    x, x_star = np.asarray(args.x, dtype=float), np.asarray(args.x_star, dtype=float)
    if x.shape != (cert.state_dim,) or x_star.shape != (cert.state_dim,):
        raise UsageError(f"--x and --x-star need {cert.state_dim} values each")
    res = geodesic(cert, x, x_star, args.segments)
    cols = ",".join(f"x{i + 1}" for i in range(cert.state_dim))
    print(f"node,{cols},length")
    nodes = res.path.nodes
    if res.length == 0.0:
        nodes = nodes[:1]
    for j, node in enumerate(nodes):
        print(f"{j}," + ",".join(_fmt(v) for v in node) + f",{_fmt(res.length)}")
    if not res.converged:
        print(f"warning: geodesic not converged after {res.iterations} iterations", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccmpc", description="Contraction metrics and contraction-constrained MPC.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesise a metric certificate")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="certificate path (default from io section)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify-lmi", help="re-check a certificate on a denser grid")
    p.add_argument("--config", required=True)
    p.add_argument("--cert")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="run the closed loop and write a trace CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--cert")
    p.add_argument("--mode", choices=("ccm", "cmpc"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="trace path (default from io section)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("geodesic", help="print a discrete geodesic as CSV")
    p.add_argument("--cert", required=True)
    p.add_argument("--x", type=float, nargs="+", required=True)
    p.add_argument("--x-star", type=float, nargs="+", required=True)
    p.add_argument("--segments", type=int, default=DEFAULT_SEGMENTS)
    p.set_defaults(func=cmd_geodesic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if getattr(args, "steps", None) is not None and args.steps < 1:
            raise UsageError("--steps must be positive")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CertificateFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # model or scenario contract violations raised while building from a valid-looking config
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
