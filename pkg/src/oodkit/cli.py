"""Command line front end.

Exit codes: 0 success (for eval: every cell succeeded), 1 cell failures,
2 configuration or usage errors.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .detectors import DetectorConfig, DetectorKind, fit, load_state, score
from .eds import FormatError, read_eds, read_head, write_eds, write_head
from .detectors import save_state
from .harness import ConfigError, ExperimentConfig, run_experiment
from .manifest import ManifestError
from .report import FORMATS, emit_report, report_from_json
from .synthetic import generate_synthetic

_DETECTOR_NAMES = ", ".join(k.value for k in DetectorKind)


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--react-q", type=float, default=98.0,
                        help="activation clamp percentile (default 98)")
    parser.add_argument("--knn-k", type=int, default=None,
                        help="neighbor rank; default round(2.5 * classes)")
    parser.add_argument("--vim-dim", type=int, default=None,
                        help="principal subspace size; default round(d / 2)")
    parser.add_argument("--gen-gamma", type=float, default=0.1,
                        help="entropy exponent in (0, 1) (default 0.1)")


def _parse_detectors(spec: str) -> list[DetectorKind]:
    names = [part.strip() for part in spec.split(",") if part.strip()]
    if not names:
        raise argparse.ArgumentTypeError("no detectors given")
    try:
        return [DetectorKind(name) for name in names]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown detector in {spec!r}; choose from: {_DETECTOR_NAMES}"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Post-hoc OOD detectors and open-set evaluation over "
                    "binary embedding dumps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic",
                         help="write a seeded Gaussian-mixture dump and head")
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--per-class", type=int, required=True)
    gen.add_argument("--centroid-scale", type=float, default=10.0)
    gen.add_argument("--noise-scale", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True,
                     help="output prefix; writes <out>.eds and <out>.head")

    fit_p = sub.add_parser("fit", help="fit detectors on a train dump")
    fit_p.add_argument("--train", required=True, help="train .eds path")
    fit_p.add_argument("--detectors", type=_parse_detectors, required=True,
                       help=f"comma-separated subset of: {_DETECTOR_NAMES}")
    fit_p.add_argument("--head", default=None, help=".head path (react_energy, vim)")
    fit_p.add_argument("--out-dir", required=True,
                       help="directory for <kind>.state files")
    _add_hyper_flags(fit_p)

    score_p = sub.add_parser("score", help="score a dump with a fitted state")
    score_p.add_argument("--state", required=True)
    score_p.add_argument("--batch", required=True, help="batch .eds path")
    score_p.add_argument("--out", default=None,
                         help="write one score per line here instead of stdout")

    eval_p = sub.add_parser("eval", help="run an evaluation sweep from a config")
    eval_p.add_argument("--config", required=True, help="experiment config JSON")
    eval_p.add_argument("--out-dir", default=None,
                        help="override the config's output_dir")

    rep = sub.add_parser("report", help="re-render a report.json")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--format", choices=FORMATS, required=True)
    rep.add_argument("--out", default=None, help="output path (default stdout)")
    return parser


def _cmd_gen(args) -> int:
    embedding_set, head = generate_synthetic(
        classes=args.classes,
        dim=args.dim,
        per_class=args.per_class,
        centroid_scale=args.centroid_scale,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    eds_path = Path(args.out + ".eds")
    head_path = Path(args.out + ".head")
    eds_path.parent.mkdir(parents=True, exist_ok=True)
    write_eds(embedding_set, eds_path)
    write_head(head, head_path)
    print(eds_path)
    print(head_path)
    return 0


def _cmd_fit(args) -> int:
    train = read_eds(args.train)
    head = read_head(args.head) if args.head else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for kind in args.detectors:
        config = DetectorConfig(
            kind=kind,
            react_q=args.react_q,
            knn_k=args.knn_k,
            vim_dim=args.vim_dim,
            gen_gamma=args.gen_gamma,
        )
        state = fit(config, train, head)
        path = out_dir / f"{kind.value}.state"
        save_state(state, path)
        print(path)
    return 0


def _cmd_score(args) -> int:
    state = load_state(args.state)
    batch = read_eds(args.batch)
    values = score(state, batch)
    text = "\n".join(repr(float(v)) for v in values) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.out_dir is not None:
        from dataclasses import replace
        config = replace(config, output_dir=Path(args.out_dir))
    report = run_experiment(config)
    out_dir = config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(emit_report(report, "json"))
    (out_dir / "report.md").write_text(emit_report(report, "md"))
    for cell in report.cells:
        tag = cell.detector if cell.detector is not None else "accuracy"
        line = f"{cell.split}/seed {cell.seed}/{tag}: {cell.status}"
        if cell.reason:
            line += f" ({cell.reason})"
        print(line)
    print(f"report written to {out_dir / 'report.json'}")
    return 0 if report.all_ok() else 1


def _cmd_report(args) -> int:
    report = report_from_json(Path(args.input).read_text())
    rendered = emit_report(report, args.format)
    if args.out:
        Path(args.out).write_text(rendered)
    else:
        sys.stdout.write(rendered)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-synthetic": _cmd_gen,
        "fit": _cmd_fit,
        "score": _cmd_score,
        "eval": _cmd_eval,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
