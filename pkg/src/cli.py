"""Command-line interface: ``python main.py <command> [options]``.

Results go to stdout (or ``--out``); status lines go to stderr. Exit codes are
0 on success, 2 for usage/config errors, 3 for data errors, 4 when training
diverged and 1 for anything unexpected.
"""

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable
from dataclasses import asdict
from pathlib import Path

from dotenv import load_dotenv

from src.csi_model import CsiDataset, load_dataset, save_dataset
from src.errors import CsiError, DivergedLoss, UsageError
from src.framework import ArchitectureSpec, parse_knob
from src.harness import (
    REPORT_FORMATS,
    InputMode,
    compare_input_modes,
    cross_validate,
    cross_validate_per_user,
    load_report,
    preprocess_dataset,
    reference_for,
    render_report,
    run_ablation,
    train_once,
)
from src.nn.gradcheck import run_gradcheck, summarize
from src.run_config import DEFAULT_CONFIG_PATH, RunConfig, load_run_config
from src.sigproc import demo_phase_pair, demo_unwrap_rows, unwrap_instability_probe
from src.synthgen import generate, oracle_sanity_check, split_train_test

logger = logging.getLogger(__name__)


def _env_flag(name: str, default: bool = True) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    _status(f"📦 wrote {path}")


def _load(path: str | None, what: str) -> CsiDataset:
    if not path:
        raise UsageError(f"--{what} is required")
    return load_dataset(Path(path))


def _architecture(cfg: RunConfig, ds: CsiDataset) -> ArchitectureSpec:
    return cfg.architecture.resolve(ds.input_shape, ds.num_classes)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not args.out:
        raise UsageError("synth needs --out <file.csit>")
    ds = generate(cfg.synth)
    out = Path(args.out)
    if args.split:
        train, test = split_train_test(ds, cfg.synth.test_per_class)
        save_dataset(train, out.with_name(f"{out.stem}_train{out.suffix}"))
        save_dataset(test, out.with_name(f"{out.stem}_test{out.suffix}"))
        _status(f"✅ {len(train)} training and {len(test)} test instances written next to {out}")
    else:
        save_dataset(ds, out)
        _status(f"✅ {len(ds)} instances written to {out}")
    return 0


def cmd_preprocess(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not args.out:
        raise UsageError("preprocess needs --out <file.csit>")
    ds = _load(args.input, "input")
    mode = InputMode(args.mode) if args.mode else cfg.train.input_mode
    out = preprocess_dataset(ds, mode, cfg.pipeline)
    save_dataset(out, Path(args.out))
    _status(f"✅ {mode.value} applied to {len(out)} instances")
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    train = _load(args.train, "train")
    test = _load(args.test, "test")
    report = train_once(
        train,
        test,
        _architecture(cfg, train),
        cfg.train,
        cfg.pipeline,
        progress=_env_flag("CSI_PROGRESS"),
        checkpoint=Path(args.checkpoint) if args.checkpoint else None,
        reference=reference_for(args.profile),
    )
    if args.checkpoint:
        _status(f"📦 checkpoint written to {args.checkpoint}")
    _emit(render_report(report, args.format), args.out)
    _status(f"✅ true detection rate {report.mean_rate:.4f}")
    return 0


def cmd_crossval(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args.data, "data")
    arch = _architecture(cfg, ds)
    k = args.k or cfg.crossval.k
    runner = cross_validate_per_user if (args.per_user or cfg.crossval.per_user) else cross_validate
    report = runner(
        ds,
        arch,
        cfg.train,
        k,
        pipeline=cfg.pipeline,
        workers=cfg.crossval.workers,
        progress=_env_flag("CSI_PROGRESS"),
    )
    report = report.model_copy(update={"reference": reference_for(args.profile)})
    _emit(render_report(report, args.format), args.out)
    failed = sum(1 for f in report.folds if f.failed)
    if failed:
        _status(f"❌ {failed} of {len(report.folds)} folds diverged")
    if report.mean_rate is not None:
        _status(f"✅ mean true detection rate {report.mean_rate:.4f} ± {report.std_rate:.4f}")
        return 0
    _status("❌ no fold completed")
    return DivergedLoss.exit_code


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args.data, "data")
    knobs = [parse_knob(k) for k in args.knob] if args.knob else cfg.knobs
    table = run_ablation(
        ds,
        _architecture(cfg, ds),
        knobs,
        cfg.train,
        args.k or cfg.crossval.k,
        pipeline=cfg.pipeline,
        workers=cfg.crossval.workers,
        progress=_env_flag("CSI_PROGRESS"),
    )
    _emit(render_report(table, args.format), args.out)
    _status(f"✅ {len(table.rows)} ablation rows")
    return 0


def cmd_compare(args: argparse.Namespace, cfg: RunConfig) -> int:
    ds = _load(args.data, "data")
    table = compare_input_modes(
        ds,
        _architecture(cfg, ds),
        cfg.train,
        args.k or cfg.crossval.k,
        pipeline=cfg.pipeline,
        workers=cfg.crossval.workers,
        progress=_env_flag("CSI_PROGRESS"),
    )
    _emit(render_report(table, args.format), args.out)
    for row in table.rows:
        _status(f"✅ {row.label}: {row.mean_rate}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = summarize(run_gradcheck(args.configs, seed, args.layer or None))
    _emit(json.dumps(rows, indent=2) + "\n", args.out)
    failed = [row["layer"] for row in rows if not row["passed"]]
    if failed:
        _status(f"❌ gradient check failed for {failed}")
        return 1
    _status(f"✅ {len(rows)} layer types pass")
    return 0


def cmd_demo_unwrap(args: argparse.Namespace, cfg: RunConfig) -> int:
    threshold = cfg.pipeline.unwrap_threshold
    pa, pb = demo_phase_pair(args.n, args.jump_a, args.jump_b)
    probe = unwrap_instability_probe(pa, pb, threshold)
    rows = demo_unwrap_rows(pa, pb, threshold)
    fmt = args.format if args.format_given else "csv"
    if fmt == "json":
        text = json.dumps({"probe": asdict(probe), "rows": rows}, indent=2) + "\n"
    else:
        lines = ["subcarrier,rawA,rawB,unwrappedA,unwrappedB"]
        lines += [
            f"{r['subcarrier']},{r['rawA']!r},{r['rawB']!r},{r['unwrappedA']!r},{r['unwrappedB']!r}"
            for r in rows
        ]
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    _status(
        f"✅ pre-unwrap distance {probe.pre_dist:.4f} rad, post-unwrap {probe.post_dist:.4f} rad"
    )
    return 0


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    if not args.input:
        raise UsageError("report needs --input <report.json>")
    path = Path(args.input)
    if not path.exists():
        raise UsageError(f"report not found: {path}")
    report = load_report(path.read_text(encoding="utf-8"))
    _emit(render_report(report, args.format), args.out)
    return 0


def cmd_oracle(args: argparse.Namespace, cfg: RunConfig) -> int:
    result = oracle_sanity_check(cfg.synth)
    _emit(result.model_dump_json(indent=2) + "\n", args.out)
    if result.clean_accuracy < 1.0:
        _status(f"❌ impairment-free classes are not separable ({result.clean_accuracy:.4f})")
        return 3
    _status(f"✅ clean {result.clean_accuracy:.4f}, impaired {result.impaired_accuracy:.4f}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "demo-unwrap": cmd_demo_unwrap,
    "report": cmd_report,
    "oracle": cmd_oracle,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config YAML")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides every seed in the config")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default: stdout)")
    common.add_argument("--format", choices=REPORT_FORMATS, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)
    return common


def create_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(
        prog="rawcsi",
        description="Raw-CSI context awareness toolkit",
        parents=[common],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
examples:
    %(prog)s synth --out data/synth.csit --split
    %(prog)s train --train data/synth_train.csit --test data/synth_test.csit --checkpoint model.csim
    %(prog)s crossval --data data/synth.csit --format csv
    %(prog)s ablate --data data/synth.csit --knob batch_norm=off --knob conv_depth=2
    %(prog)s gradcheck --configs 20
    %(prog)s demo-unwrap
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="available commands")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(name, help=help_text, parents=[common])

    sub = add("synth", "generate a synthetic CSIT dataset")
    sub.add_argument("--split", action="store_true", help="write <out>_train and <out>_test files")

    sub = add("preprocess", "apply an input transform to a CSIT file")
    sub.add_argument("--input", required=True)
    sub.add_argument("--mode", choices=[m.value for m in InputMode])

    sub = add("train", "train on one file and evaluate on another")
    sub.add_argument("--train", required=True)
    sub.add_argument("--test", required=True)
    sub.add_argument("--checkpoint", help="write the trained network as CSIM")
    sub.add_argument("--profile", help="attach the published rates of a dataset profile")

    for name, help_text in (
        ("crossval", "k-fold cross-validation"),
        ("ablate", "cross-validate the baseline and each ablation knob"),
        ("compare", "cross-validate raw, amplitude-only and sanitised inputs"),
    ):
        sub = add(name, help_text)
        sub.add_argument("--data", required=True)
        sub.add_argument("--k", type=int, help="fold count (default: crossval.k)")
        if name == "crossval":
            sub.add_argument("--per-user", action="store_true", help="split by meta user_ids")
            sub.add_argument("--profile", help="attach the published rates of a dataset profile")
        if name == "ablate":
            sub.add_argument("--knob", action="append", help="conv_depth=<k> | fc_depth=<k> | batch_norm=off | avg_pool=off")

    sub = add("gradcheck", "finite-difference gradient checks")
    sub.add_argument("--configs", type=int, default=20)
    sub.add_argument("--layer", action="append")

    sub = add("demo-unwrap", "show two similar phase vectors diverging after unwrap")
    sub.add_argument("--n", type=int, default=30)
    sub.add_argument("--jump-a", type=float, default=3.10)
    sub.add_argument("--jump-b", type=float, default=3.18)

    sub = add("report", "re-render a JSON report")
    sub.add_argument("--input", required=True)

    add("oracle", "nearest-centroid separability check of the synth config")
    return parser


def _configure_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else os.getenv("CSI_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    parser = create_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    args.format_given = hasattr(args, "format")
    for name, default in (("config", None), ("seed", None), ("out", None), ("format", "json"), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    _configure_logging(args.verbose)

    try:
        cfg = load_run_config(Path(args.config or os.getenv("CSI_CONFIG") or DEFAULT_CONFIG_PATH))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except CsiError as exc:
        _status(f"❌ {type(exc).__name__}: {exc}")
        return exc.exit_code
    except Exception as exc:
        logger.exception("unexpected failure")
        _status(f"❌ {exc}")
        return 1


def run() -> None:
    sys.exit(main())
