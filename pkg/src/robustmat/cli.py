"""Batch command-line front end.

Every subcommand is reproducible from its JSON config and seed. Exit codes:
0 success, 1 invalid input (config, files, arguments), 2 numerical failure
(solver divergence, non-finite values, failed checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from . import checkpoint, gradcheck, losstheory, robustness
from .config import RunConfig, describe, load_config
from .dataio import Dataset, DatasetFormatError, generate_dataset, noisy_copy, read_dataset, write_dataset
from .metrics import evaluate
from .model import ModelParams
from .ode import DivergenceError, NumericalError
from .train import TrainingError, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class CheckFailed(RuntimeError):
    """A self-check ran to completion but its result is out of tolerance."""


def _parser() -> argparse.ArgumentParser:
    keys = "\n".join(describe())
    ap = argparse.ArgumentParser(
        prog="robustmat",
        description="Landmark patch matching with vertex and graph diffusion: data, training, evaluation, probes.",
        epilog=f"config keys (JSON, nested by section; unknown keys are rejected):\n{keys}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str, *flags: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", type=Path, help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="overrides the seed of the stage this command runs")
        p.add_argument("--out", type=Path, help="output path (directory or file, see command)")
        if "data" in flags:
            p.add_argument("--data", type=Path, help="dataset directory (default: generate from config)")
        if "checkpoint" in flags:
            p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint file")
        if "threshold" in flags:
            p.add_argument("--threshold", type=float, help="decision threshold on the match score")
        if "psnr" in flags:
            p.add_argument("--psnr", type=float, nargs="+", help="noise levels in dB for stage statistics")
        return p

    add("gen", "generate a synthetic dataset into --out DIR")
    add("train", "train a model; writes --out DIR/model.rmwt and DIR/history.json", "data")
    add("eval", "clean and noisy test metrics as JSON (to --out FILE or stdout)", "data", "checkpoint", "threshold")
    add("robustness", "stage statistics and contraction probes; writes --out DIR/report.json and DIR/samples.csv",
        "data", "checkpoint", "psnr")
    add("losscheck", "discriminator objective checks on random finite distributions")
    add("gradcheck", "finite-difference checks of every differentiable operation and of the training loss")
    return ap


def _emit(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


def _dataset(args, run: RunConfig) -> Dataset:
    return read_dataset(args.data) if getattr(args, "data", None) else generate_dataset(run.dataset)


def _require_out(args) -> Path:
    if args.out is None:
        raise ValueError(f"{args.command} needs --out")
    return args.out


def cmd_gen(args, run: RunConfig) -> None:
    cfg = run.dataset if args.seed is None else run.dataset.model_copy(update={"seed": args.seed})
    write_dataset(_require_out(args), generate_dataset(cfg))


def cmd_train(args, run: RunConfig) -> None:
    out = _require_out(args)
    if args.seed is not None:
        run = run.model_copy(update={"train": run.train.model_copy(update={"seed": args.seed})})
    ds = _dataset(args, run)
    log = lambda epoch, loss: print(f"epoch {epoch + 1}/{run.train.epochs} loss {loss:.6f}", file=sys.stderr)  # noqa: E731
    result = train(ds, run.model, run.train, progress=log)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "model.rmwt", result.params, run)
    _emit({"loss": result.history, "seed": run.train.seed, "seconds": result.seconds}, out / "history.json")


def cmd_eval(args, run_cfg: RunConfig) -> None:
    params, run = checkpoint.load(args.checkpoint)
    if args.config is not None:
        run = run.model_copy(update={"dataset": run_cfg.dataset, "eval": run_cfg.eval})
    threshold = run.eval.threshold if args.threshold is None else args.threshold
    ds = _dataset(args, run)
    seed = 0 if args.seed is None else args.seed
    clean = evaluate(params, ds, threshold)
    noisy = evaluate(params, noisy_copy(ds, run.eval.noise_psnr, seed=seed), threshold)
    _emit({"clean": clean.as_dict(), "noisy": noisy.as_dict(), "noise_psnr": run.eval.noise_psnr,
           "threshold": threshold}, args.out)


def robustness_report(params: ModelParams, ds: Dataset, run: RunConfig) -> robustness.RobustnessReport:
    rc = run.robustness
    report = robustness.stage_perturbation_stats(params, ds, tuple(rc.psnr), rc.n_patches, rc.seed)
    for module, states in (("vertex", robustness.vertex_probe_states), ("graph", robustness.graph_probe_states)):
        z0 = states(params, ds, rc.n_patches, rc.seed)
        jac = robustness.jacobian_probe(module, params, z0, n_points=rc.jacobian_points, seed=rc.seed)
        report.probes.extend(robustness.contraction_probe(module, params, z0, rc.t_list, rc.eps_list, jacobian=jac,
                                                          seed=rc.seed))
        report.jacobian.append(jac)
    return report


def cmd_robustness(args, run_cfg: RunConfig) -> None:
    out = _require_out(args)
    params, run = checkpoint.load(args.checkpoint)
    rc = run_cfg.robustness
    if args.psnr:
        rc = rc.model_copy(update={"psnr": list(args.psnr)})
    if args.seed is not None:
        rc = rc.model_copy(update={"seed": args.seed})
    run = run.model_copy(update={"robustness": rc, **({"dataset": run_cfg.dataset} if args.config else {})})
    report = robustness_report(params, _dataset(args, run), run)
    out.mkdir(parents=True, exist_ok=True)
    _emit(report.summary(), out / "report.json")
    (out / "samples.csv").write_text(report.samples_csv(), encoding="utf-8")


def cmd_losscheck(args, run: RunConfig) -> None:
    report = losstheory.run_checks(seed=0 if args.seed is None else args.seed)
    _emit(report.as_dict(), args.out)
    if not report.passed:
        raise CheckFailed("loss-theory checks out of tolerance")


def cmd_gradcheck(args, run: RunConfig) -> None:
    rows = gradcheck.run_all(seed=0 if args.seed is None else args.seed)
    table = gradcheck.format_table(rows)
    if args.out is None:
        print(table)
    else:
        args.out.write_text(table + "\n", encoding="utf-8")
    failed = [r.name for r in rows if not r.passed]
    if failed:
        raise CheckFailed(f"gradient checks failed: {', '.join(failed)}")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "robustness": cmd_robustness,
            "losscheck": cmd_losscheck, "gradcheck": cmd_gradcheck}


def _fail(kind: str, message: str, code: int) -> int:
    print(f"robustmat: {kind}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        run = load_config(args.config)
        COMMANDS[args.command](args, run)
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        return _fail("config error", "; ".join(lines), EXIT_INPUT)
    except (DatasetFormatError, checkpoint.CheckpointError) as exc:
        return _fail("format error", str(exc), EXIT_INPUT)
    except json.JSONDecodeError as exc:
        return _fail("config error", f"invalid JSON: {exc}", EXIT_INPUT)
    except OSError as exc:
        return _fail("io error", f"{exc.strerror or exc}: {exc.filename}", EXIT_INPUT)
    except (TrainingError, DivergenceError, NumericalError, FloatingPointError, CheckFailed) as exc:
        return _fail("numerical failure", str(exc), EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("invalid input", str(exc), EXIT_INPUT)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
