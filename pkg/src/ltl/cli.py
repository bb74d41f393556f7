"""Command-line entry point: ``ltl <command> [flags]``.

Every command reads the same flag set (``ltl <command> --help`` lists them);
flags a command does not use are ignored. ``--config FILE`` supplies flags as
flat ``key=value`` lines, and explicit flags override it.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .bench import BENCH_COLUMNS, bench
from .data_io import (
    export_metrics_csv,
    export_mnist_subset,
    load_checkpoint,
    load_mnist,
    save_checkpoint,
)
from .distill import DistillConfig, distill
from .errors import LTLError
from .metrics import accuracy, evaluate_snn
from .noise import KINDS, NoiseConfig, NoisyDevice, calibrate
from .online import grad_cosine_experiment
from .snn import NeuronParams, SpikingModel, init_student
from .teacher import TeacherModel, train_teacher

log = logging.getLogger("ltl")

COMMANDS = ("train-teacher", "distill", "calibrate", "eval", "diag-gradients", "bench", "export-subset")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one-line diagnostic instead of usage + message
        self.exit(2, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _arch(text: str) -> list:
    try:
        widths = [int(w) for w in text.split("-")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"arch must look like 784-800-10, got {text!r}") from None
    if len(widths) < 2 or min(widths) < 1:
        raise argparse.ArgumentTypeError(f"arch needs at least two positive widths, got {text!r}")
    return widths


def _int_list(text: str) -> list:
    return [_positive_int(t) for t in text.split(",") if t]


def _add_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("data and output")
    g.add_argument("--data", default=None, help="MNIST IDX directory (default: $LTL_DATA_DIR)")
    g.add_argument("--out", default="runs", help="output directory (default: runs)")
    g.add_argument("--config", default=None, help="flat key=value file with the same keys as these flags")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    g.add_argument("--run-id", default=None, help="run identifier written to CSV rows (default: command name)")
    g.add_argument("--teacher", default=None, help="teacher checkpoint (default: OUT/teacher.ltl)")
    g.add_argument("--student", default=None, help="student checkpoint (default: OUT/student.ltl)")
    g.add_argument("--train-limit", type=_positive_int, default=None, help="use only the first N training images")
    g.add_argument("--test-limit", type=_positive_int, default=None, help="use only the first N test images")
    g.add_argument("--timing", action="store_true", help="record wall_seconds in metric CSVs (breaks byte-identical reruns)")
    g.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    g = p.add_argument_group("network")
    g.add_argument("--arch", type=_arch, default=[784, 800, 800, 800, 10], help="layer widths (default: 784-800-800-800-10)")
    g.add_argument("--neuron", choices=("if", "lif"), default="if", help="spiking neuron model (default: if)")
    g.add_argument("--tau-m", type=_positive_float, default=10.0, help="LIF membrane time constant in steps (default: 10)")
    g.add_argument("--threshold", type=_positive_float, default=0.6, help="firing threshold (default: 0.6)")
    g.add_argument("--boxcar-p", type=_positive_float, default=0.4, help="surrogate support width p (default: 0.4)")
    g.add_argument("--init", choices=("zero", "uniform", "he"), default="zero",
                   help="student initialisation for distill (default: zero); diag-gradients always uses uniform")
    g.add_argument("--tw", type=_positive_int, default=16, help="time window T_w in steps (default: 16)")
    g.add_argument("--twarm", type=_nonneg_int, default=None, help="online warm-up steps (default: T_w // 4)")

    g = p.add_argument_group("distillation")
    g.add_argument("--mode", choices=("offline", "online"), default="offline", help="learning rule (default: offline)")
    g.add_argument("--strategy", choices=("parallel", "sequential"), default="parallel",
                   help="train all layers together or one after another (default: parallel)")
    g.add_argument("--epochs", type=_nonneg_int, default=5, help="distillation / calibration epochs (default: 5)")
    g.add_argument("--batch-size", type=_positive_int, default=8, help="distillation batch size (default: 8)")
    g.add_argument("--lr", type=_positive_float, default=1e-4, help="Adam learning rate (default: 1e-4)")
    g.add_argument("--beta1", type=float, default=0.9, help="Adam beta1 (default: 0.9)")
    g.add_argument("--beta2", type=float, default=0.999, help="Adam beta2 (default: 0.999)")
    g.add_argument("--adam-eps", type=_positive_float, default=1e-8, help="Adam epsilon (default: 1e-8)")
    g.add_argument("--decay-every", type=_positive_int, default=10, help="epochs between learning-rate decays (default: 10)")
    g.add_argument("--decay-factor", type=_positive_float, default=0.2, help="learning-rate decay factor (default: 0.2)")
    g.add_argument("--percentile", type=float, default=99.9, help="y_norm percentile (default: 99.9)")
    g.add_argument("--no-round-down", action="store_true", help="use raw target rates instead of floor(rate*T_w)/T_w")
    g.add_argument("--per-step-sgd", action="store_true", help="online: apply plain SGD at every step instead of batched Adam")
    g.add_argument("--sgd-lr", type=_positive_float, default=0.05, help="per-step SGD learning rate (default: 0.05)")

    g = p.add_argument_group("teacher")
    g.add_argument("--teacher-epochs", type=_nonneg_int, default=20, help="teacher epochs (default: 20)")
    g.add_argument("--teacher-lr", type=_positive_float, default=0.05, help="teacher SGD learning rate (default: 0.05)")
    g.add_argument("--momentum", type=float, default=0.9, help="teacher SGD momentum (default: 0.9)")
    g.add_argument("--weight-decay", type=float, default=5e-4, help="teacher weight decay (default: 5e-4)")
    g.add_argument("--teacher-batch-size", type=_positive_int, default=64, help="teacher batch size (default: 64)")

    g = p.add_argument_group("noise")
    g.add_argument("--noise", choices=KINDS, default=None, help="device noise model")
    g.add_argument("--noise-level", type=float, default=None,
                   help="sigma (mismatch, thermal), bit-width (quantization) or failure rate (silencing)")

    g = p.add_argument_group("diagnostics")
    g.add_argument("--batches", type=_positive_int, default=50, help="diag-gradients: number of batches (default: 50)")
    g.add_argument("--diag-batch-size", type=_positive_int, default=128, help="diag-gradients: batch size (default: 128)")
    g.add_argument("--tw-list", type=_int_list, default=[8, 16, 32], help="bench: comma-separated windows (default: 8,16,32)")
    g.add_argument("--bench-batch", type=_positive_int, default=64, help="bench: batch size (default: 64)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ltl", description="Local tandem learning: distill a ReLU MLP into a spiking network.")
    parser.add_argument("--version", action="version", version=f"ltl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "train-teacher": "train the ANN teacher; writes teacher.ltl and teacher_metrics.csv",
        "distill": "distill the teacher into a student; writes student.ltl and distill_metrics.csv",
        "calibrate": "deploy the student on a noisy device and recalibrate it online; writes recovery.csv",
        "eval": "accuracy and SynOps of a checkpoint; writes eval.csv and eval_synops.csv",
        "diag-gradients": "offline/online gradient cosine similarity; writes grad_cosine.csv",
        "bench": "memory and time of offline vs online training steps; writes bench.csv",
        "export-subset": "write the 5000-image MNIST sample shipped with mlxtend as IDX files into --out",
    }
    for name in COMMANDS:
        _add_flags(sub.add_parser(name, help=helps[name], description=helps[name]))
    return parser


def _config_argv(path: str, parser: argparse.ArgumentParser, command: str) -> list:
    """Turn a key=value file into flags placed before the explicit ones."""
    sub = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    argv = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest == "config":
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        action = actions[dest]
        flag = action.option_strings[0] if action.option_strings[0].startswith("--") else action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ValueError(f"{path}:{lineno}: {key} expects true/false, got {value!r}")
        else:
            argv += [flag, value]
    return argv


def parse_args(argv: Optional[list] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if args.config:
        try:
            extra = _config_argv(args.config, parser, args.command)
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
        args = parser.parse_args([args.command] + extra + argv[1:])
    _check(args, parser)
    return args


def _check(args, parser):
    if args.twarm is not None:
        if args.command == "distill" and args.mode == "offline":
            print(f"{parser.prog}: warning: --twarm only applies to online mode; ignored", file=sys.stderr)
            args.twarm = None
        elif args.twarm >= args.tw:
            parser.error(f"--twarm must be smaller than --tw ({args.twarm} >= {args.tw})")
    if args.command == "calibrate":
        if args.noise is None or args.noise_level is None:
            parser.error("calibrate needs --noise and --noise-level")
    if args.noise is not None and args.noise_level is not None:
        try:
            NoiseConfig(args.noise, args.noise_level, args.seed)
        except ValueError as exc:
            parser.error(str(exc))
    if not 0 < args.percentile <= 100:
        parser.error(f"--percentile must lie in (0, 100], got {args.percentile}")
    if args.arch[0] != 784 and args.command not in ("bench", "export-subset"):
        log.debug("non-MNIST input width %d", args.arch[0])


# -- helpers ---------------------------------------------------------------

def neuron_params(args) -> NeuronParams:
    if args.neuron == "if":
        return NeuronParams.if_neuron(args.threshold, args.boxcar_p)
    return NeuronParams.lif(args.tau_m, args.threshold, args.boxcar_p)


def distill_config(args) -> DistillConfig:
    return DistillConfig(
        T_w=args.tw, T_warm=args.twarm, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        betas=(args.beta1, args.beta2), eps=args.adam_eps, decay_every=args.decay_every,
        decay_factor=args.decay_factor, strategy=args.strategy, percentile=args.percentile,
        round_down=not args.no_round_down, seed=args.seed, per_step_sgd=args.per_step_sgd,
        sgd_lr=args.sgd_lr, timing=args.timing, run_id=args.run_id or args.command,
    )


def _data(args):
    path = args.data or os.environ.get("LTL_DATA_DIR")
    if not path:
        raise FileNotFoundError("no dataset: pass --data DIR or set LTL_DATA_DIR")
    data = load_mnist(path)
    if args.train_limit:
        data.train = data.train.subset(args.train_limit)
    if args.test_limit:
        data.test = data.test.subset(args.test_limit)
    return data


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, kind, default: Path):
    path = Path(path) if path else default
    model = load_checkpoint(path)
    want = TeacherModel if kind == "teacher" else SpikingModel
    if not isinstance(model, want):
        raise LTLError(f"{path} holds a {type(model).__name__}, expected a {kind}")
    return model


def _wall(start, args):
    return time.perf_counter() - start if args.timing else None


# -- commands --------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    data, out = _data(args), _out(args)
    rows = []
    run_id = args.run_id or args.command
    start = time.perf_counter()

    def record(epoch, loss, model):
        acc = accuracy(model, data.test)
        rows.append({"run_id": run_id, "epoch": epoch, "layer": "all", "loss": loss, "accuracy": acc,
                     "synops_ratio": None, "wall_seconds": _wall(start, args)})

    teacher = train_teacher(data.train, args.arch, epochs=args.teacher_epochs, lr=args.teacher_lr,
                            momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
                            batch_size=args.teacher_batch_size, on_epoch=record)
    save_checkpoint(teacher, out / "teacher.ltl", rule="ann", seed=args.seed)
    export_metrics_csv(rows, out / "teacher_metrics.csv")
    final = rows[-1]["accuracy"] if rows else accuracy(teacher, data.test)
    print(f"teacher test accuracy {final:.4f} -> {out / 'teacher.ltl'}")
    return 0


def cmd_distill(args) -> int:
    data, out = _data(args), _out(args)
    teacher = _load(args.teacher, "teacher", out / "teacher.ltl")
    if teacher.arch != args.arch:
        log.info("using the teacher's widths %s", teacher.arch)
    student = SpikingModel(init_student(teacher.arch, seed=args.seed, scheme=args.init), neuron_params(args))
    cfg = distill_config(args)
    result = distill(teacher, student, data.train, cfg, args.mode, test=data.test)
    meta = {"mode": args.mode, "strategy": args.strategy, "T_w": args.tw, "norms": result.norms}
    save_checkpoint(result.model, out / "student.ltl", rule=args.mode, seed=args.seed, extra=meta)
    export_metrics_csv(result.history, out / "distill_metrics.csv")
    teacher_acc = accuracy(teacher, data.test)
    final = result.accuracies[-1] if result.accuracies else accuracy(result.model, data.test, args.tw)
    print(f"{args.mode} {args.strategy} student accuracy {final:.4f} (teacher {teacher_acc:.4f})")
    if result.convergence_epoch is not None:
        print(f"converged (final - 1%) at epoch {result.convergence_epoch}")
    if result.stage_epochs:
        export_metrics_csv(sorted(result.stage_epochs.items()), out / "layer_convergence.csv",
                           columns=("layer", "convergence_epoch"))
    for layer, epoch in result.stage_epochs.items():
        print(f"layer {layer} loss converged at epoch {epoch}")
    return 0


def cmd_calibrate(args) -> int:
    data, out = _data(args), _out(args)
    teacher = _load(args.teacher, "teacher", out / "teacher.ltl")
    clean = _load(args.student, "student", out / "student.ltl")
    noise = NoiseConfig(args.noise, args.noise_level, args.seed)
    clean_acc = accuracy(clean, data.test, args.tw)
    device = NoisyDevice(noise)
    noisy = device.deploy(clean)
    cfg = replace(distill_config(args), T_warm=args.twarm)
    result = calibrate(noisy, teacher, noise, data.train, data.test, epochs=args.epochs, T_w=args.tw,
                       T_warm=args.twarm, config=cfg, device=device, clean_accuracy=clean_acc)
    rows = [(epoch, acc, noise.kind, noise.level) for epoch, acc in result.curve]
    export_metrics_csv(rows, out / "recovery.csv", columns=("epoch", "accuracy", "noise_kind", "level"))
    save_checkpoint(result.model, out / "calibrated.ltl", rule="online-calibrated", seed=args.seed,
                    extra={"noise": noise.kind, "level": noise.level})
    print(f"{noise.kind} {noise.level:g}: clean {clean_acc:.4f}, uncalibrated {result.curve[0][1]:.4f}, "
          f"calibrated {result.curve[-1][1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    data, out = _data(args), _out(args)
    path = Path(args.student) if args.student else (Path(args.teacher) if args.teacher else out / "student.ltl")
    model = load_checkpoint(path)
    if isinstance(model, TeacherModel):
        acc = accuracy(model, data.test)
        export_metrics_csv([(str(path), acc, "", "", "", "")], out / "eval.csv",
                           columns=("model", "accuracy", "T_w", "ann_macs", "snn_acs", "synops_ratio"))
        print(f"teacher accuracy {acc:.4f}")
        return 0
    device = None
    if args.noise is not None:
        if args.noise_level is None:
            raise ValueError("--noise needs --noise-level")
        device = NoisyDevice(NoiseConfig(args.noise, args.noise_level, args.seed))
        model = device.deploy(model)
    ev = evaluate_snn(model, data.test.images, data.test.labels, args.tw, device=device)
    rep = ev.synops
    export_metrics_csv([(str(path), ev.accuracy, args.tw, rep.ann_macs, rep.snn_acs, rep.ratio)], out / "eval.csv",
                       columns=("model", "accuracy", "T_w", "ann_macs", "snn_acs", "synops_ratio"))
    export_metrics_csv(rep.rows(), out / "eval_synops.csv",
                       columns=("layer", "ann_macs", "snn_acs", "synops_ratio", "firing_rate"))
    print(f"accuracy {ev.accuracy:.4f} at T_w={args.tw}")
    print(f"{'layer':<8}{'ANN MACs':>12}{'SNN ACs':>14}{'ratio':>9}{'rate':>9}")
    for name, macs, acs, ratio, rate in rep.rows():
        ratio_s = f"{ratio:.4f}" if ratio != "" else ""
        rate_s = f"{rate:.4f}" if rate != "" else ""
        print(f"{name:<8}{macs!s:>12}{acs:>14.1f}{ratio_s:>9}{rate_s:>9}")
    print(f"estimated energy ratio (MAC = 5 AC): {rep.energy_ratio:.4f}")
    return 0


def cmd_diag_gradients(args) -> int:
    data, out = _data(args), _out(args)
    teacher = _load(args.teacher, "teacher", out / "teacher.ltl")
    student = init_student(teacher.arch, seed=args.seed, scheme="uniform")
    reports = grad_cosine_experiment(teacher, student, neuron_params(args), data.train.images, T_w=args.tw,
                                     T_warm=args.twarm, batches=args.batches, batch_size=args.diag_batch_size,
                                     seed=args.seed, round_down=not args.no_round_down)
    rows = [(r.layer, r.mean, r.std, r.n_batches, r.excluded) for r in reports]
    export_metrics_csv(rows, out / "grad_cosine.csv", columns=("layer", "mean", "std", "n_batches", "excluded"))
    for r in reports:
        print(f"layer {r.layer}: cosine {r.mean:.4f} +/- {r.std:.4f} over {r.n_batches} batches"
              + (f" ({r.excluded} excluded)" if r.excluded else ""))
    return 0


def cmd_bench(args) -> int:
    data, out = _data(args), _out(args)
    teacher = _load(args.teacher, "teacher", out / "teacher.ltl")
    model = SpikingModel(init_student(teacher.arch, seed=args.seed, scheme="uniform"), neuron_params(args))
    x = data.train.images[: args.bench_batch]
    rows = bench(model, teacher, x, args.tw_list)
    export_metrics_csv([r.as_tuple() for r in rows], out / "bench.csv", columns=BENCH_COLUMNS)
    print(f"{'mode':<8}{'T_w':>5}{'state MB':>11}{'peak MB':>10}{'seconds':>10}")
    for r in rows:
        print(f"{r.mode:<8}{r.T_w:>5}{r.state_bytes / 2**20:>11.2f}{r.peak_bytes / 2**20:>10.2f}{r.seconds:>10.3f}")
    return 0


def cmd_export_subset(args) -> int:
    path = export_mnist_subset(args.out, seed=args.seed)
    print(f"wrote MNIST sample to {path}")
    return 0


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "diag-gradients": cmd_diag_gradients,
    "bench": cmd_bench,
    "export-subset": cmd_export_subset,
}


def main(argv: Optional[list] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return HANDLERS[args.command](args)
    except (LTLError, ValueError, OSError, RuntimeError) as exc:
        print(f"ltl: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("ltl: error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
