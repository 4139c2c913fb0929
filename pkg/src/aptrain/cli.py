"""Command-line entry point: ``aptrain {train,sweep,compare,export-mnist5k}``.

Exit codes: 0 success, 2 usage error, 3 runtime error (including divergence).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import checkpoint, report
from .data import export_mnist5k, load_mnist_dir, load_mnist5k, stratified_split, synthetic_blobs
from .trainer import MODES, TrainConfig, TrainingDiverged, Trainer, make_network

EXIT_USAGE = 2
EXIT_RUNTIME = 3
DEFAULT_OUT = "apt_out"


class UsageError(Exception):
    pass


def _int_list(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _float_list(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


# flag name -> (TrainConfig field or None, converter)
OPTIONS = {
    "mode": ("mode", str),
    "init-bits": ("initial_bitwidth", int),
    "tmin": ("t_min", float),
    "tmax": ("t_max", float),
    "epochs": ("epochs", int),
    "batch": ("batch_size", int),
    "lr": ("lr", float),
    "decay-epochs": ("decay_epochs", _int_list),
    "momentum": ("momentum", float),
    "wd": ("weight_decay", float),
    "interval": ("interval", int),
    "ema-beta": ("ema_beta", float),
    "rounding": ("rounding", str),
    "seed": ("seed", int),
    "cost-fn": ("cost_fn", str),
    "recipe": (None, str),
    "data": (None, str),
    "arch": (None, str),
    "hidden": (None, int),
    "out": (None, str),
    "tmins": (None, _float_list),
    "jobs": (None, int),
}

RECIPES = {"paper": {}, "desk": {"epochs": 20, "decay_epochs": (10, 15)}}


@dataclass
class RunSpec:
    command: str
    cfg: TrainConfig
    data: str = "blobs"
    arch: str = "mlp"
    hidden: int = 128
    out: str = DEFAULT_OUT
    tmins: list = field(default_factory=list)
    jobs: int = 1
    histories: list = field(default_factory=list)
    targets: list | None = None


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; keys are flag names without the leading dashes."""
    values = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in OPTIONS:
                raise UsageError(f"{path}:{n}: unknown key {key!r}")
            values[key] = value
    return values


def _add_run_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="key=value file; flags override it")
    p.add_argument("--recipe", choices=sorted(RECIPES), default=S,
                   help="paper: 200 epochs, decay at 100/150 (default); desk: 20 epochs, decay at 10/15")
    p.add_argument("--mode", choices=MODES + ("fixed-k", "fp32-reference"), default=S)
    p.add_argument("--init-bits", default=S, help="initial (apt) or fixed bitwidth, default 6")
    p.add_argument("--tmin", default=S, help="raise a layer's bitwidth below this Gavg (6.0)")
    p.add_argument("--tmax", default=S, help="lower a layer's bitwidth above this Gavg (inf)")
    p.add_argument("--epochs", default=S)
    p.add_argument("--batch", default=S)
    p.add_argument("--lr", default=S)
    p.add_argument("--decay-epochs", default=S, help="comma list, lr /= 10 at each")
    p.add_argument("--momentum", default=S)
    p.add_argument("--wd", default=S, help="weight decay")
    p.add_argument("--interval", default=S, help="iterations between Gavg samples")
    p.add_argument("--ema-beta", default=S)
    p.add_argument("--rounding", choices=("nearest", "floor"), default=S)
    p.add_argument("--seed", default=S)
    p.add_argument("--cost-fn", choices=("linear", "quadratic"), default=S)
    p.add_argument("--data", default=S,
                   help="blobs[:n,classes,dim] | mnist5k | directory of MNIST-named IDX files")
    p.add_argument("--arch", choices=("linear", "mlp", "cnn"), default=S)
    p.add_argument("--hidden", default=S, help="hidden units of the mlp (128)")
    p.add_argument("--out", default=S, help=f"output directory (env APT_OUT_DIR, else {DEFAULT_OUT})")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="aptrain", description="Adaptive-precision quantized training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add_run_flags(sub.add_parser("train", help="train one model, write history CSV + checkpoint"))
    sweep = sub.add_parser("sweep", help="train once per t_min and summarize")
    _add_run_flags(sweep)
    sweep.add_argument("--tmins", default=argparse.SUPPRESS, help="comma list of t_min values")
    sweep.add_argument("--jobs", default=argparse.SUPPRESS, help="parallel runs (1)")
    cmp = sub.add_parser("compare", help="energy needed to reach target accuracies")
    cmp.add_argument("histories", nargs="+", help="history CSVs written by train/sweep")
    cmp.add_argument("--targets", type=_float_list, help="comma list of target accuracies")
    cmp.add_argument("--out", help="also write compare.csv here")
    exp = sub.add_parser("export-mnist5k", help="write the bundled MNIST-5k subset as IDX files")
    exp.add_argument("out", help="destination directory")
    exp.add_argument("--seed", type=int, default=0)
    return parser


def parse(argv, env=None) -> RunSpec | None:
    """Resolve ``argv`` into a RunSpec (flags > config file > defaults). ``None`` means help."""
    env = os.environ if env is None else env
    parser = build_parser()
    if not argv:
        return None
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    if command is None:
        return None
    if command == "compare":
        if len(ns["histories"]) < 2:
            raise UsageError("compare needs at least two histories")
        return RunSpec(command, TrainConfig(), histories=ns["histories"], targets=ns["targets"],
                       out=ns["out"])
    if command == "export-mnist5k":
        return RunSpec(command, TrainConfig(seed=ns["seed"]), out=ns["out"])

    raw = read_config_file(ns.pop("config")) if "config" in ns else {}
    raw.update({k.replace("_", "-"): v for k, v in ns.items()})
    values = {}
    for key, text in raw.items():
        try:
            values[key] = OPTIONS[key][1](text)
        except ValueError:
            raise UsageError(f"cannot parse --{key} value {text!r}") from None

    recipe = values.pop("recipe", "paper")
    if recipe not in RECIPES:
        raise UsageError(f"unknown recipe {recipe!r}")
    if values.get("arch", "mlp") not in ("linear", "mlp", "cnn"):
        raise UsageError(f"unknown arch {values['arch']!r}")
    cfg_kwargs = dict(RECIPES[recipe])
    for key in list(values):
        name = OPTIONS[key][0]
        if name is not None:
            cfg_kwargs[name] = values.pop(key)
    try:
        cfg = TrainConfig(**cfg_kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    spec = RunSpec(command, cfg, out=env.get("APT_OUT_DIR", DEFAULT_OUT))
    for key, value in values.items():
        setattr(spec, key, value)
    if spec.hidden < 1:
        raise UsageError("--hidden must be >= 1")
    if command == "sweep":
        if not spec.tmins:
            raise UsageError("sweep needs --tmins")
        for t in spec.tmins:
            if t > cfg.t_max:
                raise UsageError(f"t_min {t} exceeds t_max {cfg.t_max}")
        if spec.jobs < 1:
            raise UsageError("--jobs must be >= 1")
    return spec


def load_data(name, seed=0):
    """Return ``(train, test)`` for a ``--data`` value."""
    if name == "mnist5k":
        return stratified_split(load_mnist5k(), 0.2, seed=0)
    if name.startswith("blobs"):
        n, classes, dim = 2000, 10, 20
        if ":" in name:
            try:
                n, classes, dim = _int_list(name.split(":", 1)[1])
            except ValueError:
                raise UsageError(f"bad blobs spec {name!r}, expected blobs:n,classes,dim") from None
        return stratified_split(synthetic_blobs(n, classes, dim, seed=seed), 0.2, seed=seed)
    if os.path.isdir(name):
        return load_mnist_dir(name)
    raise FileNotFoundError(f"data source {name!r} is neither a known generator nor a directory")


def train_one(spec: RunSpec, cfg: TrainConfig, data, history_path, checkpoint_path=None):
    """Run one training; returns ``(history, status)`` and always writes the history CSV."""
    train, test = data
    trainer = Trainer(cfg, make_network(cfg, spec.arch, train, spec.hidden), train, test)
    try:
        trainer.run()
        status = "ok"
    except TrainingDiverged as exc:
        logging.getLogger(__name__).error("%s", exc)
        status = "diverged"
    report.write_history(history_path, trainer.history)
    if checkpoint_path and status == "ok":
        checkpoint.save(trainer.net, checkpoint_path)
    return trainer.history, status


def _sweep_job(args):
    spec, t, data = args
    cfg = TrainConfig(**{**vars(spec.cfg), "t_min": t})
    history, status = train_one(spec, cfg, data, os.path.join(spec.out, f"tmin_{t!r}.csv"))
    if not history:
        return [t, None, None, None, status]
    last = history[-1]
    return [t, last.test_acc, last.energy_norm, last.mem_norm, status]


def cmd_train(spec: RunSpec) -> int:
    os.makedirs(spec.out, exist_ok=True)
    data = load_data(spec.data, spec.cfg.seed)
    history, status = train_one(spec, spec.cfg, data, os.path.join(spec.out, "history.csv"),
                                os.path.join(spec.out, "model.apt"))
    if history:
        last = history[-1]
        print(f"final acc {last.test_acc:.4f}  energy {last.energy_norm:.4f}  "
              f"memory {last.mem_norm:.4f}  bits {list(last.bitwidths)}")
    return 0 if status == "ok" else EXIT_RUNTIME


def cmd_sweep(spec: RunSpec) -> int:
    os.makedirs(spec.out, exist_ok=True)
    data = load_data(spec.data, spec.cfg.seed)
    jobs = [(spec, t, data) for t in spec.tmins]
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    report.write_sweep(os.path.join(spec.out, "sweep.csv"), rows)
    ok = sorted((r for r in rows if r[4] == "ok"), key=lambda r: r[0])
    for label, col in (("final_acc", 1), ("energy_norm", 2), ("mem_norm", 3)):
        inv = report.count_inversions([r[col] for r in ok])
        print(f"{label}: {inv} inversion(s) in increasing t_min")
    return 0


def cmd_compare(spec: RunSpec) -> int:
    named = [(os.path.splitext(os.path.basename(p))[0], report.read_history(p))
             for p in spec.histories]
    if any(not h for _, h in named):
        raise ValueError("a history file has no epochs")
    targets = spec.targets or report.default_targets([h for _, h in named])
    text = report.table_csv(*report.compare_table(named, targets))
    sys.stdout.write(text)
    if spec.out:
        os.makedirs(spec.out, exist_ok=True)
        with open(os.path.join(spec.out, "compare.csv"), "w", newline="") as f:
            f.write(text)
    return 0


def cmd_export(spec: RunSpec) -> int:
    train, test = export_mnist5k(spec.out, seed=spec.cfg.seed)
    print(f"wrote {len(train)} train / {len(test)} test images to {spec.out}")
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "compare": cmd_compare,
            "export-mnist5k": cmd_export}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = parse(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if spec is None:
        build_parser().print_help()
        return 0
    try:
        return COMMANDS[spec.command](spec)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main():
    sys.exit(main())
