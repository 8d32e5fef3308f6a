"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys mirror the long flag names; flags given on the command line win.
Exit status: 0 on success, 1 for an invalid configuration or data, 2 for a
usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, load_dataset, save_dataset, synth_generate
from .data.dataset import DatasetFormatError
from .layers import ConfigError
from .models import ModelConfig, TemporalConfig, build_model, count_params, load_checkpoint, read_checkpoint_header
from .protocols import MetricReport, ProtocolSpec, build_split, occurrence, select_rare
from .training import TrainConfig, evaluate, train, write_log

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _context_dim(value: str):
    return int(value) if value.lstrip("-").isdigit() else value


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=["fc", "gp", "lf", "es", "sfs", "sr"], default="sr")
    p.add_argument("--joints", type=int, default=17)
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--groups", type=int, default=5)
    p.add_argument("--H", dest="H", type=_context_dim, default=1,
                   help="context width: an integer, 'full', 'group' or a percentage like '25%%'")
    p.add_argument("--recombine", choices=["concat", "mult", "add"], default="mult")
    p.add_argument("--l-fuse", type=int)
    p.add_argument("--l-split", type=int)
    p.add_argument("--l-link", type=int)
    p.add_argument("--shuffle-groups", type=int, default=0)
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--temporal", action="store_true", help="dilated temporal convolution model")
    p.add_argument("--kernels", type=int, nargs="+", default=[3, 3, 3, 3, 3])


def _add_protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", choices=["subject", "cross-action", "rare-pose", "compositional"],
                   default="subject")
    p.add_argument("--train-subjects", nargs="+", default=[])
    p.add_argument("--test-subjects", nargs="+", default=[])
    p.add_argument("--train-action")
    p.add_argument("--sigma", type=float, nargs="+", default=[100.0])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srlift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"srlift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic pose dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=False)
    p.add_argument("--n-subjects", type=int, default=5)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--upper", nargs="+", default=["raise", "swing"])
    p.add_argument("--lower", nargs="+", default=["walk", "squat"])
    p.add_argument("--combos", default="all", help="'all', 'diagonal' or comma-separated upper-lower pairs")
    p.add_argument("--noise-px", type=float, default=2.0)

    p = sub.add_parser("train", help="train a lifting network")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_model_flags(p)
    _add_protocol_flags(p)
    p.add_argument("--rare", type=float, default=100.0)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.add_argument("--normalization", choices=["basic", "pixel"], default="basic")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    _add_protocol_flags(p)
    p.add_argument("--rare", type=float, default=100.0)
    p.add_argument("--flip-test", action="store_true")
    p.add_argument("--normalization", choices=["basic", "pixel"])
    p.add_argument("--deciles", action="store_true", help="add per-rareness-decile slices")
    p.add_argument("--rigid", action="store_true", help="PA alignment without scale")

    p = sub.add_parser("rank-rare", help="rank poses by occurrence and select the rarest")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--sigma", type=float, nargs="+", default=[100.0])
    p.add_argument("--R", dest="R", type=float, default=20.0)
    p.add_argument("--out")

    p = sub.add_parser("param-count", help="print the learnable parameter count")
    p.add_argument("--config")
    _add_model_flags(p)

    p = sub.add_parser("report", help="merge metric reports into one CSV table")
    p.add_argument("--config")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--out")

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write outputs here instead of the recorded location")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def read_config_file(path, sub: argparse.ArgumentParser) -> dict:
    """Turn ``key = value`` lines into parser defaults, converting with each flag's type."""
    actions = {}
    for a in sub._actions:
        for opt in a.option_strings:
            if opt.startswith("--"):
                actions[opt[2:]] = a
                actions[opt[2:].replace("-", "_")] = a
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                key, sep, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            action = actions.get(key)
            if action is None or key in ("config", "help"):
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    val = _parse_bool(value)
                elif action.nargs in ("+", "*"):
                    val = [action.type(v) if action.type else v for v in value.replace(",", " ").split()]
                else:
                    val = action.type(value) if action.type else value
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
            if action.choices is not None:
                for v in val if isinstance(val, list) else [val]:
                    if v not in action.choices:
                        raise ConfigError(f"{path}:{lineno}: {key} must be one of {list(action.choices)}")
            out[action.dest] = val
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        sub.set_defaults(**read_config_file(args.config, sub))
        args = parser.parse_args(argv)
    return args


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError(f"{args.command}: missing required {', '.join(missing)}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(path, args: argparse.Namespace, inputs: dict, outputs: list[str], started: str) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "config"}
    manifest = {
        "command": args.command,
        "config": resolved,
        "seeds": {k: resolved[k] for k in ("seed", "shuffle_seed") if resolved.get(k) is not None},
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _to_argv(command: str, config: dict) -> list[str]:
    parser = build_parser()
    sub = _subparser(parser, command)
    argv = [command]
    for a in sub._actions:
        if not a.option_strings or a.dest in ("help", "config") or a.dest not in config:
            continue
        val = config[a.dest]
        flag = next(o for o in a.option_strings if o.startswith("--"))
        if isinstance(a, argparse._StoreTrueAction):
            if val:
                argv.append(flag)
        elif val is None:
            continue
        elif isinstance(val, list):
            if val:
                argv += [flag] + [str(v) for v in val]
        else:
            argv += [flag, str(val)]
    return argv


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _model_config(args) -> ModelConfig:
    temporal = TemporalConfig(tuple(args.kernels)) if args.temporal else None
    return ModelConfig(kind=args.model, n_joints=args.joints, n_layers=args.layers, width=args.width,
                       groups=args.groups, context_dim=args.H, recombine=args.recombine,
                       l_fuse=args.l_fuse, l_split=args.l_split, l_link=args.l_link,
                       shuffle_groups=args.shuffle_groups, shuffle_seed=args.shuffle_seed,
                       temporal=temporal)


def _protocol(args, rare: float) -> ProtocolSpec:
    sigma = args.sigma[0] if len(args.sigma) == 1 else tuple(args.sigma)
    return ProtocolSpec(kind=args.protocol, train_subjects=tuple(args.train_subjects),
                        test_subjects=tuple(args.test_subjects), train_action=args.train_action,
                        rare_percent=rare, sigma=sigma)


def cmd_synth_data(args, started: str) -> int:
    _require(args, "seed", "out")
    combos = args.combos
    if combos not in ("all", "diagonal"):
        combos = tuple(tuple(c.split("-", 1)) for c in combos.split(","))
    cfg = SynthConfig(n_subjects=args.n_subjects, upper_patterns=tuple(args.upper),
                      lower_patterns=tuple(args.lower), combos=combos, frames=args.frames,
                      n_cameras=args.cameras, noise_px=args.noise_px)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, synth_generate(cfg, args.seed))
    write_manifest(out.with_name(out.name + ".manifest.json"), args, {}, [str(out)], started)
    return 0


def cmd_train(args, started: str) -> int:
    _require(args, "data", "seed", "out")
    config = _model_config(args)
    proto = _protocol(args, args.rare)
    tc = TrainConfig(lr=args.lr, decay=args.decay, epochs=args.epochs, batch_size=args.batch_size,
                     seed=args.seed, flip=not args.no_flip, precision=args.precision,
                     normalization=args.normalization)
    data = load_dataset(args.data)
    train_set, _ = build_split(data, proto)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, args.seed)
    train(model, train_set, tc, out_dir=out)
    if tc.epochs == 0:
        from .models import save_checkpoint
        from .training import fit_normalization
        model.normalization = fit_normalization(train_set, tc.normalization)
        save_checkpoint(out / "model.ckpt", model, extra={"epoch": -1, "train": tc.to_dict()})
        write_log(out / "train_log.csv", [])
    write_manifest(out / MANIFEST, args, {"data": str(args.data)},
                   [str(out / "model.ckpt"), str(out / "train_log.csv")], started)
    print(f"trained {config.kind} ({count_params(model)} parameters) on {len(train_set)} frames -> {out}")
    return 0


def cmd_eval(args, started: str) -> int:
    _require(args, "ckpt", "data", "out")
    header = read_checkpoint_header(args.ckpt)
    trained = (header.get("normalization") or {}).get("kind")
    if args.normalization is not None and args.normalization != trained:
        raise ConfigError(f"normalization mismatch: checkpoint was trained with {trained!r}, "
                          f"evaluation requested {args.normalization!r}")
    model = load_checkpoint(args.ckpt)
    proto = _protocol(args, args.rare)
    _, test_set = build_split(load_dataset(args.data), proto)
    sigma = proto.sigma if (args.deciles or proto.kind == "rare_pose") else None
    report, _ = evaluate(model, test_set, flip_test=args.flip_test, normalization=args.normalization,
                         sigma=sigma, pa_scale=not args.rigid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.table(), encoding="utf-8")
    write_manifest(out / MANIFEST, args, {"ckpt": str(args.ckpt), "data": str(args.data)},
                   [str(out / "report.csv"), str(out / "report.txt")], started)
    print(report.table(), end="")
    return 0


def cmd_rank_rare(args, started: str) -> int:
    _require(args, "data", "out")
    data = load_dataset(args.data)
    sigma = args.sigma[0] if len(args.sigma) == 1 else np.asarray(args.sigma)
    occ = occurrence(data.pose_3d, data.pose_3d, sigma)
    idx = select_rare(data.pose_3d, args.R, sigma, occ=occ)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "occurrence"])
        for i in idx:
            w.writerow([int(i), repr(float(occ[i]))])
    write_manifest(out / MANIFEST, args, {"data": str(args.data)}, [str(out / "rare.csv")], started)
    print(f"selected {len(idx)} of {len(data)} poses -> {out / 'rare.csv'}")
    return 0


def cmd_param_count(args, started: str) -> int:
    print(count_params(build_model(_model_config(args), 0)))
    return 0


def cmd_report(args, started: str) -> int:
    _require(args, "runs")
    rows = []
    for run in args.runs:
        path = Path(run)
        path = path / "report.csv" if path.is_dir() else path
        report = MetricReport.from_csv(path.read_text(encoding="utf-8"))
        name = path.parent.name if path.name == "report.csv" else path.stem
        rows += [(name, *r) for r in report.rows]
    lines = ["run,metric,slice,value,count"] + \
        [",".join([run, m, s, repr(float(v)), str(n)]) for run, m, s, v, n in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_manifest(out.with_name(out.name + ".manifest.json"), args,
                       {"runs": [str(r) for r in args.runs]}, [str(out)], started)
    else:
        sys.stdout.write(text)
    return 0


def cmd_replay(args, started: str) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    config = dict(manifest["config"])
    if args.out:
        config["out"] = args.out
    return main(_to_argv(manifest["command"], config))


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "eval": cmd_eval, "rank-rare": cmd_rank_rare,
            "param-count": cmd_param_count, "report": cmd_report, "replay": cmd_replay}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args, _now())
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetFormatError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
