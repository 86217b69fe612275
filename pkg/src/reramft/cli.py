"""Command-line front end.

Exit status: 0 on success, 2 for usage errors (bad flags, missing input
files, invalid configuration), 1 for failures while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from .faults import DEFAULT_ON_OFF_RATIO, FaultModel
from .harness import io as hio
from .harness.experiment import ExperimentSpec, evaluate_with_faults, sweep, verify_expectation
from .mapping import MappingScheme
from .pruning import (PruneSearchConfig, hierarchical_progressive_prune, magnitude_prune, partition_blocks,
                      prune_ratio)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_DATA = "data/mnist"


class UsageError(Exception):
    pass


def parse_floats(text):
    """``"0.1,0.5"`` or ``"start:stop:step"`` (stop inclusive) or a mix of both."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            try:
                start, stop, step = (float(x) for x in part.split(":"))
            except ValueError:
                raise UsageError(f"bad range {part!r}; expected start:stop:step") from None
            if step <= 0:
                raise UsageError(f"range step must be positive in {part!r}")
            n = int(np.floor((stop - start) / step + 1e-9))
            out.extend(round(start + i * step, 12) for i in range(n + 1))
        else:
            try:
                out.append(float(part))
            except ValueError:
                raise UsageError(f"not a number: {part!r}") from None
    return out


def parse_ints(text):
    return [int(round(x)) for x in parse_floats(text)]


# --- parser --------------------------------------------------------------------

def _common(p, seed=True, jobs=False):
    p.add_argument("--config", help="JSON file of flag defaults (same keys as the provenance echo); flags override it")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="base random seed (default 0; always echoed)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="worker processes for Monte-Carlo trials; results do not depend on it")


def _data(p):
    p.add_argument("--data", default=DEFAULT_DATA,
                   help=f"dataset: MNIST IDX directory, mnist:<dir>, or cifar10:<batch file> (default {DEFAULT_DATA})")
    p.add_argument("--eval-subset", type=int, default=None, help="evaluate on the first N test samples only (default: full set)")


def _faults(p):
    p.add_argument("--fault-rate", type=float, default=None, help="total per-cell stuck-at rate, split by --on-off-ratio")
    p.add_argument("--on-off-ratio", type=float, default=DEFAULT_ON_OFF_RATIO,
                   help=f"stuck-on : stuck-off ratio used to split rates (default {DEFAULT_ON_OFF_RATIO})")
    p.add_argument("--p-off", type=float, default=None, help="explicit per-cell stuck-off probability")
    p.add_argument("--p-on", type=float, default=None, help="explicit per-cell stuck-on probability")


def _mapping(p, multi=False):
    if multi:
        p.add_argument("--scheme", default="differential",
                       help="comma list of mapping schemes: two_column, offset, differential")
    else:
        p.add_argument("--scheme", default="differential", help="mapping scheme: two_column, offset or differential")
    p.add_argument("--tile-rows", type=int, default=128, help="crossbar tile rows (default 128)")
    p.add_argument("--tile-cols", type=int, default=128, help="crossbar tile columns (default 128)")


def _finetune(p):
    p.add_argument("--finetune-epochs", type=int, default=0, help="masked fine-tuning epochs after pruning (default 0)")
    p.add_argument("--finetune-lr", type=float, default=0.02, help="fine-tuning learning rate (default 0.02)")
    p.add_argument("--finetune-momentum", type=float, default=0.9, help="fine-tuning momentum (default 0.9)")


def build_parser():
    parser = argparse.ArgumentParser(prog="reramft", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a reference model from scratch")
    _common(p)
    p.add_argument("--arch", choices=sorted(nn.ARCHITECTURES), default="mlp", help="reference architecture (default mlp)")
    p.add_argument("--data", default=DEFAULT_DATA, help=f"MNIST IDX directory (default {DEFAULT_DATA})")
    p.add_argument("--epochs", type=int, default=5, help="training epochs (default 5)")
    p.add_argument("--lr", type=float, default=0.1, help="learning rate (default 0.1)")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    p.add_argument("--batch-size", type=int, default=128, help="minibatch size (default 128)")
    p.add_argument("--out", required=True, help="output model file (.rfsm)")

    p = sub.add_parser("prune", help="magnitude-prune a model, optionally fine-tuning under the mask")
    _common(p)
    p.add_argument("--model", required=True, help="input model file")
    p.add_argument("--ratio", type=float, required=True, help="fraction of weights to zero within the pooled layers")
    p.add_argument("--layers", default=None, help="comma list of layer indices pooled as one block (default: all weighted layers)")
    p.add_argument("--data", default=DEFAULT_DATA, help=f"MNIST IDX directory used for fine-tuning (default {DEFAULT_DATA})")
    _finetune(p)
    p.add_argument("--out", required=True, help="output model file")

    p = sub.add_parser("search", help="hierarchical progressive pruning guided by faulted accuracy")
    _common(p, jobs=True)
    p.add_argument("--model", required=True, help="trained input model file")
    _data(p)
    _mapping(p)
    _faults(p)
    p.add_argument("--th", type=float, default=0.5, help="acceptable accuracy drop in percentage points (default 0.5)")
    p.add_argument("--ratios", default="0.1:0.9:0.1", help="ascending candidate ratios, list or start:stop:step")
    p.add_argument("--trials", type=int, default=100, help="Monte-Carlo trials per evaluation (default 100)")
    _finetune(p)
    p.add_argument("--out", default="best.rfsm", help="file for the best model (default best.rfsm)")
    p.add_argument("--trace", default=None, help="JSON-lines trace file (default <out>.trace.jsonl)")

    p = sub.add_parser("inject", help="Monte-Carlo fault injection at one operating point")
    _common(p, jobs=True)
    p.add_argument("--model", required=True, help="model file")
    _data(p)
    _mapping(p)
    _faults(p)
    p.add_argument("--trials", type=int, default=100, help="Monte-Carlo trials (default 100)")
    p.add_argument("--fixed-device", action="store_true", help="reuse one fault mask for every trial")
    p.add_argument("--include-padding", action="store_true", help="also sample faults in unused tile cells")
    p.add_argument("--out", default=None, help="optional JSON file for the point statistics")

    p = sub.add_parser("sweep", help="grid over scheme x fault rate x pruning ratio, CSV + JSON report")
    _common(p, jobs=True)
    p.add_argument("--model", required=True, help="model file")
    _data(p)
    _mapping(p, multi=True)
    p.add_argument("--rates", default=None, help="total fault rates, list or start:stop:step; split by --on-off-ratio")
    p.add_argument("--on-off-ratio", type=float, default=DEFAULT_ON_OFF_RATIO,
                   help=f"stuck-on : stuck-off ratio (default {DEFAULT_ON_OFF_RATIO})")
    p.add_argument("--p-off", default=None, help="explicit stuck-off probabilities (list), paired with --p-on")
    p.add_argument("--p-on", default=None, help="explicit stuck-on probabilities (list), paired with --p-off")
    p.add_argument("--ratios", default="0", help="pruning ratios, list or start:stop:step (default 0)")
    p.add_argument("--trials", type=int, default=100, help="Monte-Carlo trials per grid point (default 100)")
    _finetune(p)
    p.add_argument("--fixed-device", action="store_true", help="reuse one fault mask for every trial")
    p.add_argument("--include-padding", action="store_true", help="also sample faults in unused tile cells")
    p.add_argument("--out", required=True, help="CSV report path; a .json companion is written beside it")

    p = sub.add_parser("verify-expectation", help="Monte-Carlo check of the analytic mismatch expectation")
    _common(p)
    p.add_argument("--cells", type=int, default=1_000_000, help="single-cell weights per trial (default 1000000)")
    p.add_argument("--rate", default=None, help="total fault rate(s), list; split by --on-off-ratio")
    p.add_argument("--on-off-ratio", type=float, default=DEFAULT_ON_OFF_RATIO,
                   help=f"stuck-on : stuck-off ratio (default {DEFAULT_ON_OFF_RATIO})")
    p.add_argument("--p-off", type=float, default=None, help="explicit stuck-off probability")
    p.add_argument("--p-on", type=float, default=None, help="explicit stuck-on probability")
    p.add_argument("--ratio", default="0", help="pruning ratio(s) R_p, list or start:stop:step (default 0)")
    p.add_argument("--trials", type=int, default=1, help="repetitions per ratio (default 1)")
    p.add_argument("--out", default=None, help="optional CSV table; a .json companion is written beside it")

    p = sub.add_parser("inspect", help="describe a model container or IDX file")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("path", help="model (.rfsm) or IDX file")
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    return None


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        cfg = cfg.get("config", cfg)
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        unknown = set(cfg) - known - {"command", "version"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in known and k != "config"})
        args = parser.parse_args(argv)
    return args


# --- commands ------------------------------------------------------------------

def _emit(obj):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _provenance(args):
    cfg = {k: v for k, v in vars(args).items() if k != "config"}
    return {"tool": "reramft", "version": __version__, "format_version": hio.VERSION, "config": cfg}


def _fault_model(args):
    try:
        if args.p_off is not None or args.p_on is not None:
            return FaultModel(args.p_off or 0.0, args.p_on or 0.0)
        if args.fault_rate is None:
            raise UsageError("give --fault-rate or --p-off/--p-on")
        return FaultModel.from_rate(args.fault_rate, args.on_off_ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_model(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return hio.load_model(path)


def _load_eval(args):
    return hio.load_dataset(args.data, "test").subset(args.eval_subset)


def _check_data(spec):
    kind, _, rest = str(spec).partition(":")
    path = rest.partition(":")[0] if kind in ("mnist", "cifar10") else spec
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")


def cmd_train(args):
    _check_data(args.data)
    prov = _provenance(args)
    _emit({"provenance": prov})
    train = hio.load_dataset(args.data, "train")
    test = hio.load_dataset(args.data, "test")
    model = nn.ARCHITECTURES[args.arch](seed=args.seed)
    model = nn.train_sgd(model, train, args.epochs, args.lr, args.momentum, seed=args.seed,
                         batch_size=args.batch_size)
    acc = nn.evaluate_accuracy(model, test)
    hio.save_model(model, args.out, provenance=prov)
    _emit({"model": args.out, "test_accuracy": acc})


def cmd_prune(args):
    model = _load_model(args.model)
    layers = parse_ints(args.layers) if args.layers else model.prunable()
    if args.finetune_epochs > 0:
        _check_data(args.data)
    prov = _provenance(args)
    _emit({"provenance": prov})
    pruned = magnitude_prune(model, layers, args.ratio)
    if args.finetune_epochs > 0:
        pruned = nn.train_sgd(pruned, hio.load_dataset(args.data, "train"), args.finetune_epochs,
                              args.finetune_lr, args.finetune_momentum, seed=args.seed)
    hio.save_model(pruned, args.out, provenance=prov)
    _emit({"model": args.out, "prune_ratio": prune_ratio(pruned)})


def cmd_search(args):
    model = _load_model(args.model)
    _check_data(args.data)
    fm = _fault_model(args)
    try:
        cfg = PruneSearchConfig(th=args.th / 100.0, ratios=parse_floats(args.ratios), trials=args.trials,
                                fault_model=fm, scheme=MappingScheme.parse(args.scheme), seed=args.seed,
                                finetune_epochs=args.finetune_epochs, finetune_lr=args.finetune_lr,
                                finetune_momentum=args.finetune_momentum, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    prov = _provenance(args)
    cfg.dataset = _load_eval(args)
    if cfg.finetune_epochs > 0:
        cfg.finetune_data = hio.load_dataset(args.data, "train")
    trace_path = Path(args.trace or args.out + ".trace.jsonl")
    with open(trace_path, "w") as fh:
        def log(rec):
            line = json.dumps(rec, sort_keys=True)
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        log({"event": "provenance", **prov})
        partition = partition_blocks(model)
        log({"event": "blocks", "blocks": [list(b) for b in partition.blocks]})

        def evaluate(m):
            stats = evaluate_with_faults(m, cfg.scheme, cfg.fault_model, cfg.dataset, cfg.trials, cfg.seed,
                                         tile_rows=args.tile_rows, tile_cols=args.tile_cols, jobs=cfg.jobs)
            return stats.acc_mean, stats.acc_std

        best, trace = hierarchical_progressive_prune(model, partition, cfg, evaluate=evaluate)
        for rec in trace.records():
            log(rec)
    hio.save_model(best, args.out, provenance=prov)
    _emit({"model": args.out, "trace": str(trace_path), "prune_ratio": prune_ratio(best)})


def cmd_inject(args):
    model = _load_model(args.model)
    _check_data(args.data)
    fm = _fault_model(args)
    scheme = MappingScheme.parse(args.scheme)
    prov = _provenance(args)
    _emit({"provenance": prov})
    stats = evaluate_with_faults(model, scheme, fm, _load_eval(args), args.trials, args.seed,
                                 tile_rows=args.tile_rows, tile_cols=args.tile_cols, jobs=args.jobs,
                                 fixed_device=args.fixed_device, include_padding=args.include_padding)
    result = {"scheme": scheme.value, "p_off": fm.p_off, "p_on": fm.p_on, "prune_ratio": prune_ratio(model),
              **stats.summary(), "acc_sem": stats.acc_sem}
    if args.out:
        Path(args.out).write_text(json.dumps({"provenance": prov, "result": result}, indent=1, sort_keys=True))
    summary = {k: v for k, v in result.items() if k != "accuracies"}
    _emit(summary)


def _sweep_spec(args):
    schemes = [s for s in args.scheme.split(",") if s.strip()]
    ratios = parse_floats(args.ratios)
    common = dict(model_path=args.model, dataset=args.data, schemes=schemes, ratios=ratios, trials=args.trials,
                  seed=args.seed, out=args.out, eval_subset=args.eval_subset, tile_rows=args.tile_rows,
                  tile_cols=args.tile_cols, finetune_epochs=args.finetune_epochs, finetune_lr=args.finetune_lr,
                  finetune_momentum=args.finetune_momentum, include_padding=args.include_padding,
                  fixed_device=args.fixed_device)
    if args.p_off is not None or args.p_on is not None:
        offs = parse_floats(args.p_off or "0")
        ons = parse_floats(args.p_on or "0")
        if len(offs) == 1:
            offs = offs * len(ons)
        if len(ons) == 1:
            ons = ons * len(offs)
        if len(offs) != len(ons):
            raise UsageError("--p-off and --p-on lists must have equal length")
        return ExperimentSpec(fault_points=list(zip(offs, ons)), **common)
    if args.rates is None:
        raise UsageError("give --rates or --p-off/--p-on")
    return ExperimentSpec.from_rates(parse_floats(args.rates), args.on_off_ratio, **common)


def cmd_sweep(args):
    _load_model(args.model)
    _check_data(args.data)
    try:
        spec = _sweep_spec(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit({"provenance": _provenance(args)})
    report = sweep(spec, jobs=args.jobs, log=lambda p: _emit({k: v for k, v in p.items() if k != "accuracies"}))
    failed = sum(p.get("status") != "ok" for p in report.points)
    _emit({"csv": args.out, "json": str(Path(args.out).with_suffix(".json")), "points": len(report.points),
           "failed": failed})
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify(args):
    try:
        if args.p_off is not None or args.p_on is not None:
            fms = [FaultModel(args.p_off or 0.0, args.p_on or 0.0)]
        elif args.rate is not None:
            fms = [FaultModel.from_rate(r, args.on_off_ratio) for r in parse_floats(args.rate)]
        else:
            raise UsageError("give --rate or --p-off/--p-on")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ratios = parse_floats(args.ratio)
    if any(not 0 <= r <= 1 for r in ratios) or args.cells < 1 or args.trials < 1:
        raise UsageError("ratios must lie in [0, 1]; cells and trials must be >= 1")
    prov = _provenance(args)
    print("# provenance " + json.dumps(prov, sort_keys=True))
    rows = []
    for k, fm in enumerate(fms):
        rows.extend(verify_expectation(args.cells, fm, ratios, args.trials, seed=args.seed + k))
    cols = ["R_p", "p_off", "p_on", "E_prime", "empirical", "z", "samples"]
    lines = [",".join(cols)] + [",".join(f"{r[c]:.6g}" for c in cols) for r in rows]
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        Path(args.out).with_suffix(".json").write_text(json.dumps({"provenance": prov, "rows": rows}, indent=1))


def cmd_inspect(args):
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"not found: {path}")
    raw = path.read_bytes()
    if raw[:4] == hio.MAGIC:
        model = hio.model_from_bytes(raw)
        hlen = int.from_bytes(raw[8:12], "little")
        header = json.loads(raw[12:12 + hlen])
        layers = []
        for i, layer in enumerate(model.layers):
            info = {"index": i, "kind": layer.kind, "hyperparams": layer.hyperparams}
            if layer.weights is not None:
                info["weights"] = list(layer.weights.shape)
                info["zeros"] = int(np.count_nonzero(layer.weights == 0))
            layers.append(info)
        _emit({"type": "rfsm", "name": model.name, "input_shape": list(model.input_shape),
               "num_classes": model.num_classes, "layers": layers, "prune_ratio": prune_ratio(model),
               "provenance": header.get("provenance")})
    else:
        magic, dims = hio.idx_header(path)
        _emit({"type": "idx", "magic": f"0x{magic:08x}", "dims": list(dims)})


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "search": cmd_search, "inject": cmd_inject,
            "sweep": cmd_sweep, "verify-expectation": cmd_verify, "inspect": cmd_inspect}


def _fail(code, exc):
    print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}),
          file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, FileNotFoundError) as exc:
        return _fail(EXIT_USAGE, exc)
    try:
        status = COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError) as exc:
        return _fail(EXIT_USAGE, exc)
    except Exception as exc:
        return _fail(EXIT_RUNTIME, exc)
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
