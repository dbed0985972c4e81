"""Command-line entry point: ``pimlp <subcommand> [flags]``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O or file-format error.
Settings come from built-in defaults, then ``--config`` (flat JSON), then
explicit flags; the merged result is written to ``<out>/effective_config.json``.
"""
import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint
from .data import HyperConfig, labels_of, load_dataset, load_manifest, manifest_path, prepare_signals, read_header
from .errors import FormatError, PimlpError
from .kernels import BACKEND
from .model import attach_head, param_count
from .numerics import Rng

log = logging.getLogger("pimlp")

TASK_LR = {"short-range": 7e-4, "long-range": 6e-4, "modulation": 6e-4, "uwb": 9.77e-5}
STRATEGY_FLAGS = {"lp": "LP", "fn": "FN", "lp-fn": "LP_FN"}
SWEEP_DIMS = (2, 4, 8, 16, 32, 64, 128, 256, 512)

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "runs",
    # HyperConfig
    "input_len": 4096, "patch_len": 128, "stride": 32, "hidden_dim": 64, "channels": 2,
    # gen
    "kinds": "tone,bpsk,qpsk,chirp", "excluded": "chirp", "pretrain_per_class": 500,
    "finetune_per_class": 200, "test_per_class": 200, "snr_db": 10.0, "length": 4096,
    # training
    "epochs": None, "batch_size": 64, "lr": None, "lp_epochs": 10, "strategy": "lp-fn",
    "task": "long-range", "task_lr": None, "dropout": 0.2, "eval_every": 1, "exclude_level0": False,
    "checkpoint_every": 0,
    # lr-find
    "lr_min": 1e-7, "lr_max": 1.0, "steps": 100, "objective": "pretrain",
    # bench
    "warmup": 10, "iters": 5000, "batch": 1, "num_classes": 4,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="flat JSON file with settings; flags override it")
    g.add_argument("--seed", type=int, help="64-bit seed for every random stream (default 0)")
    g.add_argument("--threads", type=int, help="BLAS threads (default 1, for reproducibility)")
    g.add_argument("--out", help="output directory (default ./runs)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _hyper(p):
    g = p.add_argument_group("model shape")
    g.add_argument("--input-len", type=int, help="samples per input after fitting (default 4096)")
    g.add_argument("--patch-len", type=int, help="samples per patch (default 128)")
    g.add_argument("--stride", type=int, help="patch stride in samples (default 32)")
    g.add_argument("--hidden-dim", type=int, help="encoder width D (default 64)")


def build_parser():
    parser = _Parser(prog="pimlp", description="Patch-independent MLP foundation model for wireless time series.")
    parser.add_argument("--version", action="version", version=f"pimlp {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic pretrain/finetune/test corpus")
    _common(p)
    p.add_argument("--kinds", help="comma-separated signal kinds (default tone,bpsk,qpsk,chirp)")
    p.add_argument("--excluded", help="comma-separated kinds left out of pre-training (default chirp; '' for none)")
    p.add_argument("--pretrain-per-class", type=int, help="unlabeled records per kind (default 500)")
    p.add_argument("--finetune-per-class", type=int, help="labeled fine-tune records per kind (default 200)")
    p.add_argument("--test-per-class", type=int, help="labeled test records per kind (default 200)")
    p.add_argument("--snr-db", type=float, help="signal-to-noise ratio in dB (default 10)")
    p.add_argument("--length", type=int, help="samples per record (default 4096)")

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p)
    _hyper(p)
    p.add_argument("--data", help="unlabeled dataset file (.wfds)")
    p.add_argument("--epochs", type=int, help="training epochs (default 100)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 64)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-3)")
    p.add_argument("--exclude-level0", action="store_true", default=None,
                   help="skip the contrastive term on raw (unpooled) patches")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--checkpoint-every", type=int, help="also write epoch_<n>.ckpt every n epochs (default 0 = off)")

    p = sub.add_parser("finetune", help="attach a classification head and fine-tune")
    _common(p)
    p.add_argument("--checkpoint", help="pre-trained checkpoint")
    p.add_argument("--data", help="labeled fine-tuning dataset (.wfds)")
    p.add_argument("--val", help="labeled validation dataset; default is an 80/20 split of --data")
    p.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS), help="lp, fn or lp-fn (default lp-fn)")
    p.add_argument("--task", choices=sorted(TASK_LR), help="selects the default learning rate (default long-range)")
    p.add_argument("--task-lr", type=float, help="learning rate; overrides --task")
    p.add_argument("--epochs", type=int, help="total epochs (default: lp 10, fn 200, lp-fn 210)")
    p.add_argument("--lp-epochs", type=int, help="head-only epochs before end-to-end training (default 10)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 64)")
    p.add_argument("--dropout", type=float, help="classification-head dropout probability (default 0.2)")
    p.add_argument("--eval-every", type=int, help="validate every n epochs (default 1)")

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="fine-tuned checkpoint")
    p.add_argument("--data", help="labeled dataset (.wfds)")

    p = sub.add_parser("lr-find", help="learning-rate range test")
    _common(p)
    _hyper(p)
    p.add_argument("--data", help="dataset (.wfds); must be labeled for --objective finetune")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--objective", choices=["pretrain", "finetune"], help="loss to sweep (default pretrain)")
    p.add_argument("--lr-min", type=float, help="first learning rate (default 1e-7)")
    p.add_argument("--lr-max", type=float, help="last learning rate (default 1)")
    p.add_argument("--steps", type=int, help="number of learning rates / updates (default 100)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (default 64)")

    p = sub.add_parser("bench", help="inference latency benchmark")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint to benchmark")
    p.add_argument("--warmup", type=int, help="untimed warm-up iterations (default 10)")
    p.add_argument("--iters", type=int, help="timed iterations (default 5000)")
    p.add_argument("--batch", type=int, help="samples per forward pass (default 1)")
    p.add_argument("--num-classes", type=int, help="head size used when the checkpoint has no head (default 4)")

    p = sub.add_parser("inspect", help="print the header of a checkpoint or dataset file")
    _common(p)
    _hyper(p)
    p.add_argument("path", nargs="?", help="checkpoint (.ckpt) or dataset (.wfds) file")
    p.add_argument("--sweep", action="store_true", default=None,
                   help="print trunk parameter counts for D = 2..512 as CSV")
    return parser


def resolve(args):
    """Merge defaults, config file and explicit flags into one flat dict."""
    eff = dict(DEFAULTS)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS) - {"data", "val", "checkpoint", "resume", "path"}
        if unknown:
            raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
        eff.update(cfg)
    for k, v in vars(args).items():
        if k in ("config", "verbose", "command") or v is None:
            continue
        eff[k] = v
    eff["command"] = args.command
    return eff


def _hyperconfig(eff):
    return HyperConfig(input_len=eff["input_len"], patch_len=eff["patch_len"], stride=eff["stride"],
                       channels=eff["channels"], hidden_dim=eff["hidden_dim"])


def _out_dir(eff):
    out = Path(eff["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(eff, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out


def _require(eff, *keys):
    for k in keys:
        if not eff.get(k):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _split_kinds(text):
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(k.strip() for k in str(text).split(",") if k.strip())


def _jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _load_labeled(path):
    records = load_dataset(path)
    if not records:
        raise UsageError(f"{path}: dataset is empty")
    labels_of(records)
    return records


def cmd_gen(eff):
    from .synth import SynthSpec, gen_corpus

    spec = SynthSpec(
        kinds=_split_kinds(eff["kinds"]), excluded=_split_kinds(eff["excluded"]),
        pretrain_per_class=eff["pretrain_per_class"], finetune_per_class=eff["finetune_per_class"],
        test_per_class=eff["test_per_class"], snr_db=eff["snr_db"], length=eff["length"], seed=eff["seed"],
    )
    out = _out_dir(eff)
    paths = gen_corpus(spec, out)
    for split, path in paths.items():
        print(f"{split}: {path} ({read_header(path)[2]} records)")
    return 0


def cmd_pretrain(eff):
    from .train import PretrainResult, TrainConfig, pretrain

    _require(eff, "data")
    cfg = _hyperconfig(eff).require_trainable()
    tcfg = TrainConfig(epochs=eff["epochs"] or 100, batch_size=eff["batch_size"], lr=eff["lr"] or 1e-3,
                       seed=eff["seed"], include_level0=not eff["exclude_level0"])
    records = load_dataset(eff["data"])
    if not records:
        raise UsageError(f"{eff['data']}: dataset is empty")
    resume = None
    if eff.get("resume"):
        ck = load_checkpoint(eff["resume"])
        if ck.cfg != cfg:
            raise UsageError("resume checkpoint was trained with a different model shape")
        resume = PretrainResult(ck.params, ck.state, ck.history)
    out = _out_dir(eff)
    every = eff["checkpoint_every"]

    def snapshot(res, path):
        prov = {"stage": "pretrain", "seed": tcfg.seed, "epoch": len(res.history), "history": res.history}
        save_checkpoint(Checkpoint(cfg, res.params, res.state, prov), path)

    def on_epoch(res):
        if every and len(res.history) % every == 0:
            snapshot(res, out / f"epoch_{len(res.history)}.ckpt")

    res = pretrain(records, cfg, tcfg, resume=resume, on_epoch=on_epoch)
    snapshot(res, out / "pretrain.ckpt")
    _jsonl(out / "metrics.jsonl", res.history)
    print(f"pretrain: {len(res.history)} epochs, loss {res.history[0]['loss']:.6g} -> {res.history[-1]['loss']:.6g}")
    print(f"checkpoint: {out / 'pretrain.ckpt'}")
    return 0


def cmd_finetune(eff):
    from .train import TrainConfig, finetune

    _require(eff, "checkpoint", "data")
    strategy = STRATEGY_FLAGS[eff["strategy"]]
    lr = eff["task_lr"] if eff["task_lr"] is not None else TASK_LR[eff["task"]]
    epochs = eff["epochs"] or {"LP": 10, "FN": 200, "LP_FN": eff["lp_epochs"] + 200}[strategy]
    tcfg = TrainConfig(epochs=epochs, batch_size=eff["batch_size"], lr=lr, strategy=strategy,
                       lp_epochs=eff["lp_epochs"], seed=eff["seed"], eval_every=eff["eval_every"],
                       dropout=eff["dropout"])
    ck = load_checkpoint(eff["checkpoint"])
    records = _load_labeled(eff["data"])
    classes = load_manifest(eff["data"]).get("classes") or []
    val = _load_labeled(eff["val"]) if eff.get("val") else None
    k = max(len(classes), int(labels_of(records).max()) + 1)
    out = _out_dir(eff)
    res = finetune(ck.params.without_head(), records, ck.cfg, tcfg, num_classes=k, val=val)
    prov = {"stage": "finetune", "strategy": strategy, "seed": tcfg.seed, "epoch": len(res.history),
            "classes": classes, "history": res.history, "pretrain": ck.provenance.get("loss_history_digest")}
    save_checkpoint(Checkpoint(ck.cfg, res.params, None, prov), out / "finetune.ckpt")
    _jsonl(out / "metrics.jsonl", res.history)
    print(f"finetune [{strategy}]: final accuracy {res.final_accuracy:.4f}, best {res.best_accuracy:.4f}")
    print(f"checkpoint: {out / 'finetune.ckpt'}")
    return 0


def cmd_eval(eff):
    from .train import evaluate, per_class_recall

    _require(eff, "checkpoint", "data")
    ck = load_checkpoint(eff["checkpoint"])
    if not ck.params.has_head:
        raise UsageError(f"{eff['checkpoint']}: checkpoint has no classification head")
    records = _load_labeled(eff["data"])
    acc, conf = evaluate(ck.params, records, ck.cfg)
    out = _out_dir(eff)
    result = {"accuracy": acc, "confusion": conf.tolist(), "recall": per_class_recall(conf).tolist(),
              "classes": load_manifest(eff["data"]).get("classes", []), "count": len(records)}
    with open(out / "eval.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"accuracy={acc:.4f} n={len(records)}")
    for row in conf:
        print(" ".join(f"{int(v):6d}" for v in row))
    return 0


def cmd_lr_find(eff):
    from .train import lr_range_test

    _require(eff, "data")
    cfg = _hyperconfig(eff)
    params = None
    if eff.get("checkpoint"):
        ck = load_checkpoint(eff["checkpoint"])
        cfg, params = ck.cfg, ck.params
    records = load_dataset(eff["data"])
    if not records:
        raise UsageError(f"{eff['data']}: dataset is empty")
    labels = labels_of(records) if eff["objective"] == "finetune" else None
    res = lr_range_test(cfg, prepare_signals(records, cfg), eff["lr_min"], eff["lr_max"], eff["steps"],
                        objective=eff["objective"], labels=labels, params=params,
                        batch_size=eff["batch_size"], seed=eff["seed"])
    out = _out_dir(eff)
    with open(out / "lr_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "smoothed"])
        for i, (lr, l, s) in enumerate(zip(res.lrs, res.losses, res.smoothed)):
            w.writerow([i, repr(lr), repr(l), repr(s)])
    note = " (stopped early: loss diverged)" if res.stopped_early else ""
    print(f"suggested lr={res.suggestion!r}{note}")
    return 0


def cmd_bench(eff):
    from .bench import bench_inference

    _require(eff, "checkpoint")
    ck = load_checkpoint(eff["checkpoint"])
    params = ck.params
    if not params.has_head:
        params = attach_head(params, ck.cfg, eff["num_classes"], Rng(eff["seed"]).child(99))
    report = bench_inference(params, ck.cfg, warmup=eff["warmup"], iters=eff["iters"], batch=eff["batch"],
                             seed=eff["seed"])
    out = _out_dir(eff)
    (out / "bench.json").write_text(report.to_json() + "\n", encoding="utf-8")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(report.summary())
    return 0


def cmd_inspect(eff):
    if eff.get("sweep"):
        base = _hyperconfig(eff)
        print("hidden_dim,trunk_params")
        for d in SWEEP_DIMS:
            cfg = HyperConfig(base.input_len, base.patch_len, base.stride, base.channels, d)
            print(f"{d},{param_count(cfg)}")
        if not eff.get("path"):
            return 0
    _require(eff, "path")
    path = Path(eff["path"])
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"WFCK":
        raw = path.read_bytes()
        header, _ = read_checkpoint_header(raw)
        cfg = HyperConfig.from_dict(header["hyperconfig"])
        print(f"checkpoint {path} (format v{header['format_version']})")
        print(f"hyperconfig: {json.dumps(header['hyperconfig'], sort_keys=True)}")
        print(f"num_patches: {cfg.num_patches}")
        print(f"trunk params: {param_count(cfg):,}")
        stored = 0
        for t in header["tensors"]:
            n = int(np.prod(t["shape"]))
            if not t["name"].startswith("adam."):
                stored += n
            print(f"  {t['name']:<16} {str(tuple(t['shape'])):<14} offset={t['offset']}")
        print(f"stored model params: {stored:,}")
        print(f"optimizer: {json.dumps(header['optimizer'], sort_keys=True)}")
        print(f"rng: {header['rng_algorithm']}  init: {header['init_scheme']}")
        prov = {k: v for k, v in header.get("provenance", {}).items() if k != "history"}
        print(f"provenance: {json.dumps(prov, sort_keys=True)}")
    elif magic == b"WFDS":
        channels, length, count = read_header(path)
        man = load_manifest(path)
        print(f"dataset {path}")
        print(f"records: {count}  channels: {channels}  length: {length}")
        print(f"classes: {man.get('classes', [])}")
        if "labels" in man:
            print(f"label counts: {np.bincount(man['labels']).tolist() if man['labels'] else []}")
        else:
            print("labels: none")
        if "scenario" in man:
            print(f"scenario: {json.dumps(man['scenario'], sort_keys=True)}")
        print(f"manifest: {manifest_path(path)}")
    else:
        raise FormatError(f"{path}: unrecognised magic {magic!r}", offset=0)
    return 0


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
    "lr-find": cmd_lr_find, "bench": cmd_bench, "inspect": cmd_inspect,
}


@contextlib.contextmanager
def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        eff = resolve(args)
        if eff["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        log.info("kernel backend: %s", BACKEND)
        with _thread_limit(eff["threads"]):
            return COMMANDS[args.command](eff)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"pimlp: {exc}", file=sys.stderr)
        return 2
    except (PimlpError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"pimlp: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
