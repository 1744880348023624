"""``catcd`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 gradient check
failure.  Machine-readable results go to stdout as CSV; logs go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import engine
from .checkpoint import CheckpointError
from .config import PRESETS, ConfigError, load_config
from .gradcheck import SCOPES, run_scope
from .model import SCALES, to_input
from .netpbm import FormatError, encode, load_image, load_label, save_label, write_atomic
from .synthetic import SceneSpec, generate_dataset

log = logging.getLogger("catcd")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_GRADCHECK = 3

# overlay legend: TP white, TN black, FN turquoise, FP red
OVERLAY_COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fn": (64, 224, 208),
    "fp": (255, 0, 0),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_keyvalues(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            values[key] = value
    return values


def _manifest(data, split):
    path = data if os.path.isfile(data) else os.path.join(data, f"{split}.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    return path


def _checkpoint_config(args):
    """Config for a checkpoint: ``--config`` or the ``config.txt`` written beside it by ``train``."""
    path = args.config
    if path is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.txt")
        if os.path.exists(sibling):
            path = sibling
    return load_config(path, args.preset)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_gen_data(args):
    values = _read_keyvalues(args.spec) if args.spec else {}
    spec = SceneSpec.from_mapping(values)
    if args.seed is not None:
        spec.seed = args.seed
    elif os.environ.get("CAT_SEED"):
        spec.seed = int(os.environ["CAT_SEED"])
    if args.train < 0 or args.val < 0:
        raise UsageError("--train and --val must be non-negative")
    spec.validate()
    t0 = time.time()
    stats = generate_dataset(spec, args.train, args.val, args.out)
    log.info("wrote %d + %d samples to %s in %.1fs", args.train, args.val, args.out, time.time() - t0)
    print("split,count,min_fraction,mean_fraction,max_fraction")
    for split, fracs in stats.items():
        if fracs:
            print(f"{split},{len(fracs)},{min(fracs):.4f},{np.mean(fracs):.4f},{max(fracs):.4f}")
        else:
            print(f"{split},0,,,")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.preset)
    train = engine.Split.load(_manifest(args.data, "train"))
    val_path = os.path.join(args.data, "val.txt") if os.path.isdir(args.data) else None
    val = engine.Split.load(val_path) if val_path and os.path.exists(val_path) else None
    if len(train) == 0:
        raise ValueError("training manifest is empty")
    if train.t1.shape[-1] != cfg.image_size:
        raise ValueError(f"images are {train.t1.shape[-1]} px but config image_size is {cfg.image_size}")
    log.info("training %d samples (%d val), %d epochs, seed %d", len(train), len(val or []), cfg.epochs, cfg.seed)
    result = engine.fit(
        cfg, train, val, out_dir=args.out, resume=args.resume,
        eval_threads=args.threads, stop_epoch=args.stop_epoch,
    )
    log.info("best val F1 %.4f", result.best_f1)
    return 0


def cmd_eval(args):
    cfg = _checkpoint_config(args)
    model = engine.load_model(cfg, args.checkpoint)
    split = engine.Split.load(_manifest(args.data, args.split))
    counts = engine.evaluate(model, split, cfg.batch_size, args.threads)
    m = engine.metrics_from_counts(counts)
    for flag in m.flags:
        log.warning("metric convention applied: %s", flag)
    print(f"{m.precision:.4f},{m.recall:.4f},{m.f1:.4f}")
    return 0


def overlay(pred, truth):
    """H x W x 3 uint8 image coloring TP/TN/FN/FP."""
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and label {truth.shape} differ in size")
    out = np.zeros(pred.shape + (3,), np.uint8)
    out[pred & truth] = OVERLAY_COLORS["tp"]
    out[~pred & ~truth] = OVERLAY_COLORS["tn"]
    out[~pred & truth] = OVERLAY_COLORS["fn"]
    out[pred & ~truth] = OVERLAY_COLORS["fp"]
    return out


def cmd_predict(args):
    if args.overlay and not args.label:
        raise UsageError("--overlay needs --label (the ground truth) to color TP/FP/FN")
    cfg = _checkpoint_config(args)
    model = engine.load_model(cfg, args.checkpoint).eval()
    a, b = load_image(args.t1), load_image(args.t2)
    if a.ndim != 3 or a.shape != b.shape:
        raise ValueError(f"t1 {a.shape} and t2 {b.shape} must be RGB images of equal size")
    from .autograd import no_grad

    with no_grad():
        pred = model.predict(to_input(a, cfg.np_dtype), to_input(b, cfg.np_dtype))[0]
    save_label(pred, args.out)
    log.info("changed fraction %.4f -> %s", pred.mean(), args.out)
    if args.overlay:
        write_atomic(args.overlay, encode(overlay(pred, load_label(args.label))))
    return 0


def cmd_gradcheck(args):
    t0 = time.time()
    results = run_scope(args.scope, seed=args.seed, h=args.h, tol=args.tol, max_entries=args.max_entries)
    ok = True
    worst = 0.0
    print("case,parameter,shape,checked,max_rel_error,max_abs_error,status")
    for case, rep in results:
        for p in rep.params:
            status = "ok" if p.max_rel_error <= args.tol else "FAIL"
            if p.zero_grad:
                status += " zero_grad"
            if p.kinks:
                status += f" kinks_skipped={p.kinks}"
            shape = "x".join(map(str, p.shape))
            print(f"{case},{p.name},{shape},{p.checked},{p.max_rel_error:.3e},{p.max_abs_error:.3e},{status}")
        worst = max(worst, rep.max_rel_error)
        ok &= rep.passed
    log.info("gradcheck %s: max relative error %.3e (tol %.0e) in %.1fs", args.scope, worst, args.tol, time.time() - t0)
    if not ok:
        log.error("gradcheck FAILED")
        return EXIT_GRADCHECK
    return 0


def cmd_diagnose(args):
    cfg = _checkpoint_config(args)
    if not cfg.use_cat:
        raise UsageError("diagnose needs a model with CAT blocks (use_cat = true)")
    model = engine.load_model(cfg, args.checkpoint)
    split = engine.Split.load(_manifest(args.data, args.split))
    _, traces = engine.evaluate(model, split, cfg.batch_size, args.threads, traces=True)
    rows = engine.diagnose_traces(traces, split.labels, block=args.block)
    rows.sort(key=lambda r: (r["sample"], r["scale"]))
    print("sample,scale,ratio_input,ratio_cross,ratio_self,flag")
    for r in rows:
        cells = [f"{r[k]:.6f}" if k in r else "" for k in engine.LAYERS]
        print(f"{r['sample']},{r['scale']},{','.join(cells)},{r['flag']}")
    for s in SCALES:
        summary = engine.refinement_summary(rows, s)
        log.info(
            "%s: mean ratio input %.4f cross %.4f self %.4f; cross < input on %d/%d samples",
            s, summary["input"], summary["cross"], summary["self"], summary["improved"], summary["valid"],
        )
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="catcd", description="Bi-temporal change detection with CAT refinement blocks.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")

    g = sub.add_parser("gen-data", help="write a synthetic bi-temporal dataset")
    g.add_argument("--spec", help="key = value scene spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=512)
    g.add_argument("--val", type=int, default=128)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write last.catw / best.catw / CSV logs")
    config_args(t)
    t.add_argument("--data", required=True, help="dataset directory holding train.txt and val.txt")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.catw")
    t.add_argument("--stop-epoch", type=int, help="stop once this many epochs are done (schedule unchanged)")
    t.add_argument("--threads", type=int, default=1, help="parallel validation batches")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print precision,recall,f1 for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory or manifest file")
    e.add_argument("--split", default="val")
    e.add_argument("--threads", type=int, default=1)
    config_args(e)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a PGM change map for one image pair")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--t1", required=True)
    pr.add_argument("--t2", required=True)
    pr.add_argument("--out", required=True, help="output PGM")
    pr.add_argument("--overlay", help="output PPM colored TP white / TN black / FN turquoise / FP red")
    pr.add_argument("--label", help="ground-truth PGM for --overlay")
    config_args(pr)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference check of tape gradients (float64)")
    gc.add_argument("--scope", choices=SCOPES, default="op")
    gc.add_argument("--config", help="accepted for symmetry; gradcheck always uses its own tiny shapes")
    gc.add_argument("--h", type=float, default=1e-3)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--max-entries", type=int, help="entries probed per parameter (block/model scopes)")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("diagnose", help="per-sample cluster ratios at CAT input / after cross / after self")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="val")
    d.add_argument("--block", type=int, default=0, help="which CAT block per scale (default: the first, whose input is the IDF)")
    d.add_argument("--threads", type=int, default=1)
    config_args(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"catcd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, FormatError, OSError, ValueError) as exc:
        print(f"catcd: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
