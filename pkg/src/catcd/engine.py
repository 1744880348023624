"""Training, evaluation and diagnostic loops over an in-memory dataset."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor, no_grad
from .checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint
from .model import SCALES, CATChangeDetector
from .synthetic import load_split
from .training import (
    AdamW,
    ConfusionCounts,
    cluster_diagnostic,
    downsample_label,
    full_loss,
    linear_decay_lr,
    metrics_from_counts,
)

log = logging.getLogger("catcd")


@dataclass
class Split:
    t1: np.ndarray  # N x 3 x H x W float32
    t2: np.ndarray
    labels: np.ndarray  # N x H x W uint8

    def __len__(self):
        return len(self.labels)

    @classmethod
    def load(cls, manifest):
        return cls(*load_split(manifest))

    def batch(self, idx, dtype=np.float32):
        return (
            Tensor(self.t1[idx].astype(dtype)),
            Tensor(self.t2[idx].astype(dtype)),
            self.labels[idx],
        )


def build_model(cfg):
    return CATChangeDetector(cfg.model_config(), seed=cfg.seed, dtype=cfg.np_dtype)


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)


def train_step(model, opt, batch, loss_cfg, lr):
    x1, x2, label = batch
    model.train()
    opt.zero_grad()
    with Tape() as tape:
        logits, masks = model(x1, x2)
        loss = full_loss(logits, masks, label, loss_cfg)
        tape.backward(loss)
    opt.step(lr)
    return loss.item()


def _batches(n, batch_size):
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def evaluate(model, split, batch_size=16, threads=1, traces=False):
    """Confusion counts over ``split``; with ``traces`` also per-sample CAT features."""
    model.eval()
    dtype = model.parameters()[0].data.dtype

    def run(idx):
        with no_grad():
            x1, x2, label = split.batch(idx, dtype)
            tr = {} if traces else None
            logits, _ = model(x1, x2, traces=tr)
            pred = np.argmax(logits.data, axis=1)
            return ConfusionCounts.from_maps(pred, label), tr, idx

    jobs = _batches(len(split), batch_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(idx) for idx in jobs]
    counts = ConfusionCounts()
    collected = []
    for c, tr, idx in results:
        counts = counts + c
        if traces:
            collected.append((idx, tr))
    return (counts, collected) if traces else counts


LAYERS = ("input", "cross", "self")


def diagnose_traces(collected, labels, block=0):
    """Per-sample, per-scale cluster ratios at block input, after cross- and self-attention."""
    rows = []
    H = labels.shape[-1]
    for idx, tr in collected:
        for s in SCALES:
            if s not in tr:
                continue
            feats = tr[s][block]
            for b, sample in enumerate(idx):
                ratios = {}
                flags = set()
                for layer in LAYERS:
                    if layer not in feats:
                        continue
                    fmap = feats[layer][b]
                    lab = downsample_label(labels[sample], H // fmap.shape[-1])
                    st = cluster_diagnostic(fmap, lab)
                    ratios[layer] = st.ratio
                    if st.flag:
                        flags.add(st.flag)
                rows.append({"sample": int(sample), "scale": s, **ratios, "flag": ";".join(sorted(flags))})
    return rows


def refinement_summary(rows, scale, before="input", after="cross"):
    """Mean ratios per layer and how many valid samples have ``after`` < ``before``."""
    valid = [r for r in rows if r["scale"] == scale and not r["flag"] and before in r and after in r]
    out = {layer: mean_ratio(rows, scale, layer) for layer in LAYERS}
    out["valid"] = len(valid)
    out["improved"] = sum(r[after] < r[before] for r in valid)
    out["fraction"] = out["improved"] / len(valid) if valid else float("nan")
    return out


def mean_ratio(rows, scale, layer):
    vals = [r[layer] for r in rows if r["scale"] == scale and layer in r and not r["flag"]]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    history: list = field(default_factory=list)  # per epoch (epoch, P, R, F1, ratios)
    best_f1: float = -1.0
    model: object = None


def _opt_extra(epoch, best_f1):
    return {"opt.epoch": np.array([epoch], np.float32), "opt.best_f1": np.array([best_f1], np.float32)}


def save_training_state(path, model, opt, epoch, best_f1):
    save_checkpoint(path, model_state(model), {**opt.state(), **_opt_extra(epoch, best_f1)})


def fit(cfg, train, val, out_dir=None, resume=False, max_steps=None, eval_threads=1, diag=True, stop_epoch=None):
    """Train ``cfg``'s model; writes ``last.catw``/``best.catw`` and CSV logs to ``out_dir``.

    ``stop_epoch`` ends the run early without changing the learning-rate
    schedule, so a later ``resume`` continues exactly where it left off.
    """
    model = build_model(cfg)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_cfg = cfg.loss_config()
    result = TrainResult(model=model)
    start_epoch = 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_text())
    last_path = os.path.join(out_dir, "last.catw") if out_dir else None
    if resume:
        tensors, opt_state = load_checkpoint(last_path)
        load_model_state(model, tensors)
        if opt_state is None:
            raise ValueError(f"{last_path} has no optimizer section; cannot resume")
        opt.load_state(opt_state)
        start_epoch = int(opt_state["opt.epoch"][0])
        result.best_f1 = float(opt_state["opt.best_f1"][0])
        log.info("resuming at epoch %d (step %d)", start_epoch, opt.step_count)

    step_log = val_log = None
    if out_dir:
        mode = "a" if resume else "w"
        step_log = open(os.path.join(out_dir, "train_log.csv"), mode, newline="")
        val_log = open(os.path.join(out_dir, "val_log.csv"), mode, newline="")
        if not resume:
            step_log.write("epoch,step,loss,lr\n")
            val_log.write("epoch,val_precision,val_recall,val_f1,diag_ratio_s1,diag_ratio_s2,diag_ratio_s3\n")
    sw = csv.writer(step_log) if step_log else None
    vw = csv.writer(val_log) if val_log else None
    dtype = cfg.np_dtype
    try:
        end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
        for epoch in range(start_epoch, end):
            lr = linear_decay_lr(cfg.lr, epoch, cfg.epochs)
            order = epoch_order(len(train), cfg.seed, epoch)
            for idx in _batches(len(train), cfg.batch_size):
                if max_steps is not None and len(result.losses) >= max_steps:
                    return result
                loss = train_step(model, opt, train.batch(np.sort(order[idx]), dtype), loss_cfg, lr)
                result.losses.append(loss)
                if sw:
                    sw.writerow([epoch, opt.step_count, f"{loss:.6f}", f"{lr:.6g}"])
            if sw:
                step_log.flush()
            if val is not None and len(val):
                if diag and cfg.use_cat:
                    counts, tr = evaluate(model, val, cfg.batch_size, eval_threads, traces=True)
                    rows = diagnose_traces(tr, val.labels)
                    layer = "cross" if cfg.use_gc_cross else ("self" if cfg.use_self_attn else "input")
                    ratios = [mean_ratio(rows, s, layer) for s in SCALES]
                else:
                    counts = evaluate(model, val, cfg.batch_size, eval_threads)
                    ratios = [float("nan")] * 3
                m = metrics_from_counts(counts)
                result.history.append((epoch, m.precision, m.recall, m.f1, ratios))
                log.info(
                    "epoch %d loss %.4f lr %.2e | val P %.4f R %.4f F1 %.4f",
                    epoch, np.mean(result.losses[-len(_batches(len(train), cfg.batch_size)):] or [0]),
                    lr, m.precision, m.recall, m.f1,
                )
                if vw:
                    vw.writerow([epoch] + [f"{v:.6f}" for v in (m.precision, m.recall, m.f1, *ratios)])
                    val_log.flush()
                improved = m.f1 > result.best_f1
                if improved:
                    result.best_f1 = m.f1
                if out_dir and improved:
                    save_training_state(os.path.join(out_dir, "best.catw"), model, opt, epoch + 1, result.best_f1)
            if out_dir:
                save_training_state(last_path, model, opt, epoch + 1, result.best_f1)
    finally:
        if step_log:
            step_log.close()
            val_log.close()
    return result


def load_model(cfg, checkpoint):
    model = build_model(cfg)
    tensors, _ = load_checkpoint(checkpoint)
    load_model_state(model, tensors)
    return model
