"""Two-stage training (IRS pretraining, then end-to-end with the combined
loss), evaluation reports and the structure-aware vs. baseline ablation.

Step numbering is global: steps ``[0, pretrain_steps)`` pretrain the IRS and
the following ``end_to_end_steps`` train the whole network. Each step's batch
is drawn from an RNG seeded with ``(seed, step)``, so an interrupted run
resumed from a checkpoint replays exactly the batches it would have seen.
"""

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import TrainConfig
from .dataset import ingest_corpus, make_batch, make_triple, sample_patches, split_holdout
from .imageio import load_gray
from .metrics import psnr, ssim
from .network import (STAGE_END_TO_END, STAGE_IRS_PRETRAINED, Checkpoint,
                      StructureAwareNet, checkpoint_bytes, combined_loss,
                      load_checkpoint, parse_checkpoint)
from .tensor import mse_loss, sgd_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "rs_loss", "ismp_loss", "total", "wallclock_ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint is step {checkpoint.step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class LossRecord:
    step: int
    rs_loss: float
    ismp_loss: float
    total: float
    wallclock_ms: float


class TrainLog:
    """Per-step losses (optionally appended to a CSV) and per-epoch holdout PSNR."""

    def __init__(self, path=None):
        self.records = []
        self.holdout_psnr = []  # (epoch, step, psnr)
        self.path = path
        self._start = time.perf_counter()
        if path and (not os.path.exists(path) or os.path.getsize(path) == 0):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, step, rs_loss, ismp_loss, total):
        if self.records and step <= self.records[-1].step:
            raise ValueError(f"log steps must increase: {step} after {self.records[-1].step}")
        rec = LossRecord(step, rs_loss, ismp_loss, total, (time.perf_counter() - self._start) * 1e3)
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([rec.step, f"{rec.rs_loss:.8g}", f"{rec.ismp_loss:.8g}",
                                         f"{rec.total:.8g}", f"{rec.wallclock_ms:.1f}"])
        return rec

    def add_holdout(self, epoch, step, value):
        self.holdout_psnr.append((epoch, step, value))
        log.info("epoch %d (step %d): holdout PSNR %.3f dB", epoch, step, value)


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def optimizer_state_path(ckpt_path):
    return f"{ckpt_path}.opt.npz"


def save_optimizer_state(net, path):
    arrays = {}
    for i, p in enumerate(net.parameters()):
        arrays[f"w{i}"] = p.weight_velocity
        arrays[f"b{i}"] = p.bias_velocity
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_optimizer_state(net, path):
    with np.load(path) as data:
        for i, p in enumerate(net.parameters()):
            p.weight_velocity[...] = data[f"w{i}"]
            p.bias_velocity[...] = data[f"b{i}"]


class Trainer:
    """Owns one network and runs optimizer steps over a corpus of ImageTriples."""

    def __init__(self, config, corpus, net=None, step=0, out=None, log_path=None, prefetch=True):
        self.config = config
        self.train_set, self.holdout = split_holdout(corpus, config.holdout, config.seed)
        if not self.train_set:
            raise ValueError("no training images left after the holdout split")
        self.net = net if net is not None else StructureAwareNet.build(config.spec, config.seed)
        self.step = step
        self.out = out
        self.log = TrainLog(log_path)
        self.prefetch = prefetch
        self.pool = None
        if config.frozen_pool:
            self.pool = sample_patches(self.train_set, config.frozen_pool, [config.seed, 2**31 - 1])
        self._last_good = None
        self.saved_step = None

    def batch_for(self, step):
        seed = [self.config.seed, step]
        if self.pool is not None:
            idx = np.random.default_rng(seed).integers(0, len(self.pool), self.config.batch)
            return make_batch([self.pool[i] for i in idx])
        return make_batch(sample_patches(self.train_set, self.config.batch, seed))

    def _batches(self, start, stop):
        if not self.prefetch:
            for step in range(start, stop):
                yield step, self.batch_for(step)
            return
        # producer/consumer with capacity 1: the next batch is built while this one trains
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(self.batch_for, start) if start < stop else None
            for step in range(start, stop):
                batch = pending.result()
                pending = pool.submit(self.batch_for, step + 1) if step + 1 < stop else None
                yield step, batch

    def checkpoint(self, stage):
        return Checkpoint(self.net, stage, self.step, self.config.seed)

    def save(self, stage):
        data = checkpoint_bytes(self.net, stage, self.step, self.config.seed)
        self._last_good = data
        if self.out:
            _atomic_write(self.out, data)
            self.saved_step = self.step
            if self.config.momentum:
                save_optimizer_state(self.net, optimizer_state_path(self.out))

    def _diverged(self, step, stage):
        if self._last_good is None:
            self._last_good = checkpoint_bytes(self.net, stage, self.step, self.config.seed)
        if self.out:
            _atomic_write(self.out, self._last_good)
        raise TrainingDiverged(step, parse_checkpoint(self._last_good))

    def holdout_psnr(self, stage):
        if not self.holdout:
            return None
        scores = []
        for t in self.holdout:
            initial, _, final = self.net.reconstruct(t.halftone)
            pred = initial if stage == STAGE_IRS_PRETRAINED else final
            scores.append(psnr(np.clip(pred, 0, 1), t.gray))
        return float(np.mean(scores))

    def _run(self, stage, stop, step_fn):
        cfg = self.config
        start = self.step
        if start >= stop:
            return
        self._last_good = checkpoint_bytes(self.net, stage, self.step, cfg.seed)
        per_epoch = max(cfg.iters_per_epoch, 1)
        if stage == STAGE_IRS_PRETRAINED or self.net.spec.is_baseline:
            stage_start = 0
        else:
            stage_start = cfg.pretrain_steps
        for step, batch in self._batches(start, stop):
            rs_loss, ismp_loss, total = step_fn(batch)
            if not math.isfinite(total):
                self._diverged(step, stage)
            sgd_step(self._trainable(stage), cfg.lr_at(step - stage_start), cfg.momentum)
            self.step = step + 1
            self.log.append(self.step, rs_loss, ismp_loss, total)
            done = self.step - stage_start
            if done % per_epoch == 0:
                epoch = done // per_epoch
                value = self.holdout_psnr(stage)
                if value is not None:
                    self.log.add_holdout(epoch, self.step, value)
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    self.save(stage)
        self.save(stage)

    def _trainable(self, stage):
        if stage == STAGE_IRS_PRETRAINED:
            return self.net.irs.parameters()
        if self.config.freeze_irs and self.net.irs is not None:
            return self.net.ismp.parameters() + self.net.rs.parameters()
        return self.net.parameters()

    def _pretrain_step(self, batch):
        initial = self.net.irs.forward(batch.halftone)
        loss, grad = mse_loss(initial, batch.gray)
        self.net.irs.backward(grad, need_input_grad=False)
        return loss, 0.0, loss

    def _end_to_end_step(self, batch):
        return combined_loss(self.net, batch.halftone, batch.gray, batch.gradient,
                             self.config.lambda_ismp, freeze_irs=self.config.freeze_irs)

    def pretrain(self):
        if self.net.spec.is_baseline:
            raise ValueError("baseline networks have no IRS to pretrain")
        self._run(STAGE_IRS_PRETRAINED, self.config.pretrain_steps, self._pretrain_step)
        return self.checkpoint(STAGE_IRS_PRETRAINED)

    def end_to_end(self, stop=None):
        cfg = self.config
        if self.step < cfg.pretrain_steps and not self.net.spec.is_baseline:
            self.step = cfg.pretrain_steps
        stop = cfg.total_steps if stop is None else stop
        self._run(STAGE_END_TO_END, stop, self._end_to_end_step)
        if self.out and self.saved_step != self.step:
            self.save(STAGE_END_TO_END)  # nothing left to run; still leave a file behind
        return self.checkpoint(STAGE_END_TO_END)


def pretrain_irs(config, corpus, start=None, out=None, log_path=None):
    """Train the IRS alone on MSE(IRS(halftone), gray) for ``pretrain_steps``."""
    net = start.net if start is not None else None
    step = start.step if start is not None else 0
    trainer = Trainer(config, corpus, net, step, out, log_path)
    if step == 0 and config.pretrain_steps == 0:
        return trainer.checkpoint(STAGE_IRS_PRETRAINED)
    return trainer.pretrain()


def train_end_to_end(config, corpus, start, out=None, log_path=None):
    """Train all three subnets on the combined loss up to ``total_steps``."""
    trainer = Trainer(config, corpus, start.net, start.step, out, log_path)
    return trainer.end_to_end()


def train(config, corpus, out=None, resume=None, log_path=None):
    """Pretraining then end-to-end training, optionally resuming a checkpoint file."""
    start = None
    if resume is not None:
        start = load_checkpoint(resume, config.spec)
        if config.momentum and os.path.exists(optimizer_state_path(resume)):
            load_optimizer_state(start.net, optimizer_state_path(resume))
        elif config.momentum:
            log.warning("no optimizer state next to %s; momentum restarts from zero", resume)
    net = start.net if start is not None else None
    step = start.step if start is not None else 0
    trainer = Trainer(config, corpus, net, step, out, log_path)
    if not config.spec.is_baseline:
        trainer.pretrain()
    ckpt = trainer.end_to_end()
    ckpt.extra["log"] = trainer.log
    return ckpt


def train_baseline(config, corpus, out=None, log_path=None):
    """Plain DCNN with the same seed and the same total number of optimizer steps."""
    cfg = config.replace(spec=config.baseline_spec)
    trainer = Trainer(cfg, corpus, None, 0, out, log_path)
    ckpt = trainer.end_to_end(stop=config.total_steps)
    ckpt.extra["log"] = trainer.log
    return ckpt


# evaluation ---------------------------------------------------------------

def _gaussian_reference(halftone, gray):
    return gaussian_filter(halftone, 1.0, mode="nearest")


REFERENCE_MODELS = {
    "oracle": lambda halftone, gray: gray,
    "halftone": lambda halftone, gray: halftone,
    "gaussian": _gaussian_reference,
}


def reconstructor(model):
    """Callable (halftone, gray) -> reconstruction for a network, checkpoint,
    checkpoint path, reference name or plain callable."""
    if isinstance(model, str):
        if model in REFERENCE_MODELS:
            return REFERENCE_MODELS[model]
        model = load_checkpoint(model)
    if isinstance(model, Checkpoint):
        model = model.net
    if isinstance(model, StructureAwareNet):
        net = model
        return lambda halftone, gray: net.reconstruct(halftone)[2]
    if callable(model):
        return model
    raise TypeError(f"cannot evaluate {type(model).__name__}")


@dataclass
class EvalRow:
    image: str
    psnr: float
    ssim: float


@dataclass
class Report:
    rows: list = field(default_factory=list)
    label: str = ""

    @property
    def avg(self):
        if not self.rows:
            return EvalRow("AVG", math.nan, math.nan)
        return EvalRow("AVG", float(np.mean([r.psnr for r in self.rows])),
                       float(np.mean([r.ssim for r in self.rows])))

    def all_rows(self):
        return [*self.rows, self.avg]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "psnr", "ssim"])
        for r in self.all_rows():
            w.writerow([r.image, f"{r.psnr:.3f}", f"{r.ssim:.3f}"])
        return buf.getvalue()

    def to_text(self):
        width = max([len("image")] + [len(r.image) for r in self.all_rows()])
        lines = [f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>6}"]
        lines += [f"{r.image:<{width}}  {r.psnr:>8.3f}  {r.ssim:>6.3f}" for r in self.all_rows()]
        return "\n".join(lines) + "\n"


def load_test_images(test_dir, serpentine=False):
    from .dataset import list_images
    if isinstance(test_dir, (list, tuple)):
        return list(test_dir)
    paths = list_images(test_dir)
    if not paths:
        raise ValueError(f"no test images in {test_dir}")
    return [make_triple(load_gray(p), os.path.basename(p), serpentine) for p in paths]


def evaluate(model, test_dir, serpentine=False, label="", workers=None):
    """PSNR/SSIM of each reconstructed test image against its grayscale original.

    ``test_dir`` is a directory of continuous-tone images or a list of
    ImageTriples. Each image is halftoned with the training pipeline and
    reconstructed whole; outputs are clamped to [0, 1] before scoring.
    """
    triples = load_test_images(test_dir, serpentine)
    fn = reconstructor(model)
    if isinstance(model, (StructureAwareNet, Checkpoint, str)) and workers != 1:
        workers = 1  # a network instance caches activations; keep it on one thread

    def score(t):
        rec = np.clip(np.asarray(fn(t.halftone, t.gray), dtype=np.float64), 0.0, 1.0)
        return EvalRow(t.source_id, psnr(rec, t.gray), ssim(rec, t.gray))

    if workers == 1:
        rows = [score(t) for t in triples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(score, triples))
    return Report(rows, label)


@dataclass
class AblationReport:
    proposed: Report
    baseline: Report

    def summary_rows(self):
        return [("structure-aware", self.proposed.avg), ("dcnn-baseline", self.baseline.avg)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "proposed_psnr", "proposed_ssim", "dcnn_psnr", "dcnn_ssim"])
        for a, b in zip(self.proposed.all_rows(), self.baseline.all_rows()):
            w.writerow([a.image, f"{a.psnr:.3f}", f"{a.ssim:.3f}", f"{b.psnr:.3f}", f"{b.ssim:.3f}"])
        return buf.getvalue()

    def to_text(self):
        rows = list(zip(self.proposed.all_rows(), self.baseline.all_rows()))
        width = max([len("image")] + [len(a.image) for a, _ in rows])
        lines = [f"{'':<{width}}  {'structure-aware':>15}  {'dcnn-baseline':>15}",
                 f"{'image':<{width}}  {'PSNR':>8} {'SSIM':>6}  {'PSNR':>8} {'SSIM':>6}"]
        lines += [f"{a.image:<{width}}  {a.psnr:>8.3f} {a.ssim:>6.3f}  {b.psnr:>8.3f} {b.ssim:>6.3f}"
                  for a, b in rows]
        return "\n".join(lines) + "\n"


def run_ablation(config, corpus, test_dir, out_dir=None):
    """Train the structure-aware net and the baseline DCNN on one budget and seed,
    then evaluate both on the same test images."""
    if isinstance(corpus, (str, os.PathLike)):
        corpus = ingest_corpus(corpus, config.serpentine)
    tests = load_test_images(test_dir, config.serpentine)
    out_sa = out_base = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        out_sa = os.path.join(out_dir, "structure_aware.ckpt")
        out_base = os.path.join(out_dir, "baseline.ckpt")
    sa = train(config, corpus, out=out_sa)
    base = train_baseline(config, corpus, out=out_base)
    return AblationReport(evaluate(sa, tests, label="structure-aware"),
                          evaluate(base, tests, label="dcnn-baseline"))


__all__ = [
    "TrainConfig", "TrainLog", "Trainer", "TrainingDiverged", "pretrain_irs",
    "train_end_to_end", "train", "train_baseline", "evaluate", "run_ablation",
    "Report", "EvalRow", "AblationReport",
]
