"""Optimizer, learning-rate schedule, training/eval loops, checkpointing.

Training is bit-reproducible given (seed, config, dataset): batch order is
derived from (seed, epoch), dropout noise comes from a checkpointed
generator, and the loop is indexed by a global step counter so a resumed
run replays exactly the schedule of an uninterrupted one.

Checkpoints use the "SGTC1" container: a 5-byte magic, a length-prefixed
UTF-8 JSON manifest (format version, config snapshot, parameter and moment
names+shapes, step counter, schedule state, RNG state), then float64
little-endian blobs in manifest order: parameters, first moments, second
moments.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mt
from .autodiff import GradientMap, NonFiniteError, ParameterStore, backward
from .data import SyntheticSample, iter_batches, make_batch
from .model import Model

CKPT_MAGIC = b"SGTC1"
CKPT_VERSION = 1

LOG_COLUMNS = ["step", "lr", "ce", "mono", "cont", "total", "dev_acc", "bleu4",
               "entropy", "mono_viol", "span", "tv"]


class TrainingDiverged(RuntimeError):
    """Raised when a forward/backward pass produces non-finite values."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.998
    weight_decay: float = 3e-3
    batch_size: int = 32
    warmup_steps: int = 2000
    plateau_factor: float = 0.8
    plateau_patience: int = 3
    stop_lr: float = 1e-4
    max_epochs: int = 200
    eval_every: int = 0          # 0: evaluate once per epoch
    dev_metric: str = "acc"      # "acc" or "bleu4"
    seed: int = 0
    adam_eps: float = 1e-8
    grad_clip: float = 0.0       # 0: no clipping; else max global norm
    stop_at_dev_acc: float = 0.0  # 0: disabled; else stop once dev acc reaches it
    max_steps: int = 0           # 0: no step cap (tests use this)

    def __post_init__(self):
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError("plateau factor must be in (0, 1)")
        if self.stop_lr >= self.lr:
            raise ValueError("stop_lr must be below the base lr")
        if self.dev_metric not in ("acc", "bleu4"):
            raise ValueError("dev metric must be 'acc' or 'bleu4'")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterStore) -> "AdamState":
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        return state


def adam_step(params: ParameterStore, grads: GradientMap, state: AdamState,
              cfg: TrainConfig, step: int, lr: float | None = None) -> None:
    """Bias-corrected Adam with decoupled weight decay.

    The decay term -lr*wd*theta is applied separately from the adaptive
    update; both read the pre-update parameter value.
    """
    if step < 1:
        raise ValueError("step counter starts at 1")
    eta = cfg.lr if lr is None else lr
    bc1 = 1.0 - cfg.beta1 ** step
    bc2 = 1.0 - cfg.beta2 ** step
    for name, p in params.items():
        g = grads[name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if cfg.weight_decay > 0:
            update = update + cfg.weight_decay * p.data
        p.data -= eta * update


def lr_at(step: int, reductions: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base lr, then plateau-triggered decay."""
    base = cfg.lr * (cfg.plateau_factor ** reductions)
    if step <= cfg.warmup_steps and cfg.warmup_steps > 0:
        return base * step / cfg.warmup_steps
    return base


def clip_gradients(grads: GradientMap, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.data ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.data *= scale
    return total


# ---------------------------------------------------------------------------
# evaluation helpers


def token_accuracy(model: Model, samples: list[SyntheticSample],
                   batch_size: int) -> float:
    """Teacher-forced next-token accuracy over non-PAD positions."""
    correct = total = 0
    for clip, tok in iter_batches(samples, batch_size):
        state = model.forward(clip, tok.inputs)
        pred = np.argmax(state.logits.data, axis=-1)
        hit = (pred == tok.labels) * tok.mask
        correct += hit.sum()
        total += tok.mask.sum()
    return float(correct / total)


def evaluate(model: Model, samples: list[SyntheticSample], batch_size: int,
             compute_bleu: bool = True, max_len: int = 32) -> dict[str, float]:
    """Dev-side metrics: accuracy, greedy corpus BLEU, interpretability."""
    saved = model.dropout_rng
    model.set_train_mode(None)
    try:
        acc = token_accuracy(model, samples, batch_size)
        bindings = []
        pairs = []
        for chunk_start in range(0, len(samples), batch_size):
            chunk = samples[chunk_start : chunk_start + batch_size]
            clip, tok = make_batch(chunk)
            _, _, _, cache = model.encode_clip(clip)
            bindings.append(cache.binding.data)
            if compute_bleu:
                hyps = model.greedy_decode(clip, max_len=max_len)
                for h, s in zip(hyps, chunk):
                    pairs.append((h, [int(t) for t in s.tokens[:-1]]))
        a_all = np.concatenate(bindings, axis=0)
        rep = mt.interp_report(a_all)
        out = {"dev_acc": acc, **rep.as_dict()}
        out["bleu4"] = mt.corpus_bleu(pairs)[3] if compute_bleu else float("nan")
        return out
    finally:
        model.set_train_mode(saved)


def dataset_alignment_purity(model: Model, samples: list[SyntheticSample],
                             batch_size: int) -> float:
    """Mean routing-vs-ground-truth purity over a dataset (eval mode)."""
    saved = model.dropout_rng
    model.set_train_mode(None)
    vals = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            clip, _ = make_batch(chunk)
            _, seg, _, cache = model.encode_clip(clip)
            for i, s in enumerate(chunk):
                vals.append(mt.alignment_purity(cache.binding.data[i],
                                                seg.w_seg.data[i],
                                                s.frame_to_segment))
        return float(np.mean(vals))
    finally:
        model.set_train_mode(saved)


# ---------------------------------------------------------------------------
# checkpoint io


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, opt: AdamState, cfg: TrainConfig,
                    step: int, reductions: int, evals_since: int,
                    best_metric: float, rng: np.random.Generator,
                    config_snapshot: dict | None = None) -> None:
    names = model.params.names()
    manifest = {
        "format_version": CKPT_VERSION,
        "step": step,
        "reductions": reductions,
        "evals_since_improve": evals_since,
        "best_metric": best_metric,
        "config": config_snapshot or {},
        "params": [[n, list(model.params[n].shape)] for n in names],
        "moments": [[n, list(opt.m[n].shape)] for n in names],
        "rng_state": rng.bit_generator.state,
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
        for n in names:
            fh.write(np.ascontiguousarray(opt.m[n], dtype="<f8").tobytes())
        for n in names:
            fh.write(np.ascontiguousarray(opt.v[n], dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    manifest: dict
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    def restore_params(self, model: Model) -> None:
        """Copy parameters into a model, validating names and shapes."""
        for name, arr in self.params.items():
            if name not in model.params:
                raise CheckpointError(f"checkpoint parameter {name!r} missing in model")
            target = model.params[name]
            if tuple(arr.shape) != target.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                    f"model {target.shape}")
            target.data = arr.copy()
        extra = set(model.params.names()) - set(self.params)
        if extra:
            raise CheckpointError(f"model parameters missing in checkpoint: {sorted(extra)}")

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        g.bit_generator.state = self.manifest["rng_state"]
        return g


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CKPT_MAGIC:
        raise CheckpointError("bad magic: not an SGTC1 file")
    if len(blob) < 9:
        raise CheckpointError("truncated checkpoint")
    (mlen,) = struct.unpack("<I", blob[5:9])
    try:
        manifest = json.loads(blob[9 : 9 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != CKPT_VERSION:
        raise CheckpointError("unsupported checkpoint version")
    pos = 9 + mlen

    def take(shape) -> np.ndarray:
        nonlocal pos
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if pos + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").reshape(shape)
        pos += nbytes
        return arr.astype(np.float64)

    params = {name: take(shape) for name, shape in manifest["params"]}
    m = {name: take(shape) for name, shape in manifest["moments"]}
    v = {name: take(shape) for name, shape in manifest["moments"]}
    return Checkpoint(manifest=manifest, params=params, m=m, v=v)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    log: list[dict]
    best_metric: float
    steps: int
    stop_reason: str
    wall_seconds: float


class Trainer:
    def __init__(self, model: Model, train_samples: list[SyntheticSample],
                 dev_samples: list[SyntheticSample], cfg: TrainConfig,
                 out_dir: str | Path | None = None,
                 config_snapshot: dict | None = None):
        if not train_samples:
            raise ValueError("training set is empty")
        self.model = model
        self.train_samples = train_samples
        self.dev_samples = dev_samples
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir else None
        self.config_snapshot = config_snapshot or {}
        self.opt = AdamState.for_params(model.params)
        self.step = 0
        self.reductions = 0
        self.evals_since = 0
        self.best_metric = -np.inf
        self.dropout_rng = np.random.default_rng([cfg.seed, 2])
        self.log: list[dict] = []
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.train_samples) / self.cfg.batch_size))

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 3, epoch])
        return rng.permutation(len(self.train_samples))

    def resume(self, path) -> None:
        ck = load_checkpoint(path)
        ck.restore_params(self.model)
        for name in self.model.params.names():
            self.opt.m[name] = ck.m[name].copy()
            self.opt.v[name] = ck.v[name].copy()
        self.step = int(ck.manifest["step"])
        self.reductions = int(ck.manifest["reductions"])
        self.evals_since = int(ck.manifest["evals_since_improve"])
        self.best_metric = float(ck.manifest["best_metric"])
        self.dropout_rng = ck.rng()

    def save(self, name: str) -> Path | None:
        if not self.out_dir:
            return None
        path = self.out_dir / name
        save_checkpoint(path, self.model, self.opt, self.cfg, self.step,
                        self.reductions, self.evals_since, self.best_metric,
                        self.dropout_rng, self.config_snapshot)
        return path

    def _eval_now(self) -> dict[str, float]:
        return evaluate(self.model, self.dev_samples, self.cfg.batch_size,
                        compute_bleu=True)

    def run(self) -> TrainResult:
        cfg = self.cfg
        spe = self.steps_per_epoch
        t0 = time.perf_counter()
        stop_reason = "max_epochs"
        csv_fh = None
        if self.out_dir:
            csv_path = self.out_dir / "train_log.csv"
            new_file = not csv_path.exists() or self.step == 0
            csv_fh = open(csv_path, "w" if new_file else "a")
            if new_file:
                csv_fh.write(",".join(LOG_COLUMNS) + "\n")
        try:
            while True:
                epoch = self.step // spe
                if epoch >= cfg.max_epochs:
                    break
                if cfg.max_steps and self.step >= cfg.max_steps:
                    stop_reason = "max_steps"
                    break
                order = self.epoch_order(epoch)
                pos = self.step % spe
                chunk = [self.train_samples[i]
                         for i in order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]]
                clip, tok = make_batch(chunk)
                self.step += 1
                lr = lr_at(self.step, self.reductions, cfg)
                self.model.set_train_mode(self.dropout_rng)
                try:
                    breakdown, _ = self.model.loss(clip, tok)
                    grads = backward(breakdown.total, self.model.params)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite value at step {self.step}: {exc}") from exc
                finally:
                    self.model.set_train_mode(None)
                if cfg.grad_clip > 0:
                    clip_gradients(grads, cfg.grad_clip)
                adam_step(self.model.params, grads, self.opt, cfg, self.step, lr=lr)

                row = {"step": self.step, "lr": lr, **breakdown.values()}
                eval_due = (self.step % cfg.eval_every == 0) if cfg.eval_every \
                    else (self.step % spe == 0)
                stop_now = False
                if eval_due and self.dev_samples:
                    dev = self._eval_now()
                    row.update(dev)
                    metric = dev["dev_acc"] if cfg.dev_metric == "acc" else dev["bleu4"]
                    if metric > self.best_metric + 1e-12:
                        self.best_metric = metric
                        self.evals_since = 0
                        self.save("best.ckpt")
                    else:
                        self.evals_since += 1
                        if self.evals_since >= cfg.plateau_patience:
                            self.reductions += 1
                            self.evals_since = 0
                            if cfg.lr * cfg.plateau_factor ** self.reductions < cfg.stop_lr:
                                stop_reason = "lr_floor"
                                stop_now = True
                    if cfg.stop_at_dev_acc and dev["dev_acc"] >= cfg.stop_at_dev_acc:
                        stop_reason = "dev_target"
                        stop_now = True
                self.log.append(row)
                if csv_fh:
                    csv_fh.write(",".join(
                        ("" if c not in row else
                         (str(row[c]) if c == "step" else f"{row[c]:.8g}"))
                        for c in LOG_COLUMNS) + "\n")
                if stop_now:
                    break
        finally:
            if csv_fh:
                csv_fh.close()
        self.save("last.ckpt")
        return TrainResult(log=self.log, best_metric=self.best_metric,
                           steps=self.step, stop_reason=stop_reason,
                           wall_seconds=time.perf_counter() - t0)
