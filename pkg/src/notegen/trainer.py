"""RMSProp training, evaluation metrics, learning curves and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadConfig, BadTarget, CorruptCheckpoint, Divergence, EmptySet,
                     ShapeMismatch, TooShort, UnknownVariant)
from .model import VARIANTS, ModelDims, ModelParams, build_variant, loss_and_grads, model_forward
from .tensor import child_rng, dump_tensors, load_tensors
from .tokens import Vocabulary, WindowSet, corpus_windows, make_batches

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "notegen-checkpoint/1"
CURVE_HEADER = ("epoch", "split", "cce", "rmse", "mse")
#: published full-model result, kept for output-format comparison only
PUBLISHED_REFERENCE = {"variant": "bilstm_attn_lstm", "cce": 0.1069, "rmse": 0.6694, "mse": 0.4481}


@dataclass
class TrainConfig:
    variant: str = "bilstm_attn_lstm"
    epochs: int = 10
    batch_rows: int = 16
    batch_chunk: int = 64
    window: int = 100
    hidden: int = 512
    attn_dim: int = 128
    lr: float = 0.001
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    dropout_rate: float = 0.3
    seed: int = 0
    checkpoint_every: int = 0
    holdout: float = 0.0
    clip_norm: float = 0.0
    micro_batch: int = 256
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("batch_rows", "batch_chunk", "window", "hidden", "attn_dim",
                     "micro_batch", "threads"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be positive")
        for name in ("epochs", "checkpoint_every", "seed", "clip_norm"):
            if getattr(self, name) < 0:
                raise BadConfig(f"{name} must be non-negative")
        if self.lr <= 0 or self.rmsprop_eps <= 0 or not 0 < self.rmsprop_rho < 1:
            raise BadConfig("lr and rmsprop_eps must be positive, rmsprop_rho in (0, 1)")
        if not 0 <= self.dropout_rate < 1 or not 0 <= self.holdout < 1:
            raise BadConfig("dropout_rate and holdout must be in [0, 1)")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise BadConfig(f"{path}:{lineno}: bad entry {line!r}")
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        kw = {}
        for key, value in values.items():
            conv = {"int": int, "float": float, "str": str}[types[key]]
            try:
                kw[key] = conv(value)
            except ValueError:
                raise BadConfig(f"{key}: cannot parse {value!r} as {types[key]}") from None
        return cls(**kw)

    def dims(self, vocab_size: int) -> ModelDims:
        return ModelDims(self.window, self.hidden, self.attn_dim, vocab_size)

    def manifest(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("threads")  # does not affect results
        return d


@dataclass(frozen=True)
class Metrics:
    cce: float
    rmse: float
    mse: float

    def as_dict(self):
        return dataclasses.asdict(self)


def cce_loss(probs, target: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= target < probs.shape[-1]:
        raise BadTarget(f"target {target} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[target], 1e-12)))


def rmsprop_step(params: ModelParams, grads: dict, state: dict, lr: float = 0.001,
                 rho: float = 0.9, eps: float = 1e-8):
    """In-place update ``s = rho*s + (1-rho)*g^2; theta -= lr*g/(sqrt(s)+eps)``."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        s = state.setdefault(name, np.zeros_like(theta))
        s *= rho
        s += (1.0 - rho) * g * g
        theta -= lr * g / (np.sqrt(s) + eps)
    params.bump()
    return params, state


def predict(params: ModelParams, inputs, batch: int = 256) -> np.ndarray:
    out = [model_forward(params, inputs[i:i + batch])[0] for i in range(0, len(inputs), batch)]
    return np.concatenate(out) if out else np.zeros((0, params.dims.vocab))


def metrics_from_probs(probs, targets, V: int) -> Metrics:
    if len(targets) == 0:
        raise EmptySet("no windows to evaluate")
    rows = np.arange(len(targets))
    cce = float(np.mean(-np.log(np.maximum(probs[rows, targets], 1e-12))))
    dev = (probs.argmax(axis=1) - targets) / V
    mse = float(np.mean(dev * dev))
    return Metrics(cce, math.sqrt(mse), mse)


def evaluate(params: ModelParams, windows: WindowSet, batch: int = 256) -> Metrics:
    """CCE plus (R)MSE of the argmax id against the target, both scaled by 1/V."""
    if len(windows) == 0:
        raise EmptySet("no windows to evaluate")
    probs = predict(params, windows.inputs, batch)
    return metrics_from_probs(probs, windows.targets, params.dims.vocab)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, config: TrainConfig | None,
                    epoch: int) -> None:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "variant": params.variant,
        "dims": params.dims.to_dict(),
        "dropout": config.dropout_rate if config else 0.0,
        "config": config.manifest() if config else None,
        "epoch": epoch,
        "vocab": vocab.tokens,
    }
    Path(path).write_bytes(dump_tensors(params.tensors, manifest))


def load_checkpoint(path):
    """Returns ``(params, vocab, manifest)``."""
    tensors, manifest = load_tensors(Path(path).read_bytes())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    params = ModelParams(manifest["variant"], ModelDims(**manifest["dims"]), tensors)
    return params, Vocabulary(manifest["vocab"]), manifest


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    curve: list  # (epoch, split, Metrics)
    checkpoint: Path | None


def split_songs(songs, holdout: float):
    """Last ``holdout`` fraction of songs (whole files) is held out."""
    if holdout <= 0 or len(songs) < 2:
        return list(songs), []
    n = min(len(songs) - 1, max(1, round(len(songs) * holdout)))
    return list(songs[:-n]), list(songs[-n:])


def _grad_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def train(config: TrainConfig, songs, vocab: Vocabulary, out_dir=None, on_epoch=None) -> TrainResult:
    """Train one variant on ``songs`` (lists of token ids).

    Writes ``curve.csv``, ``metrics.jsonl`` and ``model.ckpt`` into
    ``out_dir`` when given. ``on_epoch(epoch, split, metrics)`` is called for
    every curve row. Raises :class:`Divergence` on a non-finite loss after
    dumping the offending state to ``diverged.ckpt``.
    """
    V = len(vocab)
    dims = config.dims(V)
    params = build_variant(config.variant, dims, seed=config.seed)
    train_songs, held_songs = split_songs(songs, config.holdout)
    train_w = corpus_windows(train_songs, config.window)
    if len(train_w) == 0:
        raise TooShort(f"no training song is longer than the window ({config.window} tokens)")
    held_w = corpus_windows(held_songs, config.window) if held_songs else None
    plan = make_batches(np.arange(len(train_w)), config.batch_rows, config.batch_chunk)
    batches = plan.batches

    out = Path(out_dir) if out_dir is not None else None
    curve_fh = jsonl_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curve_fh = open(out / "curve.csv", "w", newline="")
        csv.writer(curve_fh).writerow(CURVE_HEADER)
        jsonl_fh = open(out / "metrics.jsonl", "w")

    curve = []

    def record(epoch, split, m):
        curve.append((epoch, split, m))
        if curve_fh is not None:
            csv.writer(curve_fh).writerow([epoch, split, repr(m.cce), repr(m.rmse), repr(m.mse)])
            curve_fh.flush()
            jsonl_fh.write(json.dumps({"epoch": epoch, "split": split, **m.as_dict()}) + "\n")
            jsonl_fh.flush()
        if on_epoch is not None:
            on_epoch(epoch, split, m)

    state: dict = {}
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            for b, batch in enumerate(batches):
                idx = batch.reshape(-1)
                grads, loss = _batch_grads(params, train_w, idx, config, epoch, b, pool)
                if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    if out is not None:
                        save_checkpoint(out / "diverged.ckpt", params, vocab, config, epoch)
                    raise Divergence(f"non-finite loss at epoch {epoch}, batch {b}")
                if config.clip_norm > 0:
                    norm = _grad_norm(grads)
                    if norm > config.clip_norm:
                        for g in grads.values():
                            g *= config.clip_norm / norm
                rmsprop_step(params, grads, state, config.lr, config.rmsprop_rho, config.rmsprop_eps)
            record(epoch, "train", evaluate(params, train_w))
            if held_w is not None and len(held_w):
                record(epoch, "heldout", evaluate(params, held_w))
            log.info("epoch %d: %s", epoch, curve[-1][2])
            if out is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(out / f"epoch{epoch:04d}.ckpt", params, vocab, config, epoch)
    finally:
        if pool is not None:
            pool.shutdown()
        if curve_fh is not None:
            curve_fh.close()
            jsonl_fh.close()

    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, params, vocab, config, config.epochs)
    return TrainResult(params, curve, ckpt)


def _batch_grads(params, windows, idx, config, epoch, b, pool):
    """Mean gradient over the windows ``idx``, split into micro-batches.

    Each micro-batch draws its dropout mask from its own stream keyed by
    (seed, epoch, batch, micro-batch) and results are reduced in order, so
    the outcome does not depend on the thread count.
    """
    mb = config.micro_batch
    parts = [idx[i:i + mb] for i in range(0, len(idx), mb)]

    def work(m):
        sel = parts[m]
        rng = child_rng(config.seed, epoch, b, m)
        return loss_and_grads(params, windows.inputs[sel], windows.targets[sel], "train",
                              rng=rng, dropout=config.dropout_rate)

    results = list(pool.map(work, range(len(parts)))) if pool else [work(m) for m in range(len(parts))]
    total = len(idx)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    for part, (l, g) in zip(parts, results):
        w = len(part) / total
        loss += w * l
        for k in grads:
            grads[k] += w * g[k]
    return grads, loss


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
