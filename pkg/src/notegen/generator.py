"""Autoregressive continuation and MIDI output."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadConfig, BadSeed
from .midi import DEFAULT_PPQ, DEFAULT_TEMPO, notes_to_events, write_smf
from .model import ModelParams, model_forward
from .tensor import make_rng
from .tokens import Vocabulary, detokenize

GENERATED_VELOCITY = 80


@dataclass
class SamplerConfig:
    seed_window: list
    steps: int = 100
    strategy: str = "argmax"
    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise BadConfig("steps must be >= 1")
        if self.strategy not in ("argmax", "temperature"):
            raise BadConfig(f"unknown strategy {self.strategy!r}")
        if not self.temperature > 0:
            raise BadConfig("temperature must be > 0")


def sample_next(probs, strategy: str, temperature: float, rng) -> int:
    if strategy == "argmax":
        return int(np.argmax(probs))
    logits = np.log(np.maximum(probs, 1e-300)) / temperature
    z = np.exp(logits - logits.max())
    z /= z.sum()
    return int(rng.choice(len(z), p=z))


def generate_ids(params: ModelParams, cfg: SamplerConfig) -> list[int]:
    L, V = params.dims.window, params.dims.vocab
    window = list(cfg.seed_window)
    if len(window) != L:
        raise BadSeed(f"seed window must hold exactly {L} tokens, got {len(window)}")
    if any(not 0 <= i < V for i in window):
        raise BadSeed(f"seed ids must lie in [0, {V})")
    rng = make_rng(cfg.rng_seed)
    out = []
    for _ in range(cfg.steps):
        probs, _ = model_forward(params, np.asarray(window, dtype=np.int64))
        nxt = sample_next(probs, cfg.strategy, cfg.temperature, rng)
        out.append(nxt)
        window = window[1:] + [nxt]
    return out


def generate(params: ModelParams, vocab: Vocabulary, cfg: SamplerConfig) -> list[str]:
    if len(vocab) != params.dims.vocab:
        raise BadSeed(f"vocabulary size {len(vocab)} != model output size {params.dims.vocab}")
    return vocab.decode(generate_ids(params, cfg))


def render_midi(tokens, ppq: int = DEFAULT_PPQ, tempo: int = DEFAULT_TEMPO) -> bytes:
    return write_smf(notes_to_events(detokenize(tokens, GENERATED_VELOCITY), ppq, tempo))


def emit_midi(tokens, out_path, ppq: int = DEFAULT_PPQ, token_path=None) -> Path:
    """Write tokens as a MIDI file, optionally with a side file of token strings."""
    out_path = Path(out_path)
    out_path.write_bytes(render_midi(tokens, ppq))
    if token_path is not None:
        Path(token_path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")
    return out_path
