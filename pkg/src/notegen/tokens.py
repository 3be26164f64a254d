"""Note/chord/rest-duration tokens, the vocabulary, and training windows."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BadToken, EmptyCorpus, TooShort, UnknownToken
from .midi import GRID, NoteEvent

REST = "R"
DEFAULT_VELOCITY = 80


def token_text(pitches, duration: Fraction) -> str:
    head = ".".join(str(p) for p in sorted(pitches)) if pitches else REST
    return f"{head}|{float(duration):.2f}"


def tokenize(notes) -> list[str]:
    return [token_text(n.pitches, n.duration) for n in notes]


def parse_token(tok: str) -> tuple[tuple[int, ...], Fraction]:
    """Split a canonical token into ``(pitches, duration)``."""
    try:
        head, dur_text = tok.split("|")
        duration = Fraction(Decimal(dur_text))
    except (ValueError, InvalidOperation):
        raise BadToken(f"malformed token {tok!r}") from None
    if head == REST:
        pitches: tuple[int, ...] = ()
    else:
        try:
            pitches = tuple(int(p) for p in head.split("."))
        except ValueError:
            raise BadToken(f"malformed pitch list in {tok!r}") from None
        if any(b <= a for a, b in zip(pitches, pitches[1:])):
            raise BadToken(f"pitches not strictly ascending in {tok!r}")
        if any(not 0 <= p <= 127 for p in pitches):
            raise BadToken(f"pitch out of range in {tok!r}")
    if duration <= 0 or duration % GRID:
        raise BadToken(f"duration off grid in {tok!r}")
    if token_text(pitches, duration) != tok:
        raise BadToken(f"non-canonical token {tok!r}")
    return pitches, duration


def detokenize(tokens, velocity: int = DEFAULT_VELOCITY) -> list[NoteEvent]:
    """Rebuild notes laid end to end; rests get velocity 0."""
    notes = []
    onset = Fraction(0)
    for tok in tokens:
        pitches, dur = parse_token(tok)
        notes.append(NoteEvent(pitches, onset, dur, velocity if pitches else 0))
        onset += dur
    return notes


class Vocabulary:
    """Sorted bijection between token strings and dense integer ids."""

    def __init__(self, tokens):
        self.tokens = sorted(set(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, tok):
        return tok in self.index

    def encode(self, tokens) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise UnknownToken(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> list[str]:
        V = len(self.tokens)
        out = []
        for i in ids:
            if not 0 <= i < V:
                raise UnknownToken(f"id {i} outside vocabulary of size {V}")
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        vocab = cls(lines)
        if vocab.tokens != lines:
            raise BadToken(f"{path}: vocabulary file is not sorted/unique")
        return vocab


def build_vocab(corpus) -> Vocabulary:
    tokens = [t for song in corpus for t in song]
    if not tokens:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tokens)


@dataclass
class WindowSet:
    inputs: np.ndarray  # (W, L) int64
    targets: np.ndarray  # (W,) int64

    def __len__(self):
        return len(self.targets)

    @classmethod
    def concat(cls, sets) -> "WindowSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls(np.zeros((0, 0), np.int64), np.zeros(0, np.int64))
        return cls(np.concatenate([s.inputs for s in sets]),
                   np.concatenate([s.targets for s in sets]))


def make_windows(ids, L: int = 100, stride: int = 1) -> WindowSet:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) <= L:
        raise TooShort(f"need at least {L + 1} ids for window length {L}, got {len(ids)}")
    starts = np.arange(0, len(ids) - L, stride)
    inputs = ids[starts[:, None] + np.arange(L)]
    return WindowSet(inputs, ids[starts + L])


def corpus_windows(songs, L: int) -> WindowSet:
    """Windows of every song long enough; windows never straddle two songs."""
    return WindowSet.concat(make_windows(s, L) for s in songs if len(s) > L)


@dataclass
class BatchPlan:
    rows: np.ndarray  # (R, row_length)
    chunk: int

    @property
    def batches(self) -> np.ndarray:
        """Array ``(n_batches, R, C)``; batch b is the b-th chunk of every row."""
        R, n = self.rows.shape
        nb = n // self.chunk
        return self.rows[:, :nb * self.chunk].reshape(R, nb, self.chunk).transpose(1, 0, 2)

    def __len__(self):
        return self.rows.shape[1] // self.chunk


def make_batches(ids, R: int = 16, C: int = 64) -> BatchPlan:
    ids = np.asarray(ids)
    if len(ids) < R * C:
        raise TooShort(f"need at least R*C = {R * C} ids, got {len(ids)}")
    row_len = len(ids) // R
    return BatchPlan(ids[:R * row_len].reshape(R, row_len), C)


def encode_input(window, V: int) -> np.ndarray:
    return np.asarray(window, dtype=np.float64) / V
