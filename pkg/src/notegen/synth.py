"""Seeded synthetic melodies for demos and tests.

Songs are built from a few short motifs over a scale, transposed and
repeated, with occasional chords and rests, so they have the repeated
structure a sequence model can pick up.
"""

from __future__ import annotations

from fractions import Fraction

from .midi import NoteEvent, notes_to_events, write_smf
from .tensor import make_rng

SCALE = (0, 2, 3, 5, 7, 9, 10)  # dorian
DURATIONS = (Fraction(1, 4), Fraction(1, 2), Fraction(1, 2), Fraction(1), Fraction(3, 2))


def _motif(rng, length):
    steps = rng.integers(-2, 3, length)
    durs = [DURATIONS[i] for i in rng.integers(0, len(DURATIONS), length)]
    kinds = rng.choice(3, length, p=[0.8, 0.12, 0.08])  # note, chord, rest
    return list(zip(steps, durs, kinds))


def synth_song(seed: int, n_tokens: int = 150, n_motifs: int = 3, motif_len: int = 8,
               root: int = 60) -> list[NoteEvent]:
    """A sequence of exactly ``n_tokens`` events, never two rests in a row."""
    rng = make_rng(seed)
    motifs = [_motif(rng, motif_len) for _ in range(n_motifs)]
    notes: list[NoteEvent] = []
    onset = Fraction(0)
    degree = 0
    while len(notes) < n_tokens:
        motif = motifs[int(rng.integers(0, n_motifs))]
        shift = int(rng.integers(-2, 3))
        degree = shift
        for step, dur, kind in motif:
            if len(notes) >= n_tokens:
                break
            degree += int(step)
            octave, idx = divmod(degree, len(SCALE))
            pitch = min(max(root + 12 * octave + SCALE[idx], 24), 108)
            if kind == 2 and notes and not notes[-1].is_rest:
                ev = NoteEvent((), onset, dur, 0)
            elif kind == 1:
                ev = NoteEvent((pitch, pitch + 4, pitch + 7), onset, dur, 80)
            else:
                ev = NoteEvent((pitch,), onset, dur, 80)
            notes.append(ev)
            onset += dur
    return notes


def synth_corpus(n_songs: int, seed: int = 0, n_tokens: int = 150) -> list[list[NoteEvent]]:
    return [synth_song(seed * 100_003 + i, n_tokens) for i in range(n_songs)]


def synth_midi(seed: int, n_tokens: int = 150) -> bytes:
    return write_smf(notes_to_events(synth_song(seed, n_tokens)))
