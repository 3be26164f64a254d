"""Tokenize MIDI into note/chord/rest-duration symbols, train recurrent
attention models on them from scratch, and generate new MIDI."""

from .generator import SamplerConfig, emit_midi, generate
from .midi import MidiFile, NoteEvent, TrackEvent, events_to_notes, notes_to_events, parse_smf, write_smf
from .model import ModelDims, ModelParams, build_variant, model_backward, model_forward
from .tokens import Vocabulary, build_vocab, detokenize, make_batches, make_windows, tokenize
from .trainer import Metrics, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
