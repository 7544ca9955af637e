"""Residual-adapter adaptation workbench for neural transducers."""

from .adapters import (AdapterConfig, ResidualAdapter, TrainableMask, adapter_param_count,
                       apply_mask, export_bundle, import_bundle, inject, mask_for_mode)
from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (FeatureSequence, SpeakerSpec, Utterance, generate_synthetic_corpus,
                   spec_augment, stack_frames)
from .decoding import evaluate_utterances, greedy_decode
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import EvalReport, aggregate, delta, gamma, wer
from .model import ModelConfig, TransducerModel
from .rnnt_loss import alpha_lattice, brute_force_loss, transducer_loss
from .train import RunRecord, TrainConfig, measure_throughput, sweep, train

__version__ = "0.1.0"
