"""Greedy transducer decoding and corpus-level evaluation."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad
from .data import Utterance, stack_frames
from .errors import ContractError
from .metrics import EvalReport, wer
from .model import TransducerModel


def greedy_decode(model: TransducerModel, features: np.ndarray,
                  max_symbols_per_frame: int = 8) -> list[int]:
    """Frame-synchronous greedy search.

    At each encoder frame, repeatedly take the argmax over V+1 outputs:
    a non-blank token is emitted and advances the prediction network, a
    blank moves to the next frame. Emissions per frame are capped so the
    loop always terminates.
    """
    if max_symbols_per_frame < 1:
        raise ContractError("max_symbols_per_frame must be >= 1")
    blank = model.config.blank_id
    with no_grad():
        enc = model.encoder_forward(Tensor(features, dtype=model.config.np_dtype)).data
    pred_out, state = model.prediction.step_np(None, model.prediction.start_state())
    tokens: list[int] = []
    for t in range(enc.shape[0]):
        for _ in range(max_symbols_per_frame):
            k = int(np.argmax(model.joint.logits_np(enc[t], pred_out)))
            if k == blank:
                break
            tokens.append(k)
            pred_out, state = model.prediction.step_np(k, state)
    return tokens


def evaluate_utterances(model: TransducerModel, utts: list[Utterance],
                        max_symbols_per_frame: int = 8, stack: int = 4,
                        stride: int = 3) -> EvalReport:
    """Decode every utterance (deterministic id order) and score WER."""
    report = EvalReport()
    for utt in sorted(utts, key=lambda u: u.id):
        hyp = greedy_decode(model, stack_frames(utt.features, stack, stride),
                            max_symbols_per_frame)
        report.add(wer(utt.labels, hyp, utt_id=utt.id))
    return report
