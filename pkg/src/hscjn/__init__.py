"""HRED dialogue model with a future-word-set prediction head and an entropy regulariser.

Pure numpy: a small reverse-mode autodiff core, corpus handling, the
encoder/decoder, the joint loss, beam search, BLEU/Distinct metrics and a
training CLI.
"""

from .corpus import Dialogue, TrainingExample, Vocabulary, build_vocabulary, encode_example, make_examples, toy_corpus
from .decode import beam_search, generate, greedy_decode
from .losses import LossBreakdown, build_target_sets, compute_losses, loss_me, loss_total, loss_wp
from .metrics import EvalReport, bleu_score, distinct_n
from .model import HREDModel, ModelConfig
from .tensor import Tensor, backward, grad_check
from .train import TrainConfig, evaluate_split, fit, load_checkpoint, new_state, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "EvalReport",
    "HREDModel",
    "LossBreakdown",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "TrainingExample",
    "Vocabulary",
    "backward",
    "beam_search",
    "bleu_score",
    "build_target_sets",
    "build_vocabulary",
    "compute_losses",
    "distinct_n",
    "encode_example",
    "evaluate_split",
    "fit",
    "generate",
    "grad_check",
    "greedy_decode",
    "load_checkpoint",
    "loss_me",
    "loss_total",
    "loss_wp",
    "make_examples",
    "new_state",
    "save_checkpoint",
    "toy_corpus",
]
