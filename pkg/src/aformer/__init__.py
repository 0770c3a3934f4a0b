"""Accent-robust speech-to-text at desk scale: a dual-encoder
(general + accent) sequence model with fusion, hybrid frame-level/attention
training, a multi-pass adaptation protocol, joint beam decoding, and a
synthetic accented-sequence task — all on a small numpy autodiff core.
"""

from .numerics import Tensor, backward, no_grad
from .model import (AformerModel, ModelConfig, desk_config, full_scale_config,
                    ctc_loss, attention_loss, hybrid_loss, utterance_loss,
                    decode_utterance, save_checkpoint, load_checkpoint,
                    model_from_checkpoint)
from .data import (Tokenizer, AccentSpec, UtteranceRecord, CorpusManifest,
                   generate_corpus, load_corpus, load_corpus_list, cmvn)
from .training import (Adam, PassSpec, RunManifest, AblationSettings,
                       warmup_lr, apply_freeze, run_pass, run_ablation)
from .scoring import ScoreReport, edit_distance_align, score_pairs, evaluate_model

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "AformerModel", "ModelConfig", "desk_config", "full_scale_config",
    "ctc_loss", "attention_loss", "hybrid_loss", "utterance_loss",
    "decode_utterance", "save_checkpoint", "load_checkpoint", "model_from_checkpoint",
    "Tokenizer", "AccentSpec", "UtteranceRecord", "CorpusManifest",
    "generate_corpus", "load_corpus", "load_corpus_list", "cmvn",
    "Adam", "PassSpec", "RunManifest", "AblationSettings",
    "warmup_lr", "apply_freeze", "run_pass", "run_ablation",
    "ScoreReport", "edit_distance_align", "score_pairs", "evaluate_model",
    "__version__",
]
