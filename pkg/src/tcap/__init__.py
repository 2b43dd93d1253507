"""Text-conditional guided-LSTM image captioning at desk scale.

A small, dependency-light implementation of an LSTM captioner whose
gates receive a guidance vector built by masking an image embedding
with weights conditioned on the words generated so far. Includes exact
manual backpropagation, a three-stage Adam training schedule, greedy
and beam decoding, BLEU/CIDEr-D scoring, and mask-similarity analysis.
"""

from .data import (CaptionExample, Dataset, FeatureStore, SynthSpec,
                   load_dataset, save_dataset, synth_dataset)
from .decoding import BeamHypothesis, DecodeConfig, beam_search, greedy_decode
from .errors import FormatError, NumericError, TcapError
from .metrics import MetricReport, bleu, cider_d, evaluate
from .analysis import mask_nearest_neighbors
from .model import (Dims, ForwardTrace, FullTensorParams, GuidanceMode,
                    LstmState, ModelParams, backward_sequence, embed_image,
                    embed_word, forward_sequence, glstm_step, guidance,
                    guidance_full_tensor, history_vector, init_params)
from .numerics import Transfer
from .training import (AdamState, Checkpoint, GradientCheckReport, InitConfig,
                       TrainConfig, adam_step, gradient_check, load_checkpoint,
                       loss, mean_per_token_loss, save_checkpoint, train)
from .vocab import (START, STOP, UNK, Vocabulary, build_vocab, decode_caption,
                    encode_caption, tokenize)

__version__ = "0.1.0"

__all__ = [
    "BeamHypothesis", "CaptionExample", "Checkpoint", "AdamState", "Dataset",
    "DecodeConfig", "Dims", "FeatureStore", "FormatError", "ForwardTrace",
    "FullTensorParams", "GradientCheckReport", "GuidanceMode", "InitConfig",
    "LstmState", "MetricReport", "ModelParams", "NumericError", "START",
    "STOP", "SynthSpec", "TcapError", "TrainConfig", "Transfer", "UNK",
    "Vocabulary", "adam_step", "backward_sequence", "beam_search", "bleu",
    "build_vocab", "cider_d", "decode_caption", "embed_image", "embed_word",
    "encode_caption", "evaluate", "forward_sequence", "glstm_step",
    "gradient_check", "greedy_decode", "guidance", "guidance_full_tensor",
    "history_vector", "init_params", "load_checkpoint", "load_dataset",
    "loss", "mask_nearest_neighbors", "mean_per_token_loss", "save_checkpoint",
    "save_dataset", "synth_dataset", "tokenize", "train",
]
