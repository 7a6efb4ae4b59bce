"""Multimodal dementia detection from speech features and CHAT transcripts."""

from .audio import AudioSignal, FeatureImage, Spectrogram, build_feature_image, log_mel_spectrogram, mfcc
from .chat import Transcript, TokenSequence, clean_utterance, parse_chat, tokenize
from .encoders import EncoderConfig
from .fusion import FusionKind, FusionModel, init_fusion_model, model_forward
from .harness import RunConfig, TrainConfig, evaluate_metrics, run_experiment, split_train_val, synth_dataset, train

__version__ = "0.1.0"
