"""Speaker-aware streaming keyword spotting, built on plain numpy.

The library half covers models (streaming SVDF encoder/decoder with
optional feature-wise conditioning on a speaker embedding), a tape-based
autodiff substrate, a synthetic benchmark corpus, training, and stratified
equal-error-rate evaluation. The CLI half (``kwspot``) wires those into
gen-data / train / eval / report pipelines with figures.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    KwspotError,
    NoEnrollmentError,
    NonFiniteError,
    UsageError,
    ValidationError,
)
from .model import (
    KwsModel,
    KwsModelConfig,
    StreamSession,
    build,
    default_config,
    full_config,
    load_model,
    save_model,
)
from .metrics import compute_eer, det_curve, stratified_report, utterance_score
from .data import CorpusConfig, extract_logmel, generate_corpus, load_corpus
from .train import TrainConfig, train

__all__ = [
    "__version__",
    "KwspotError", "ConfigError", "DataError", "DimensionError",
    "NoEnrollmentError", "NonFiniteError", "UsageError", "ValidationError",
    "KwsModel", "KwsModelConfig", "StreamSession", "build",
    "default_config", "full_config", "load_model", "save_model",
    "compute_eer", "det_curve", "stratified_report", "utterance_score",
    "CorpusConfig", "extract_logmel", "generate_corpus", "load_corpus",
    "TrainConfig", "train",
]
