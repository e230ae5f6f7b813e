"""Event detection from the cross-covariance of autoencoder latent representations."""
from .autoencoder import (ArchitectureConfig, Autoencoder, TrainConfig, TrainResult, build_model,
                          decode, encode, load_model, reconstruction_loss, save_model, train)
from .config import RunConfig, dump_config, load_config
from .evaluation import (EvalReport, EvalSettings, ScoredRecord, evaluate, kfold_split,
                         roc_auc)
from .numerics import CheckpointError, Param, ShapeError, TensorB, conv1d, conv1d_transposed
from .synthetic import SynthConfig, build_dataset, generate_records, sta_lta
from .trigger import (CovarianceProfile, MethodConfig, ProjectionSet, TriggerConfig,
                      cross_covariance, gaussian_score, score_augmented, score_ensemble,
                      score_method, score_single, time_warp, train_projections)
from .waveforms import (PreprocessConfig, Waveform, WaveformError, load_dataset,
                        onset_margin_filter, preprocess, read_container, write_container)

__version__ = "0.1.0"
