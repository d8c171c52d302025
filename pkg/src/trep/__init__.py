"""Self-supervised timestep-level representations for multivariate time
series, learned jointly with a vector embedding of time."""

from .data import TimeSeriesDataset, load_csv, mask_fraction, save_csv, synth, zscore
from .downstream import (AnomalyConfig, F1Result, KernelClassifier, RidgeModel,
                         anomaly_score_stream, f1_with_delay, forecast_eval,
                         persistence_eval, ridge_fit, ridge_solve, timedim_classify,
                         tune_beta, windowed_anomaly_classify)
from .encoder import EncoderConfig, encode, receptive_field
from .losses import (LossReport, TaskConfig, TaskHeads, combine, hierarchical_loss,
                     loss_divergence, loss_instance, loss_te_forecast, loss_temporal)
from .sampling import ContextPair, make_context_pair, sample_crops
from .tensor import AdamState, Tensor, adam_step, backward, no_grad, zero_grad
from .time_embedding import (TimeEmbeddingParams, embed_timesteps, init_time_embedding,
                             jsd, jsd_pairs, normalize_simplex, raw_embed)
from .trainer import (Model, Representation, TrainConfig, encode_dataset,
                      load_checkpoint, save_checkpoint, save_history, train)

__version__ = "0.1.0"
