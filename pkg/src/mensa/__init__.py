"""Multi-event survival analysis with a shared trunk and Weibull mixture heads."""

from .dataset import (
    MultiEventDataset,
    PreprocessState,
    SplitSpec,
    StateEncodedDataset,
    encode_event_free,
    load_csv,
    preprocess_apply,
    preprocess_fit,
    split_stratified,
    write_csv,
)
from .evaluation import evaluate_model
from .metrics import MetricReport, global_ci, harrell_ci, ibs, km_fit, local_ci, margin_mae, d_calibration, survival_l1
from .model import MensaConfig, MensaModel, init_model, log_surv, predict_isd, predict_time
from .simulation import CopulaSpec, GroundTruthDgp, generate_dataset, tau_to_theta, true_survival
from .training import NumericalError, TrainConfig, TrajectorySet, total_loss, train

__version__ = "0.1.0"
