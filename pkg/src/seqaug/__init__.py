"""Generative augmentation of bulk sequencing counts and learning-curve
sample-size planning."""
from .data import (CountMatrix, PreprocessConfig, filter_markers, inverse_log2p1, load_counts,
                   log2p1, normalize, preprocess, subsample_pilot, write_counts)
from .training import (TrainedGenerator, TrainingPolicy, early_stopper, fit_generator, load_generator,
                       make_batches, pretrain_finetune, save_generator)
from . import vae, gan, flows  # noqa: F401  (register model families)
from .models import parse_model_spec
from .offline import OfflineConfig, ae_head, gaussian_head, offline_augment
from .metrics import EvalReport, evaluate
from .curve import (HarnessConfig, IplfFit, IplfParams, accuracy_harness, fit_iplf, iplf_eval,
                    predict_with_interval, project_sample_size)

__version__ = "0.1.0"
