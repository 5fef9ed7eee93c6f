"""Verification of reported drone imagery against low-resolution satellite tiles."""
from .attacks import (CoverRegressor, PGDParams, attack_adversarial, attack_combined, attack_wrong_location,
                      attack_wrong_time, generate_attacks, pgd_attack, train_cover_regressor)
from .baselines import FeatureExtractor, feature_distance, pixel_distance, project2d
from .dataset import Dataset, Submission, load_dataset, save_dataset
from .evalharness import ExperimentConfig, evasion_rate, load_config, run_experiment
from .metriclearn import TrainConfig, make_triplets, train_metric, triplet_loss
from .nnet import EmbeddingModel, adam_step, embed, gradient_check, load_weights, prepare, save_weights
from .raster import mse, read_png, resample, standardize, write_png
from .scenesim import (WorldConfig, build_dataset, forest_cover, generate_world, render_drone,
                       render_satellite)
from .stats import auc
from .verifier import Calibration, Verdict, calibrate, verify

__version__ = "0.1.0"
