"""Trajectory forecasting and unsupervised group detection for pedestrian crowds."""

from .data import Partition, Scene, Trajectory, Window, load_annotations, make_windows, write_annotations
from .encoder import ModelConfig
from .gan import GanModel, TrainConfig, Trainer, generate, train
from .grouping import DbscanConfig, TsneConfig, dbscan, detect_groups, pca_project, tsne_reduce
from .metrics import ade_fde, group_mitre_scores, pairwise_scores
from .synth import SynthConfig, generate_corpus, generate_scene

__version__ = "0.1.0"
