"""Shared setup for the experiment scripts: corpus, windows, training and scoring."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from crowdgan.data import make_windows
from crowdgan.encoder import ModelConfig, prepare_windows
from crowdgan.gan import NoiseSource, TrainConfig, Trainer, forward_generator, generate, load_model
from crowdgan.grouping import detect_groups
from crowdgan.metrics import ade_fde_batch, constant_position, constant_velocity, group_mitre_scores, pool_scores
from crowdgan.synth import SynthConfig, generate_corpus

CORPUS_SCENES = 100
FRESH_SEED = 2024
FRESH_SCENES = 20


def corpus_windows(cfg: ModelConfig, seed: int = 0, n_scenes: int = CORPUS_SCENES):
    corpus = generate_corpus(SynthConfig(seed=seed), n_scenes)
    return {
        split: [w for s in corpus.split(split) for w in make_windows(s, cfg.t_obs, cfg.t_pred)]
        for split in ("train", "val", "test")
    }


def fresh_scenes(n: int = FRESH_SCENES, seed: int = FRESH_SEED):
    return generate_corpus(SynthConfig(seed=seed), n).scenes


def train_or_load(path: Path, model_cfg: ModelConfig, train_cfg: TrainConfig, windows) -> tuple:
    """Reuse a checkpoint written by an identical earlier run."""
    path = Path(path)
    meta = path.with_suffix(".json")
    key = {"model": model_cfg.__dict__, "train": train_cfg.__dict__}
    if path.is_file() and meta.is_file() and json.loads(meta.read_text()) == json.loads(json.dumps(key)):
        return load_model(path), None
    trainer = Trainer(model_cfg, train_cfg)
    trainer.fit(windows["train"], windows["val"])
    path.parent.mkdir(parents=True, exist_ok=True)
    trainer.save(path)
    meta.write_text(json.dumps(key, indent=2, sort_keys=True))
    return trainer.result().model, trainer.history


def forecast_report(model, windows, seed: int = 0) -> dict:
    batch = prepare_windows(windows, model.cfg)
    preds, _ = generate(batch, model, NoiseSource(seed, model.cfg.z_dim))
    pos = np.stack([p.positions for p in preds])
    steps = model.cfg.t_future
    return {
        "model": ade_fde_batch(pos, batch.future),
        "constant_position": ade_fde_batch(constant_position(batch.observed, steps), batch.future),
        "constant_velocity": ade_fde_batch(constant_velocity(batch.observed, steps), batch.future),
    }


def median_abs_hidden(model, windows) -> float:
    batch = prepare_windows(windows, model.cfg)
    z = np.zeros((len(batch), model.cfg.t_pred, model.cfg.z_dim))
    _, hidden, _, _ = forward_generator(model, batch, z)
    return float(np.median(np.abs(hidden.value)))


def grouping_score(model, scenes, tsne_cfg=None, dbscan_cfg=None):
    """Pooled Group-MITRE score over the scenes, plus the per-scene scores."""
    scores = [group_mitre_scores(detect_groups(s, model, tsne_cfg, dbscan_cfg), s.group_labels) for s in scenes]
    return pool_scores(scores), scores
