"""Conditional GAN forecaster: generator and discriminator LSTMs conditioned on the
neighbourhood context, trained with alternating discriminator/generator epochs.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Window
from .encoder import ModelConfig, NeighbourhoodEncoder, PreparedBatch, prepare_windows
from .errors import ContractViolation, TrainingDivergence
from .metrics import ade_fde_batch
from .nn import LSTM, Adam, Dense, Module, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("gd-gan", "no-gan", "unconditional-gan", "no-l1")


@dataclass
class TrainConfig:
    lam: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 500
    mode: str = "gd-gan"
    seed: int = 0
    clip_norm: float = 5.0
    adam_beta1: float = 0.9

    def __post_init__(self):
        if self.lam < 0:
            raise ContractViolation("lambda must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.mode == "no-l1" else self.lam


class NoiseSource:
    """Seeded stream of standard-normal noise vectors."""

    def __init__(self, seed: int, z_dim: int):
        self.seed = seed
        self.z_dim = z_dim
        self.rng = np.random.default_rng(seed)

    def sample(self, n: int, steps: int) -> np.ndarray:
        return self.rng.standard_normal((n, steps, self.z_dim))


class Generator(Module):
    """[C*_t, z_t] -> tanh projection -> LSTM -> per-step 2-D displacement."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        h = cfg.hidden_size
        self.cfg = cfg
        self.proj = Dense(2 * h + cfg.z_dim, h, rng)
        self.lstm = LSTM(h, h, rng)
        self.head = Dense(h, 2, zero=True)

    def run(self, context: Tensor, z: np.ndarray) -> tuple[Tensor, Tensor]:
        """Hidden states for all T_pred steps and displacements for the future steps.

        The context after T_obs is held at its last observed value.
        """
        n, t, c = context.shape
        f = self.cfg.t_future
        if z.shape != (n, t + f, self.cfg.z_dim):
            raise ContractViolation(f"noise shape {z.shape} != {(n, t + f, self.cfg.z_dim)}")
        held = ad.broadcast_to(context[:, t - 1 : t, :], (n, f, c))
        steps = ad.concat([context, held], axis=1)
        x = ad.tanh(self.proj(ad.concat([steps, Tensor(z)], axis=-1)))
        hidden = self.lstm(x)
        disp = self.head(hidden[:, t:, :])
        return hidden, disp


class Discriminator(Module):
    """Scores (context, displacement sequence) with an LSTM and a sigmoid head.

    With ``disc_sees_observed`` the LSTM first reads the observed displacements
    and then the future ones, so a break between the two is visible to it.
    Displacements are multiplied by ``disc_displacement_scale`` on input.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        h = cfg.hidden_size
        self.cfg = cfg
        self.proj = Dense(2 * h + 2, h, rng)
        self.lstm = LSTM(h, h, rng)
        self.head = Dense(h, 1, zero=True)

    def logits(self, context_last, disp, observed_disp=None) -> Tensor:
        context_last, disp = ad.as_tensor(context_last), ad.as_tensor(disp)
        n = disp.shape[0]
        if context_last.shape[0] != n:
            raise ContractViolation("context and trajectory batch sizes differ")
        if self.cfg.disc_sees_observed and observed_disp is not None:
            disp = ad.concat([ad.as_tensor(observed_disp), disp], axis=1)
        steps, c = disp.shape[1], context_last.shape[-1]
        ctx = ad.broadcast_to(ad.reshape(context_last, (n, 1, c)), (n, steps, c))
        x = ad.tanh(self.proj(ad.concat([ctx, disp * self.cfg.disc_displacement_scale], axis=-1)))
        hidden = self.lstm(x)
        return ad.reshape(self.head(hidden[:, steps - 1, :]), (n,))


@dataclass
class GanModel:
    cfg: ModelConfig
    encoder: NeighbourhoodEncoder
    generator: Generator
    discriminator: Discriminator | None

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, with_discriminator: bool = True) -> "GanModel":
        rng = np.random.default_rng(seed)
        enc = NeighbourhoodEncoder(cfg, rng)
        gen = Generator(cfg, rng)
        disc = Discriminator(cfg, rng) if with_discriminator else None
        return cls(cfg, enc, gen, disc)

    def generator_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update({f"generator.{k}": v for k, v in self.generator.parameters().items()})
        return out

    def discriminator_params(self) -> dict[str, Tensor]:
        if self.discriminator is None:
            return {}
        return {f"discriminator.{k}": v for k, v in self.discriminator.parameters().items()}

    def parameters(self) -> dict[str, Tensor]:
        return {**self.generator_params(), **self.discriminator_params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            raise ContractViolation(f"state keys mismatch: {sorted(set(params) ^ set(state))}")
        for k, t in params.items():
            t.value = np.array(state[k], dtype=float)

    def copy(self) -> "GanModel":
        return copy.deepcopy(self)


@dataclass
class PredictedTrajectory:
    ped_id: str
    positions: np.ndarray


def real_displacements(batch: PreparedBatch) -> np.ndarray:
    prev = np.concatenate([batch.last_pos[:, None, :], batch.future[:, :-1, :]], axis=1)
    return batch.future - prev


def observed_displacements(batch: PreparedBatch) -> np.ndarray:
    return np.diff(batch.observed, axis=1)


def forward_generator(model: GanModel, batch: PreparedBatch, z: np.ndarray):
    """Returns (context, generator hiddens, displacements, absolute positions)."""
    context = model.encoder.context(batch)
    hidden, disp = model.generator.run(context, z)
    positions = ad.cumsum(disp, axis=1) + batch.last_pos[:, None, :]
    return context, hidden, disp, positions


def _check_finite(*tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.value)):
            raise TrainingDivergence("non-finite value in forward pass")


def generate(windows, model: GanModel, noise: NoiseSource):
    """Forecast every window; returns predictions and generator hidden states (B, T_pred, H)."""
    single = isinstance(windows, Window)
    if single:
        windows = [windows]
    batch = windows if isinstance(windows, PreparedBatch) else prepare_windows(list(windows), model.cfg)
    z = noise.sample(len(batch), model.cfg.t_pred)
    _, hidden, _, positions = forward_generator(model, batch, z)
    _check_finite(hidden, positions)
    preds = [PredictedTrajectory(p, positions.value[i]) for i, p in enumerate(batch.ped_ids)]
    if single:
        return preds[0], hidden.value[0]
    return preds, hidden.value


def discriminate(context, trajectory, discriminator: Discriminator, last_pos=None, observed=None) -> np.ndarray:
    """Probability that each future trajectory is real.

    ``context`` is the (B, T_obs, 2H) or (B, 2H) context and ``trajectory`` holds
    absolute future positions (B, F, 2). ``observed`` (B, T_obs, 2) is required
    when the discriminator reads the observed prefix; its last row is then the
    default ``last_pos``. Without either, the first future step counts as zero
    displacement.
    """
    ctx = np.asarray(context.value if isinstance(context, Tensor) else context, dtype=float)
    traj = np.asarray(trajectory, dtype=float)
    obs = None if observed is None else np.asarray(observed, dtype=float)
    if traj.ndim == 2:
        traj, ctx = traj[None], ctx[None]
        obs = None if obs is None else obs[None]
    if ctx.ndim == 3:
        ctx = ctx[:, -1, :]
    if traj.shape[1] != discriminator.cfg.t_future:
        raise ContractViolation(f"trajectory length {traj.shape[1]} != {discriminator.cfg.t_future}")
    if discriminator.cfg.disc_sees_observed and obs is None:
        raise ContractViolation("this discriminator also scores the observed track; pass observed=")
    if last_pos is not None:
        start = np.asarray(last_pos, dtype=float).reshape(-1, 1, 2)
    elif obs is not None:
        start = obs[:, -1:, :]
    else:
        start = traj[:, :1, :]
    disp = np.diff(np.concatenate([start, traj], axis=1), axis=1)
    obs_disp = None if obs is None else np.diff(obs, axis=1)
    return ad.sigmoid_np(discriminator.logits(ctx, disp, obs_disp).value)


# ---------------------------------------------------------------- losses


def discriminator_loss(real_logits, fake_logits) -> Tensor:
    """Binary cross-entropy averaged over all real (label 1) and fake (label 0) samples."""
    real_logits, fake_logits = ad.as_tensor(real_logits), ad.as_tensor(fake_logits)
    n = real_logits.value.size + fake_logits.value.size
    total = ad.sum_(ad.softplus(-real_logits)) + ad.sum_(ad.softplus(fake_logits))
    return total * (1.0 / n)


def bce_from_probabilities(p_real, p_fake) -> float:
    p_real, p_fake = np.asarray(p_real, float), np.asarray(p_fake, float)
    total = -np.sum(np.log(p_real)) - np.sum(np.log1p(-p_fake))
    return float(total / (p_real.size + p_fake.size))


def generator_adversarial_loss(fake_logits) -> Tensor:
    """Non-saturating form, -E[log D(C*, G(C*, z))]."""
    return ad.mean(ad.softplus(-ad.as_tensor(fake_logits)))


def sparsity_term(hidden) -> Tensor:
    """Mean absolute generator hidden activation over batch, steps and units."""
    return ad.mean(ad.absolute(ad.as_tensor(hidden)))


def mse_loss(positions, target: np.ndarray) -> Tensor:
    """Mean over samples and steps of the squared Euclidean position error."""
    diff = ad.as_tensor(positions) - target
    n = target.shape[0] * target.shape[1]
    return ad.sum_(ad.square(diff)) * (1.0 / n)


@dataclass
class Losses:
    loss_d: Tensor | None
    loss_g: Tensor
    sparsity: Tensor


def gan_losses(batch: PreparedBatch, model: GanModel, lam: float, mode: str, z: np.ndarray) -> Losses:
    """All three objective terms for one batch, recorded on the active tape if any."""
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    if mode == "no-l1":
        lam = 0.0
    context, hidden, disp, positions = forward_generator(model, batch, z)
    sparsity = sparsity_term(hidden)
    if mode == "no-gan":
        return Losses(None, mse_loss(positions, batch.future) + lam * sparsity, sparsity)
    # D sees the context as a constant so G cannot lower its loss by garbling the condition
    ctx_last = context.value[:, -1, :]
    d_ctx = Tensor(np.zeros_like(ctx_last) if mode == "unconditional-gan" else ctx_last)
    obs = observed_displacements(batch)
    real = model.discriminator.logits(d_ctx, Tensor(real_displacements(batch)), obs)
    fake = model.discriminator.logits(d_ctx, disp, obs)
    # D's loss treats the generated sample as data: no gradient reaches G from it
    fake_for_d = model.discriminator.logits(d_ctx, Tensor(disp.value), obs)
    loss_d = discriminator_loss(real, fake_for_d)
    loss_g = generator_adversarial_loss(fake) + lam * sparsity
    return Losses(loss_d, loss_g, sparsity)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    loss_d: float
    loss_g: float
    sparsity: float
    val_ade: float


@dataclass
class TrainResult:
    model: GanModel
    history: list[EpochRecord]
    best_epoch: int
    last_model: GanModel | None = None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Holds a model plus optimizer and RNG state so that training can resume."""

    def __init__(self, model_cfg: ModelConfig, config: TrainConfig, model: GanModel | None = None):
        self.model_cfg = model_cfg
        self.config = config
        self.model = model or GanModel.create(model_cfg, seed=config.seed, with_discriminator=config.mode != "no-gan")
        self.opt_g = Adam(self.model.generator_params(), config.learning_rate, config.clip_norm, config.adam_beta1)
        self.opt_d = (
            Adam(self.model.discriminator_params(), config.learning_rate, config.clip_norm, config.adam_beta1)
            if self.model.discriminator
            else None
        )
        self.shuffle_rng = np.random.default_rng([config.seed, 1])
        self.noise_rng = np.random.default_rng([config.seed, 2])
        self.history: list[EpochRecord] = []
        self.best_state = self.model.state_dict()
        self.best_val = math.inf
        self.best_epoch = 0

    @property
    def epoch(self) -> int:
        return len(self.history)

    def _batches(self, n: int):
        order = self.shuffle_rng.permutation(n)
        bs = self.config.batch_size
        return [order[i : i + bs] for i in range(0, n, bs)]

    def _z(self, n: int) -> np.ndarray:
        return self.noise_rng.standard_normal((n, self.model_cfg.t_pred, self.model_cfg.z_dim))

    def discriminator_epoch(self, data: PreparedBatch) -> float:
        losses = []
        for idx in self._batches(len(data)):
            batch = data.subset(idx)
            z = self._z(len(batch))
            context, _, disp, _ = forward_generator(self.model, batch, z)
            ctx_last = context.value[:, -1, :]
            if self.config.mode == "unconditional-gan":
                ctx_last = np.zeros_like(ctx_last)
            params = self.model.discriminator_params()
            with Tape() as tape:
                obs = observed_displacements(batch)
                real = self.model.discriminator.logits(ctx_last, real_displacements(batch), obs)
                fake = self.model.discriminator.logits(ctx_last, disp.value, obs)
                loss = discriminator_loss(real, fake)
            _check_finite(loss)
            self.opt_d.step(tape.gradient(loss, list(params.values())))
            losses.append(float(loss.value))
        return float(np.mean(losses))

    def generator_epoch(self, data: PreparedBatch) -> tuple[float, float]:
        losses, sparsities = [], []
        lam = self.config.effective_lambda
        params = self.model.generator_params()
        for idx in self._batches(len(data)):
            batch = data.subset(idx)
            z = self._z(len(batch))
            with Tape() as tape:
                out = gan_losses(batch, self.model, lam, self.config.mode, z)
            _check_finite(out.loss_g)
            self.opt_g.step(tape.gradient(out.loss_g, list(params.values())))
            losses.append(float(out.loss_g.value))
            sparsities.append(float(out.sparsity.value))
        return float(np.mean(losses)), float(np.mean(sparsities))

    def validation_ade(self, val: PreparedBatch | None) -> float:
        if val is None or len(val) == 0:
            return math.nan
        noise = NoiseSource(seed=self.config.seed + 7919, z_dim=self.model_cfg.z_dim)
        preds, _ = generate(val, self.model, noise)
        pos = np.stack([p.positions for p in preds])
        return ade_fde_batch(pos, val.future)[0]

    def fit(self, train: list[Window] | PreparedBatch, val=None, epochs: int | None = None) -> TrainResult:
        if isinstance(train, list):
            if not train:
                raise ContractViolation("training set is empty")
            train = prepare_windows(train, self.model_cfg)
        if isinstance(val, list):
            val = prepare_windows(val, self.model_cfg) if val else None
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            epoch = self.epoch + 1
            try:
                loss_d = self.discriminator_epoch(train) if self.model.discriminator else math.nan
                loss_g, sparsity = self.generator_epoch(train)
            except TrainingDivergence as exc:
                raise TrainingDivergence(str(exc), epoch=epoch) from exc
            val_ade = self.validation_ade(val)
            self.history.append(EpochRecord(epoch, loss_d, loss_g, sparsity, val_ade))
            if val is None or val_ade < self.best_val:
                self.best_val = val_ade if val is not None else self.best_val
                self.best_state = self.model.state_dict()
                self.best_epoch = epoch
            log.debug("epoch %d loss_D=%.4f loss_G=%.4f L1=%.4f val_ADE=%.4f", epoch, loss_d, loss_g, sparsity, val_ade)
        return self.result()

    def result(self) -> TrainResult:
        best = self.model.copy()
        best.load_state_dict(self.best_state)
        return TrainResult(best, list(self.history), self.best_epoch, last_model=self.model)

    # -------------------------------------------------------------- persistence

    def save(self, path) -> None:
        arrays = {f"last/{k}": v for k, v in self.model.state_dict().items()}
        arrays.update({f"best/{k}": v for k, v in self.best_state.items()})
        arrays.update(self.opt_g.state_arrays("adam_g"))
        if self.opt_d is not None:
            arrays.update(self.opt_d.state_arrays("adam_d"))
        meta = {
            "model_config": dataclasses.asdict(self.model_cfg),
            "train_config": dataclasses.asdict(self.config),
            "history": [dataclasses.asdict(r) for r in self.history],
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "adam_g_step": self.opt_g.state.step,
            "adam_d_step": self.opt_d.state.step if self.opt_d else 0,
            "shuffle_rng": _rng_state(self.shuffle_rng),
            "noise_rng": _rng_state(self.noise_rng),
        }
        save_checkpoint(path, arrays, _json_safe(meta))

    @classmethod
    def load(cls, path, config_overrides: dict | None = None) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        model_cfg = ModelConfig(**meta["model_config"])
        train_cfg = dict(meta["train_config"])
        train_cfg.update(config_overrides or {})
        config = TrainConfig(**train_cfg)
        model = GanModel.create(model_cfg, seed=config.seed, with_discriminator=any(k.startswith("last/discriminator.") for k in arrays))
        model.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("last/")})
        trainer = cls(model_cfg, config, model)
        trainer.best_state = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
        trainer.history = [EpochRecord(**r) for r in _json_restore(meta["history"])]
        trainer.best_epoch = meta["best_epoch"]
        trainer.best_val = _json_restore(meta["best_val"])
        trainer.opt_g.load_state_arrays(arrays, "adam_g", meta["adam_g_step"])
        if trainer.opt_d is not None:
            trainer.opt_d.load_state_arrays(arrays, "adam_d", meta["adam_d_step"])
        trainer.shuffle_rng = _rng_from_state(meta["shuffle_rng"])
        trainer.noise_rng = _rng_from_state(meta["noise_rng"])
        return trainer


def load_model(path, which: str = "best") -> GanModel:
    """Inference model from a checkpoint (``which`` is "best" or "last")."""
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    prefix = f"{which}/"
    state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    model = GanModel.create(cfg, with_discriminator=any(k.startswith("discriminator.") for k in state))
    model.load_state_dict(state)
    return model


def train(dataset: list[Window], config: TrainConfig, model_cfg: ModelConfig | None = None, val: list[Window] | None = None) -> TrainResult:
    if not dataset:
        raise ContractViolation("training set is empty")
    trainer = Trainer(model_cfg or ModelConfig(), config)
    return trainer.fit(dataset, val)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _json_restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj
