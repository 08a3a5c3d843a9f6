"""Small builders shared by the tests."""

import numpy as np

from crowdgan.data import Scene, Trajectory, Window


def straight_window(t_obs=5, t_pred=10, velocity=(1.0, 0.0), neighbours=(), ped_id="0"):
    """Pedestrian walking at constant velocity ending its observation at the origin."""
    v = np.asarray(velocity, dtype=float)
    k = np.arange(t_pred) - (t_obs - 1)
    track = k[:, None] * v[None, :]
    nb = np.array([np.asarray(n, dtype=float) for n in neighbours]).reshape(len(neighbours), t_obs, 2)
    return Window(
        ped_id=ped_id,
        start_frame=0,
        observed=track[:t_obs],
        future=track[t_obs:],
        neighbour_ids=tuple(str(i + 1) for i in range(len(neighbours))),
        neighbour_observed=nb,
        frames=np.arange(t_pred),
    )


def random_windows(rng, n, t_obs, t_pred, max_neighbours=4):
    out = []
    for i in range(n):
        v = rng.normal(0, 0.5, 2)
        start = rng.normal(0, 3, 2)
        track = start + np.cumsum(np.tile(v, (t_pred, 1)) + rng.normal(0, 0.05, (t_pred, 2)), axis=0)
        m = int(rng.integers(0, max_neighbours + 1))
        nb = track[None, :t_obs] + rng.normal(0, 2, (m, 1, 2)) + rng.normal(0, 0.05, (m, t_obs, 2))
        out.append(
            Window(
                ped_id=str(i),
                start_frame=0,
                observed=track[:t_obs],
                future=track[t_obs:],
                neighbour_ids=tuple(f"n{j}" for j in range(m)),
                neighbour_observed=nb,
                frames=np.arange(t_pred),
            )
        )
    return out


def line_scene(n_peds=3, frames=30, spacing=1.0):
    trajs = []
    for i in range(n_peds):
        f = np.arange(frames)
        pos = np.stack([0.4 * f, np.full(frames, spacing * i)], axis=1)
        trajs.append(Trajectory(str(i + 1), f, pos))
    return Scene(tuple(trajs))


def full_objective(model, batch, z, lam=0.2):
    """loss_G + loss_D as one differentiable function of every parameter.

    Unlike the training step, nothing is detached, so finite differences see
    the same function the tape differentiates end to end.
    """
    from crowdgan import autodiff as ad
    from crowdgan.gan import (
        discriminator_loss,
        forward_generator,
        generator_adversarial_loss,
        observed_displacements,
        real_displacements,
        sparsity_term,
    )

    context, hidden, disp, _ = forward_generator(model, batch, z)
    last = context[:, -1, :]
    obs = observed_displacements(batch)
    real = model.discriminator.logits(last, real_displacements(batch), obs)
    fake = model.discriminator.logits(last, disp, obs)
    loss_g = generator_adversarial_loss(fake) + lam * sparsity_term(hidden)
    return ad.add(loss_g, discriminator_loss(real, fake))


def randomize(model, rng, scale=0.3):
    """Give zero-initialised heads non-zero weights so every path carries gradient."""
    for t in model.parameters().values():
        if not t.value.any():
            t.value = rng.normal(0, scale, t.shape)
    return model
