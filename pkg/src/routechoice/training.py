"""Adversarial (AIRL / GAIL) and behavioral-cloning trainers for the route policy."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .approximator import Adam, log_sigmoid, sigmoid
from .mdp import RolloutBatch, TrajectoryDataset, rollout_batch
from .models import (
    ModelBundle, discriminator_f, discriminator_f_backward, gail_reward, new_bundle, reward_inputs,
)
from .network import FeatureBank

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_D", "mean_R", "completion_rate", "mean_len", "ppo_loss", "value_loss")


class TrainingAborted(RuntimeError):
    """Training stopped early; ``bundle`` and ``rows`` hold the state at the abort."""

    def __init__(self, message: str, bundle=None, rows=None):
        super().__init__(message)
        self.bundle = bundle
        self.rows = rows or []


@dataclass
class TrainConfig:
    iterations: int = 1000
    samples_per_iter: int = 8192
    disc_updates: int = 1
    disc_minibatch: int = 64        # 0: one full-batch step per update
    ppo_epochs: int = 10
    minibatch: int = 64
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 3e-4
    seed: int = 0
    bc_epochs: int = 100
    embedding_dim: int = 0
    od_mode: str = "train"          # train | all
    abort_after: int = 50
    first_kernel: int = 2

    def __post_init__(self):
        for f in ("iterations", "samples_per_iter", "disc_updates", "ppo_epochs", "minibatch", "lr"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.disc_minibatch < 0:
            raise ValueError("disc_minibatch must be non-negative")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.od_mode not in ("train", "all"):
            raise ValueError("od_mode must be 'train' or 'all'")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in types:
                raise KeyError(f"unknown training option {k!r}")
            t = types[k]
            kw[k] = v if not isinstance(v, str) else (
                int(v) if t in ("int", int) else float(v) if t in ("float", float) else v)
        return cls(**kw)

    def as_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def iterations_for(n_trips: int) -> int:
    """1000 / 2000 / 3000 iterations for roughly 100 / 1000 / 10000 training trips."""
    if n_trips <= 100:
        return 1000
    if n_trips <= 1000:
        return 2000
    return 3000


# ---------------------------------------------------------------------------
# advantages and losses

def compute_gae(rewards, values, terminal: bool, gamma: float, lam: float, bootstrap: float = 0.0):
    """Advantages and returns of one trajectory.

    ``values[t]`` is V(s_t); the step after the last uses 0 when the destination
    was reached and ``bootstrap`` for a truncated rollout.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must align")
    nxt = np.append(values[1:], 0.0 if terminal else bootstrap)
    delta = rewards + gamma * nxt - values
    adv = np.zeros_like(delta)
    run = 0.0
    for t in range(len(delta) - 1, -1, -1):
        run = delta[t] + gamma * lam * run
        adv[t] = run
    return adv, adv + values


def gae_padded(R: np.ndarray, V: np.ndarray, V_boot: np.ndarray, lengths: np.ndarray, terminal: np.ndarray,
               gamma: float, lam: float):
    """Batched GAE over (n, T) padded arrays; entries past ``lengths`` are ignored."""
    n, T = R.shape
    live = np.arange(T)[None, :] < lengths[:, None]
    Vn = np.zeros((n, T))
    Vn[:, :-1] = V[:, 1:]
    last = lengths - 1
    rows = np.arange(n)
    Vn[rows, last] = np.where(terminal, 0.0, V_boot)
    delta = np.where(live, R + gamma * Vn - V, 0.0)
    adv = np.zeros((n, T))
    run = np.zeros(n)
    for t in range(T - 1, -1, -1):
        run = np.where(live[:, t], delta[:, t] + gamma * lam * run, 0.0)
        adv[:, t] = run
    return adv, np.where(live, adv + V, 0.0)


def ppo_objective(new_logp, old_logp, adv, clip: float):
    """Clipped surrogate (to maximize) and its gradient w.r.t. ``new_logp``."""
    with np.errstate(over="ignore"):
        ratio = np.exp(new_logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite probability ratio")
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    active = unclipped <= clipped
    grad = np.where(active, unclipped, 0.0) / len(adv)
    return float(obj.mean()), grad


def ppo_loss(ratio, adv, clip: float) -> float:
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)))


def normalize(adv: np.ndarray) -> np.ndarray:
    sd = adv.std()
    return (adv - adv.mean()) / (sd + 1e-8)


def airl_disc_loss(x_real: np.ndarray, x_gen: np.ndarray):
    """L_D and its gradient w.r.t. the logits x = f - log pi (GAIL: x = g)."""
    loss = -log_sigmoid(x_real).mean() - log_sigmoid(-x_gen).mean()
    return float(loss), (sigmoid(x_real) - 1.0) / len(x_real), sigmoid(x_gen) / len(x_gen)


# ---------------------------------------------------------------------------
# policy helpers

def policy_fn(bundle: ModelBundle, bank: FeatureBank) -> Callable:
    def fn(links, dests, agents):
        grids = bank.grids(links, dests)
        masks = bank.masks(links, dests)
        lp, _ = bundle.policy.log_probs(grids, masks, agents)
        return np.exp(lp)
    return fn


def policy_step_grad(bundle: ModelBundle, grids, masks, agents, actions, weights):
    """Gradient of -sum(weights * log pi(a|s)) wrt policy params; returns (logp_taken, grads)."""
    lp, cache = bundle.policy.log_probs(grids, masks, agents)
    rows = np.arange(len(actions))
    p = np.exp(lp)
    d = p * weights[:, None]
    d[rows, actions] -= weights
    return lp[rows, actions], bundle.policy.backward(d, cache)


def ppo_grads(bundle: ModelBundle, grids, masks, agents, actions, old_logp, adv, clip: float):
    """Clipped surrogate and the gradient of its negation (the loss) wrt policy params."""
    lp_all, cache = bundle.policy.log_probs(grids, masks, agents)
    rows = np.arange(len(actions))
    obj, dlogp = ppo_objective(lp_all[rows, actions], old_logp, adv, clip)
    dlogits = np.exp(lp_all) * dlogp[:, None]
    dlogits[rows, actions] -= dlogp
    return obj, bundle.policy.backward(dlogits, cache)


def discriminator_grads(bundle: ModelBundle, real_inp, gen_inp, lp_real=None, lp_gen=None):
    """L_D and its gradients for g and h (h is None for GAIL).

    AIRL logits are x = f - log pi, so the policy log-probabilities of both
    batches are required; GAIL uses x = g and ignores them.
    """
    f_r, c_r = discriminator_f(bundle, real_inp)
    f_g, c_g = discriminator_f(bundle, gen_inp)
    if bundle.kind == "airl":
        x_r, x_g = f_r - lp_real, f_g - lp_gen
    else:
        x_r, x_g = f_r, f_g
    L_D, df_r, df_g = airl_disc_loss(x_r, x_g)
    Gg, Gh = discriminator_f_backward(bundle, df_r, c_r, real_inp)
    discriminator_f_backward(bundle, df_g, c_g, gen_inp, grads=(Gg, Gh))
    return L_D, Gg, Gh


def value_grads(bundle: ModelBundle, feats, agents, targets):
    """Mean squared error of V against ``targets`` and its gradient."""
    v, cache = bundle.value.forward(feats, agents)
    err = v - targets
    return float(np.mean(err * err)), bundle.value.backward(2.0 * err / len(err), cache)


def value_step(bundle: ModelBundle, opt: Adam, feats, agents, targets) -> float:
    loss, G = value_grads(bundle, feats, agents, targets)
    opt.step(G)
    return loss


def value_update(bundle: ModelBundle, opt: Adam, feats, agents, targets, steps: int = 1) -> list[float]:
    return [value_step(bundle, opt, feats, agents, targets) for _ in range(steps)]


# ---------------------------------------------------------------------------
# adversarial training

@dataclass
class Generated:
    batch: RolloutBatch
    rows: np.ndarray        # trajectory index per step
    cols: np.ndarray        # step index per step
    links: np.ndarray
    actions: np.ndarray
    dests: np.ndarray
    agents: np.ndarray
    logp: np.ndarray


def generate(bundle: ModelBundle, bank: FeatureBank, od_pairs: np.ndarray, agents_pool: np.ndarray | None,
             n_samples: int, rng: np.random.Generator) -> Generated:
    """Roll out from random OD pairs until at least ``n_samples`` steps are collected."""
    pol = policy_fn(bundle, bank)
    parts, total, avg = [], 0, None
    while total < n_samples:
        # small probe first so a wandering policy does not overshoot the budget
        k = 64 if avg is None else max(32, int(np.ceil((n_samples - total) / avg * 1.05)))
        pick = rng.integers(len(od_pairs), size=k)
        ods = od_pairs[pick]
        ag = agents_pool[pick] if agents_pool is not None else None
        b = rollout_batch(pol, ods[:, 0], ods[:, 1], ag, rng=rng, bank=bank)
        parts.append(b)
        total += int(b.lengths.sum())
        avg = max(1.0, float(b.lengths.mean()))
    batch = _concat_batches(parts)
    rows, cols = batch.step_arrays()
    return Generated(batch, rows, cols, batch.links[rows, cols], batch.actions[rows, cols],
                     batch.dests[rows], batch.agents[rows], batch.logp[rows, cols])


def _concat_batches(parts: list[RolloutBatch]) -> RolloutBatch:
    T = max(p.actions.shape[1] for p in parts)

    def pad(a, width, fill):
        out = np.full((a.shape[0], width), fill, dtype=a.dtype)
        out[:, :a.shape[1]] = a
        return out

    return RolloutBatch(
        links=np.concatenate([pad(p.links, T + 1, -1) for p in parts]),
        actions=np.concatenate([pad(p.actions, T, -1) for p in parts]),
        logp=np.concatenate([pad(p.logp, T, 0.0) for p in parts]),
        lengths=np.concatenate([p.lengths for p in parts]),
        complete=np.concatenate([p.complete for p in parts]),
        dests=np.concatenate([p.dests for p in parts]),
        agents=np.concatenate([p.agents for p in parts]),
    )


def _od_pool(dataset: TrajectoryDataset, bank: FeatureBank, mode: str):
    if mode == "all":
        from .mdp import uniform_od_sampler
        pairs = uniform_od_sampler(bank, min_hops=1).pairs
        return pairs, None
    pairs = np.array([t.od for t in dataset], dtype=np.int64)
    agents = np.array([-1 if t.context.agent is None else t.context.agent for t in dataset], dtype=np.int64)
    return pairs, agents


def train_adversarial(config: TrainConfig, dataset: TrajectoryDataset,
                      bank: FeatureBank, kind: str = "airl", log_fn: Callable[[dict], None] | None = None,
                      bundle: ModelBundle | None = None):
    """Shared AIRL / GAIL loop; returns (bundle, per-iteration log rows)."""
    rng = np.random.default_rng(config.seed)
    if bundle is None:
        bundle = new_bundle(kind, bank.config, rng, embedding_dim=config.embedding_dim,
                            n_agents=len(dataset.agents), gamma=config.gamma,
                            kernels=(config.first_kernel, 2))
    lr = config.lr
    opt_pi = Adam(bundle.policy.params, lr)
    opt_v = Adam(bundle.value.params, lr)
    opt_g = Adam(bundle.g.params, lr)
    opt_h = Adam(bundle.h.params, lr) if bundle.h is not None else None

    s_real, a_real, d_real, g_real = dataset.triplets()
    n_real = len(s_real)
    if n_real == 0:
        raise ValueError("training dataset has no transitions")
    od_pairs, od_agents = _od_pool(dataset, bank, config.od_mode)
    bank.ensure(np.unique(od_pairs[:, 1]))

    rows_out = []
    zero_streak = 0
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        gen = generate(bundle, bank, od_pairs, od_agents, config.samples_per_iter, rng)
        n_gen = len(gen.links)
        pick = rng.choice(n_real, size=n_gen, replace=n_real < n_gen)
        real_inp = reward_inputs(bank, s_real[pick], a_real[pick], d_real[pick], g_real[pick])
        gen_inp = reward_inputs(bank, gen.links, gen.actions, gen.dests, gen.agents)
        gen_masks = bank.masks(gen.links, gen.dests)

        # rewards from the discriminator as it stood when the samples were drawn
        f_gen, _ = discriminator_f(bundle, gen_inp)
        if kind == "airl":
            R = f_gen - gen.logp
        else:
            R = gail_reward(f_gen)

        # discriminator update(s)
        L_D = 0.0
        real_masks = bank.masks(s_real[pick], d_real[pick])
        lp_real = None
        if kind == "airl":
            lp_real = bundle.policy.log_probs(real_inp.grids, real_masks, real_inp.agents)[0]
            lp_real = lp_real[np.arange(n_gen), real_inp.actions]
        step = config.disc_minibatch or n_gen
        for _ in range(config.disc_updates):
            # one update is one pass over the balanced real / generated batch
            perm = rng.permutation(n_gen)
            losses = []
            for start in range(0, n_gen, step):
                mb = perm[start:start + step]
                L, Gg, Gh = discriminator_grads(bundle, real_inp.take(mb), gen_inp.take(mb),
                                                None if lp_real is None else lp_real[mb], gen.logp[mb])
                opt_g.step(Gg)
                if opt_h is not None:
                    opt_h.step(Gh)
                losses.append(L)
            L_D = float(np.mean(losses))

        # advantages
        b = gen.batch
        V_flat = bundle.value.forward(gen_inp.feats, gen.agents)[0]
        n_traj, T = b.actions.shape
        Vp = np.zeros((n_traj, T))
        Rp = np.zeros((n_traj, T))
        Vp[gen.rows, gen.cols] = V_flat
        Rp[gen.rows, gen.cols] = R
        last = b.links[np.arange(n_traj), b.lengths]
        trunc = ~b.complete
        V_boot = np.zeros(n_traj)
        if trunc.any():
            V_boot[trunc] = bundle.value.forward(bank.features(last[trunc], b.dests[trunc]), b.agents[trunc])[0]
        adv_p, ret_p = gae_padded(Rp, Vp, V_boot, b.lengths, b.complete, config.gamma, config.gae_lambda)
        adv = normalize(adv_p[gen.rows, gen.cols])
        ret = ret_p[gen.rows, gen.cols]

        # PPO and value epochs
        ppo_vals, v_vals = [], []
        for _ in range(config.ppo_epochs):
            perm = rng.permutation(n_gen)
            for start in range(0, n_gen, config.minibatch):
                mb = perm[start:start + config.minibatch]
                obj, G = ppo_grads(bundle, gen_inp.grids[mb], gen_masks[mb], gen.agents[mb], gen.actions[mb],
                                   gen.logp[mb], adv[mb], config.clip)
                opt_pi.step(G)
                ppo_vals.append(obj)
                v_vals.append(value_step(bundle, opt_v, gen_inp.feats[mb], gen.agents[mb], ret[mb]))

        completion = float(b.complete.mean())
        row = {
            "iter": it, "L_D": L_D, "mean_R": float(R.mean()), "completion_rate": completion,
            "mean_len": float(b.lengths.mean()), "ppo_loss": float(np.mean(ppo_vals)),
            "value_loss": float(np.mean(v_vals)),
        }
        rows_out.append(row)
        if log_fn is not None:
            log_fn(row)
        log.debug("iter %d %.2fs %s", it, time.perf_counter() - t0, row)
        zero_streak = zero_streak + 1 if completion == 0.0 else 0
        if zero_streak >= config.abort_after:
            raise TrainingAborted(
                f"no generated trip reached its destination for {zero_streak} iterations "
                f"(mean length {row['mean_len']:.1f}); check destination features", bundle, rows_out)
    bundle.extra = {"iterations": config.iterations, "seed": config.seed}
    return bundle, rows_out


def train_airl(config: TrainConfig, dataset: TrajectoryDataset, bank: FeatureBank, log_fn=None):
    return train_adversarial(config, dataset, bank, "airl", log_fn)


def train_gail(config: TrainConfig, dataset: TrajectoryDataset, bank: FeatureBank, log_fn=None):
    return train_adversarial(config, dataset, bank, "gail", log_fn)


def bc_loss(bundle: ModelBundle, grids, masks, agents, actions) -> float:
    lp = bundle.policy.log_probs(grids, masks, agents)[0]
    return float(-lp[np.arange(len(actions)), actions].mean())


def train_bc(config: TrainConfig, dataset: TrajectoryDataset, bank: FeatureBank, log_fn=None):
    """Minibatch cross-entropy on (s, a, c) triplets; returns (bundle, per-epoch log rows)."""
    rng = np.random.default_rng(config.seed)
    bundle = new_bundle("bc", bank.config, rng, embedding_dim=config.embedding_dim,
                        n_agents=len(dataset.agents), gamma=config.gamma, kernels=(config.first_kernel, 2))
    opt = Adam(bundle.policy.params, config.lr)
    s, a, d, g = dataset.triplets()
    grids, masks = bank.grids(s, d), bank.masks(s, d)
    rows = []
    for ep in range(1, config.bc_epochs + 1):
        perm = rng.permutation(len(s))
        losses = []
        for start in range(0, len(s), config.minibatch):
            mb = perm[start:start + config.minibatch]
            w = np.full(len(mb), 1.0 / len(mb))
            lp, G = policy_step_grad(bundle, grids[mb], masks[mb], g[mb], a[mb], w)
            opt.step(G)
            losses.append(float(-lp.mean()))
        row = {"epoch": ep, "loss": float(np.mean(losses))}
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
    bundle.extra = {"epochs": config.bc_epochs, "seed": config.seed}
    return bundle, rows
