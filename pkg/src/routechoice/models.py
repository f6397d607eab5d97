"""Policy, reward (g, h), value and GAIL discriminator networks over feature grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximator import (
    ParamSet, Sequential, ShapeError, conv_stack, dense_stack, init_uniform, load_sections,
    log_sigmoid, masked_log_softmax, save_sections,
)
from .network import N_DIR, FeatureBank, FeatureConfig


@dataclass(frozen=True)
class ModelConfig:
    base_dim: int                   # width of [F_s; F_c]
    embedding_dim: int = 0
    n_agents: int = 0
    kernels: tuple = (2, 2)
    channels: tuple = (20, 30)
    hidden: int = 64
    gamma: float = 0.99

    @property
    def grid_channels(self) -> int:
        return self.base_dim + self.embedding_dim + 1

    @property
    def flat_dim(self) -> int:
        return self.base_dim + self.embedding_dim


class _Net:
    """Shared embedding handling for grid and flat networks."""

    def __init__(self, config: ModelConfig, layers, rng: np.random.Generator | None, zero_head: bool = False):
        self.config = config
        self.seq = Sequential(layers)
        shapes = self.seq.param_shapes()
        if config.embedding_dim:
            shapes = shapes + [("embedding", (max(config.n_agents, 1), config.embedding_dim))]
        self.params = ParamSet(shapes)
        if rng is not None:
            init_uniform(self.params, rng, self.seq.fan_in())
            if config.embedding_dim:
                self.params["embedding"] = rng.normal(0.0, 0.1, size=self.params["embedding"].shape)
        if zero_head:
            last = [n for n in self.params.names() if n.endswith(".w")][-1]
            self.params[last] = 0.0
        self._grads = self.params.zeros_like()

    def grad_buffer(self, grads: ParamSet | None) -> ParamSet:
        """``grads`` to accumulate into, or the network's own buffer after zeroing."""
        if grads is not None:
            return grads
        self._grads.flat[:] = 0.0
        return self._grads

    def _embed(self, agents):
        emb = self.params["embedding"][np.maximum(agents, 0)]
        return emb * (np.asarray(agents) >= 0)[:, None]

    def _scatter_embedding(self, G: ParamSet, agents, demb):
        ok = np.asarray(agents) >= 0
        np.add.at(G["embedding"], np.asarray(agents)[ok], demb[ok])


class GridNet(_Net):
    """Conv stack over the 3x3 grid, optional one-hot action concat, 2-layer dense head."""

    def __init__(self, config: ModelConfig, n_out: int, with_action: bool = False,
                 rng: np.random.Generator | None = None, zero_head: bool = False):
        conv, latent = conv_stack("", config.grid_channels, config.kernels, config.channels)
        self.n_conv = len(conv)
        self.with_action = with_action
        head_in = latent + (N_DIR if with_action else 0)
        head = dense_stack("", [head_in, config.hidden, n_out])
        self.conv = Sequential(conv)
        self.head = Sequential(head)
        super().__init__(config, conv + head, rng, zero_head)

    def assemble(self, grids: np.ndarray, agents=None) -> np.ndarray:
        c = self.config
        if grids.shape[-1] != c.base_dim + 1:
            raise ShapeError(f"grid has {grids.shape[-1]} channels, model expects {c.base_dim + 1}")
        if not c.embedding_dim:
            return grids
        valid = grids[..., -1:]
        emb = self._embed(agents)[:, None, None, :] * valid
        return np.concatenate([grids[..., :-1], emb, valid], axis=-1)

    def forward(self, grids: np.ndarray, agents=None, actions=None):
        x = self.assemble(grids, agents)
        z, c1 = self.conv.forward(self.params, x)
        if self.with_action:
            # integer directions, or (B, 8) rows such as a mean one-hot baseline
            a = np.asarray(actions)
            onehot = a.astype(float) if a.ndim == 2 else np.eye(N_DIR)[a]
            z = np.concatenate([z, onehot], axis=1)
        out, c2 = self.head.forward(self.params, z)
        return out, (c1, c2, grids, agents)

    def backward(self, dout: np.ndarray, cache, grads: ParamSet | None = None) -> ParamSet:
        c1, c2, grids, agents = cache
        G = self.grad_buffer(grads)
        dz = self.head.backward(self.params, G, dout, c2, need_dx=True)
        if self.with_action:
            dz = dz[:, :-N_DIR]
        E = self.config.embedding_dim
        dx = self.conv.backward(self.params, G, dz, c1, need_dx=bool(E))
        if E:
            b = self.config.base_dim
            demb = (dx[..., b:b + E] * grids[..., -1:]).sum(axis=(1, 2))
            self._scatter_embedding(G, agents, demb)
        return G


class FlatNet(_Net):
    """2-layer dense network on [F_s; F_c] (plus embedding)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, zero_head: bool = False):
        super().__init__(config, dense_stack("", [config.flat_dim, config.hidden, 1]), rng, zero_head)

    def assemble(self, feats: np.ndarray, agents=None) -> np.ndarray:
        if feats.shape[-1] != self.config.base_dim:
            raise ShapeError(f"features have width {feats.shape[-1]}, model expects {self.config.base_dim}")
        if not self.config.embedding_dim:
            return feats
        return np.concatenate([feats, self._embed(agents)], axis=1)

    def forward(self, feats: np.ndarray, agents=None):
        out, c = self.seq.forward(self.params, self.assemble(feats, agents))
        return out[:, 0], (c, agents)

    def backward(self, dout: np.ndarray, cache, grads: ParamSet | None = None) -> ParamSet:
        c, agents = cache
        G = self.grad_buffer(grads)
        E = self.config.embedding_dim
        dx = self.seq.backward(self.params, G, dout[:, None], c, need_dx=bool(E))
        if E:
            self._scatter_embedding(G, agents, dx[:, self.config.base_dim:])
        return G


class PolicyNet(GridNet):
    def __init__(self, config: ModelConfig, rng=None, zero_head: bool = False):
        super().__init__(config, N_DIR, with_action=False, rng=rng, zero_head=zero_head)

    def log_probs(self, grids, masks, agents=None):
        logits, cache = self.forward(grids, agents)
        return masked_log_softmax(logits, masks), cache

    def probs(self, grids, masks, agents=None):
        return np.exp(self.log_probs(grids, masks, agents)[0])


@dataclass
class ModelBundle:
    kind: str                       # airl | gail | bc
    config: ModelConfig
    features: FeatureConfig
    policy: PolicyNet
    value: FlatNet | None = None
    g: GridNet | None = None
    h: FlatNet | None = None
    extra: dict = field(default_factory=dict)

    def sections(self) -> dict[str, ParamSet]:
        out = {"policy": self.policy.params}
        for name in ("g", "h", "value"):
            net = getattr(self, name)
            if net is not None:
                out[name] = net.params
        return out

    def manifest(self) -> dict:
        c = self.config
        return {
            "kind": self.kind, "base_dim": c.base_dim, "embedding_dim": c.embedding_dim,
            "n_agents": c.n_agents, "kernels": ",".join(map(str, c.kernels)),
            "channels": ",".join(map(str, c.channels)), "hidden": c.hidden, "gamma": repr(c.gamma),
            "length_scale": repr(self.features.length_scale), "use_context": int(self.features.use_context),
            **{k: v for k, v in self.extra.items()},
        }


def new_bundle(kind: str, features: FeatureConfig, rng: np.random.Generator, embedding_dim: int = 0,
               n_agents: int = 0, **config_kw) -> ModelBundle:
    if kind not in ("airl", "gail", "bc"):
        raise ValueError(f"unknown model kind {kind!r}")
    cfg = ModelConfig(base_dim=features.base_dim, embedding_dim=embedding_dim, n_agents=n_agents, **config_kw)
    policy = PolicyNet(cfg, rng)
    if kind == "bc":
        return ModelBundle(kind, cfg, features, policy)
    value = FlatNet(cfg, rng)
    g = GridNet(cfg, 1, with_action=True, rng=rng)
    h = FlatNet(cfg, rng) if kind == "airl" else None
    return ModelBundle(kind, cfg, features, policy, value, g, h)


def save_bundle(bundle: ModelBundle, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.params`` (sectioned records) and ``<prefix>.manifest``."""
    prefix = Path(prefix)
    params_path = prefix.with_name(prefix.name + ".params")
    manifest_path = prefix.with_name(prefix.name + ".manifest")
    save_sections(params_path, bundle.sections())
    with open(manifest_path, "w") as fh:
        for k, v in bundle.manifest().items():
            fh.write(f"{k}={v}\n")
    return params_path, manifest_path


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out[k.strip()] = v.strip()
    return out


def load_bundle(prefix) -> ModelBundle:
    prefix = Path(prefix)
    man = read_manifest(prefix.with_name(prefix.name + ".manifest"))
    sections = load_sections(prefix.with_name(prefix.name + ".params"))
    features = FeatureConfig(length_scale=float(man["length_scale"]), use_context=bool(int(man["use_context"])))
    cfg = ModelConfig(
        base_dim=int(man["base_dim"]), embedding_dim=int(man["embedding_dim"]), n_agents=int(man["n_agents"]),
        kernels=tuple(int(k) for k in man["kernels"].split(",")),
        channels=tuple(int(k) for k in man["channels"].split(",")),
        hidden=int(man["hidden"]), gamma=float(man["gamma"]),
    )
    if cfg.base_dim != features.base_dim:
        raise ShapeError(f"manifest base_dim={cfg.base_dim} disagrees with use_context/length features "
                         f"({features.base_dim})")
    kind = man["kind"]
    bundle = new_bundle(kind, features, None, cfg.embedding_dim, cfg.n_agents, kernels=cfg.kernels,
                        channels=cfg.channels, hidden=cfg.hidden, gamma=cfg.gamma)
    for name, params in sections.items():
        net = getattr(bundle, name)
        if net is None or net.params.shapes != params.shapes:
            raise ShapeError(f"checkpoint section {name!r} does not match the manifest architecture")
        net.params.flat[:] = params.flat
    bundle.extra = {k: v for k, v in man.items() if k not in bundle.manifest() or k in bundle.extra}
    return bundle


# ---------------------------------------------------------------------------
# model functions

def policy_forward(bundle: ModelBundle, grids: np.ndarray, masks: np.ndarray, agents=None) -> np.ndarray:
    """Action distribution over the 8 directions; exactly zero outside ``masks``."""
    if not np.asarray(masks).any(axis=-1).all():
        raise ValueError("empty action mask")
    return bundle.policy.probs(grids, masks, agents)


def value_forward(bundle: ModelBundle, feats: np.ndarray, agents=None) -> np.ndarray:
    return bundle.value.forward(feats, agents)[0]


def shaped_f(g: np.ndarray, h_s: np.ndarray, h_next: np.ndarray, gamma: float,
             terminal: np.ndarray | None = None) -> np.ndarray:
    """f = g + gamma * h(s') - h(s); the potential of the absorbing destination is 0."""
    if terminal is not None:
        h_next = np.where(terminal, 0.0, h_next)
    return g + gamma * h_next - h_s


def discriminator_prob_and_reward(f, pi_prob):
    """D = exp(f) / (exp(f) + pi) and R = log D - log(1 - D), evaluated in log space."""
    pi_prob = np.asarray(pi_prob, dtype=float)
    if np.any(pi_prob <= 0):
        raise ValueError("policy probability must be positive for every discriminator sample")
    x = np.asarray(f, dtype=float) - np.log(pi_prob)
    log_d, log_1md = log_sigmoid(x), log_sigmoid(-x)
    return np.exp(log_d), log_d - log_1md


def gail_reward(g) -> np.ndarray:
    """-log(1 - sigmoid(g)), i.e. softplus(g)."""
    return -log_sigmoid(-np.asarray(g, dtype=float))


@dataclass
class RewardInputs:
    """Everything the AIRL discriminator needs for a batch of (s, a, c)."""
    grids: np.ndarray
    actions: np.ndarray
    feats: np.ndarray
    next_feats: np.ndarray
    terminal: np.ndarray
    agents: np.ndarray

    def take(self, idx) -> "RewardInputs":
        return RewardInputs(*(getattr(self, f)[idx] for f in
                              ("grids", "actions", "feats", "next_feats", "terminal", "agents")))


def reward_inputs(bank: FeatureBank, links, actions, dests, agents=None) -> RewardInputs:
    links = np.asarray(links, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    dests = np.asarray(dests, dtype=np.int64)
    agents = np.full(len(links), -1) if agents is None else np.asarray(agents)
    nxt = bank.actions.succ[links, actions]
    if np.any(nxt < 0):
        raise ValueError("invalid action in discriminator batch")
    return RewardInputs(bank.grids(links, dests), actions, bank.features(links, dests),
                        bank.features(nxt, dests), nxt == dests, agents)


def discriminator_f(bundle: ModelBundle, inp: RewardInputs, gamma: float | None = None):
    """Scalar f per sample plus the caches needed for its gradient."""
    gamma = bundle.config.gamma if gamma is None else gamma
    g, cg = bundle.g.forward(inp.grids, inp.agents, inp.actions)
    g = g[:, 0]
    if bundle.h is None:
        return g, (cg, None, None)
    n = len(g)
    hh, ch = bundle.h.forward(np.concatenate([inp.feats, inp.next_feats]),
                              np.concatenate([inp.agents, inp.agents]))
    f = shaped_f(g, hh[:n], hh[n:], gamma, inp.terminal)
    return f, (cg, ch, gamma)


def discriminator_f_backward(bundle: ModelBundle, df: np.ndarray, cache, inp: RewardInputs,
                             grads: tuple | None = None):
    """Gradients of sum(df * f) for the g and h networks.

    Pass ``grads=(Gg, Gh)`` to accumulate into existing buffers.
    """
    cg, ch, gamma = cache
    gg, gh = grads if grads is not None else (None, None)
    Gg = bundle.g.backward(df[:, None], cg, gg)
    if bundle.h is None:
        return Gg, None
    dnext = np.where(inp.terminal, 0.0, gamma * df)
    Gh = bundle.h.backward(np.concatenate([-df, dnext]), ch, gh)
    return Gg, Gh
