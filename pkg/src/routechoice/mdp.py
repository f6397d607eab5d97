"""Deterministic route-choice MDP over links, trajectory data model, ingestion
filters, vectorized rollouts and a synthetic grid world with a soft value
iteration oracle."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .network import (
    INVALID, LEVELS, N_DIR, TURN_CLASS, ActionTable, FeatureBank, RoadNetwork,
    build_action_table, load_network,
)

log = logging.getLogger(__name__)

TRANSITION_FEATURE_NAMES = ("length",) + tuple(f"level_{lv}" for lv in LEVELS) + ("left", "right", "uturn")


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Context:
    dest: int
    agent: int | None = None


@dataclass
class Trajectory:
    links: np.ndarray
    actions: np.ndarray
    context: Context
    complete: bool = True
    trip_id: str = ""
    agent_id: str = ""

    @property
    def origin(self) -> int:
        return int(self.links[0])

    @property
    def dest(self) -> int:
        return self.context.dest

    @property
    def od(self) -> tuple[int, int]:
        return int(self.links[0]), self.context.dest

    def __len__(self) -> int:
        return len(self.links)

    def is_simple(self) -> bool:
        return len(set(self.links.tolist())) == len(self.links)


def actions_for(actions: ActionTable, links: Sequence[int]) -> np.ndarray:
    return np.array([actions.action_between(int(a), int(b)) for a, b in zip(links[:-1], links[1:])],
                    dtype=np.int64)


def make_trajectory(actions: ActionTable, links, dest: int | None = None, agent: int | None = None,
                    trip_id: str = "", agent_id: str = "") -> Trajectory:
    links = np.asarray(links, dtype=np.int64)
    dest = int(links[-1]) if dest is None else dest
    return Trajectory(links, actions_for(actions, links), Context(dest, agent),
                      complete=int(links[-1]) == dest, trip_id=trip_id, agent_id=agent_id)


class TrajectoryDataset:
    """Trajectories plus their flattened (s, a, c) triplets and OD grouping."""

    def __init__(self, trajectories: list[Trajectory], agents: Sequence[str] = (), meta: dict | None = None):
        self.trajectories = list(trajectories)
        self.agents = tuple(agents)
        self.meta = dict(meta or {})
        self._triplets = None

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def subset(self, idx: Iterable[int]) -> "TrajectoryDataset":
        return TrajectoryDataset([self.trajectories[i] for i in idx], self.agents, self.meta)

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(state, action, dest, agent) arrays over every transition."""
        if self._triplets is None:
            s, a, d, g = [], [], [], []
            for t in self.trajectories:
                n = len(t.actions)
                s.append(t.links[:n])
                a.append(t.actions)
                d.append(np.full(n, t.dest))
                g.append(np.full(n, -1 if t.context.agent is None else t.context.agent))
            cat = (lambda xs: np.concatenate(xs).astype(np.int64)) if s else (lambda xs: np.zeros(0, np.int64))
            self._triplets = (cat(s), cat(a), cat(d), cat(g))
        return self._triplets

    def od_index(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for i, t in enumerate(self.trajectories):
            out.setdefault(t.od, []).append(i)
        return out

    def destinations(self) -> np.ndarray:
        return np.unique([t.dest for t in self.trajectories])


def step(actions: ActionTable, state: int, action: int, dest: int | None = None) -> tuple[int, bool]:
    """Deterministic transition; returns (next_link, reached_destination)."""
    nxt = int(actions.succ[state, action]) if 0 <= action < N_DIR else INVALID
    if nxt == INVALID:
        raise TrajectoryError(f"action {action} not available at link {state}")
    return nxt, dest is not None and nxt == dest


# ---------------------------------------------------------------------------
# trajectory files

@dataclass
class IngestReport:
    read: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    errors: list = field(default_factory=list)

    def text(self) -> str:
        lines = [f"trips_read {self.read}", f"trips_kept {self.kept}"]
        for k in ("parse_error", "unknown_link", "non_adjacent", "cyclic", "too_short"):
            lines.append(f"dropped_{k} {self.dropped.get(k, 0)}")
        lines += [f"error {e}" for e in self.errors]
        return "\n".join(lines) + "\n"


def read_trajectory_rows(path) -> list[tuple[int, str, str, list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["trip_id", "agent_id", "link_seq"]:
            raise TrajectoryError(f"{path}: expected header trip_id,agent_id,link_seq")
        for lineno, row in enumerate(reader, start=2):
            rows.append((lineno, row))
    return rows


def ingest_trajectories(path, network: RoadNetwork, actions: ActionTable | None = None,
                        min_links: int = 15, drop_cyclic: bool = True) -> tuple[TrajectoryDataset, IngestReport]:
    """Read ``trip_id,agent_id,link_seq`` rows and apply the trip filters."""
    actions = actions or build_action_table(network)
    report = IngestReport()
    kept, agents = [], {}
    for lineno, row in read_trajectory_rows(path):
        report.read += 1
        if len(row) < 3 or not row[2].strip():
            report.dropped["parse_error"] += 1
            report.errors.append(f"line {lineno}: expected 3 fields with a non-empty link_seq")
            continue
        trip_id, agent_id, seq = row[0].strip(), row[1].strip(), row[2].strip()
        ids = [x.strip() for x in seq.split(";") if x.strip()]
        if any(i not in network.link_index for i in ids):
            report.dropped["unknown_link"] += 1
            continue
        links = [network.link_index[i] for i in ids]
        if any(b not in network.successors[a] for a, b in zip(links[:-1], links[1:])):
            report.dropped["non_adjacent"] += 1
            continue
        if drop_cyclic and len(set(links)) != len(links):
            report.dropped["cyclic"] += 1
            continue
        if len(links) < max(min_links, 2):
            report.dropped["too_short"] += 1
            continue
        agent = None
        if agent_id:
            agent = agents.setdefault(agent_id, len(agents))
        kept.append(make_trajectory(actions, links, agent=agent, trip_id=trip_id, agent_id=agent_id))
    report.kept = len(kept)
    if not kept:
        raise TrajectoryError(f"{path}: no trips left after filtering\n{report.text()}")
    return TrajectoryDataset(kept, agents=tuple(agents)), report


def write_trajectories(path, network: RoadNetwork, trajectories: Iterable[Trajectory], extra: dict | None = None) -> None:
    """Write the ``trip_id,agent_id,link_seq`` format; ``extra`` adds columns keyed by name -> list."""
    trajectories = list(trajectories)
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "agent_id", "link_seq", *extra])
        for i, t in enumerate(trajectories):
            w.writerow([t.trip_id or str(i), t.agent_id, ";".join(network.link_ids[j] for j in t.links),
                        *(extra[k][i] for k in extra)])


# ---------------------------------------------------------------------------
# rollouts

PolicyFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def default_max_steps(sp_links: np.ndarray | int) -> np.ndarray:
    return np.maximum(3 * np.asarray(sp_links), 50)


@dataclass
class RolloutBatch:
    """Padded rollouts: ``links`` is (n, T+1), ``actions``/``logp`` are (n, T)."""
    links: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    lengths: np.ndarray     # number of actions taken
    complete: np.ndarray
    dests: np.ndarray
    agents: np.ndarray

    def trajectories(self, actions_table: ActionTable | None = None) -> list[Trajectory]:
        out = []
        for i in range(len(self.lengths)):
            n = self.lengths[i]
            ag = None if self.agents[i] < 0 else int(self.agents[i])
            out.append(Trajectory(self.links[i, :n + 1].copy(), self.actions[i, :n].copy(),
                                  Context(int(self.dests[i]), ag), complete=bool(self.complete[i])))
        return out

    def step_arrays(self):
        """Flatten to per-step arrays ordered trajectory by trajectory."""
        T = self.actions.shape[1]
        m = np.arange(T)[None, :] < self.lengths[:, None]
        rows, cols = np.nonzero(m)
        return rows, cols


def rollout_batch(policy: PolicyFn, origins, dests, agents=None, max_steps=None,
                  rng: np.random.Generator | None = None, bank: FeatureBank | None = None) -> RolloutBatch:
    """Run many episodes in lockstep, sampling from each policy's masked distribution."""
    origins = np.asarray(origins, dtype=np.int64)
    dests = np.asarray(dests, dtype=np.int64)
    n = len(origins)
    agents = np.full(n, -1, dtype=np.int64) if agents is None else np.asarray(agents, dtype=np.int64)
    rng = rng or np.random.default_rng(0)
    if bank is None:
        raise ValueError("rollout_batch needs a FeatureBank to resolve successors")
    if max_steps is None:
        sp = np.array([bank.paths.tree(int(d)).metrics[o, 1] for o, d in zip(origins, dests)])
        max_steps = default_max_steps(np.nan_to_num(sp, nan=0).astype(int))
    max_steps = np.broadcast_to(np.asarray(max_steps, dtype=np.int64), (n,))
    T = int(max_steps.max()) if n else 0
    links = np.full((n, T + 1), INVALID, dtype=np.int64)
    acts = np.full((n, T), INVALID, dtype=np.int64)
    logp = np.zeros((n, T))
    links[:, 0] = origins
    cur = origins.copy()
    lengths = np.zeros(n, dtype=np.int64)
    done = cur == dests
    complete = done.copy()
    succ = bank.actions.succ
    for t in range(T):
        active = np.flatnonzero(~done & (t < max_steps))
        if active.size == 0:
            break
        p = policy(cur[active], dests[active], agents[active])
        tot = p.sum(axis=1)
        if np.any(~(tot > 0)):
            bad = active[~(tot > 0)][0]
            raise TrajectoryError(f"policy has no mass on valid actions at link {cur[bad]}")
        cdf = np.cumsum(p / tot[:, None], axis=1)
        u = rng.random(active.size)
        a = np.minimum((cdf < u[:, None]).sum(axis=1), N_DIR - 1)
        # guard against rounding landing on a zero-probability tail entry
        zero = p[np.arange(active.size), a] <= 0
        if zero.any():
            a[zero] = _last_positive(p[zero])
        nxt = succ[cur[active], a]
        acts[active, t] = a
        logp[active, t] = np.log(p[np.arange(active.size), a] / tot)
        links[active, t + 1] = nxt
        lengths[active] += 1
        cur[active] = nxt
        arrived = nxt == dests[active]
        complete[active[arrived]] = True
        done[active[arrived]] = True
    return RolloutBatch(links, acts, logp, lengths, complete, dests, agents)


def _last_positive(p: np.ndarray) -> np.ndarray:
    return p.shape[1] - 1 - np.argmax(p[:, ::-1] > 0, axis=1)


def rollout(policy: PolicyFn, origin: int, context: Context, max_steps: int | None = None,
            seed: int | None = 0, bank: FeatureBank | None = None) -> Trajectory:
    if origin == context.dest:
        raise TrajectoryError("origin equals destination")
    if bank is not None and not bank.reachable(context.dest)[origin]:
        raise TrajectoryError("destination unreachable from origin")
    batch = rollout_batch(policy, [origin], [context.dest],
                          [-1 if context.agent is None else context.agent],
                          max_steps=max_steps, rng=np.random.default_rng(seed), bank=bank)
    return batch.trajectories()[0]


# ---------------------------------------------------------------------------
# synthetic world

def synth_grid_network(rows: int, cols: int, block_m: float = 100.0, seed: int = 0,
                       jitter: float = 0.1, allow_uturn: bool = False) -> RoadNetwork:
    """Bidirectional street grid; lengths jittered per segment, levels by row/column rule."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(seed)
    nodes = [(f"n{r}_{c}", c * block_m, r * block_m) for r in range(rows) for c in range(cols)]

    def level(line: int, n_lines: int) -> str:
        if line in (0, n_lines - 1):
            return "primary"
        return "secondary" if line % 3 == 0 else "residential"

    links = []
    segs = [((r, c), (r, c + 1), level(r, rows)) for r in range(rows) for c in range(cols - 1)]
    segs += [((r, c), (r + 1, c), level(c, cols)) for c in range(cols) for r in range(rows - 1)]
    for (a, b, lv) in segs:
        ln = block_m * (1.0 + rng.uniform(-jitter, jitter))
        na, nb = f"n{a[0]}_{a[1]}", f"n{b[0]}_{b[1]}"
        links.append((f"{na}>{nb}", na, nb, ln, lv))
        links.append((f"{nb}>{na}", nb, na, ln, lv))
    return load_network(nodes, links, allow_uturn=allow_uturn)


def transition_features(network: RoadNetwork, actions: ActionTable, length_scale: float = 1000.0) -> np.ndarray:
    """(n_links, 8, 10) link-additive features of each move: [length(s')/scale,
    level one-hot of s', left, right, u-turn]; zeros where the move is invalid."""
    n = network.n_links
    out = np.zeros((n, N_DIR, len(TRANSITION_FEATURE_NAMES)))
    ok = actions.succ != INVALID
    nxt = np.where(ok, actions.succ, 0)
    out[..., 0] = network.length[nxt] / length_scale
    lv = network.level[nxt]
    for i in range(len(LEVELS)):
        out[..., 1 + i] = lv == i
    for k in range(N_DIR):
        if TURN_CLASS[k] >= 0:
            out[:, k, 7 + TURN_CLASS[k]] = 1.0
    out[~ok] = 0.0
    return out


class ConvergenceError(RuntimeError):
    pass


@dataclass
class SoftSolution:
    values: np.ndarray      # (n_links,) -inf where the destination is unreachable
    policy: np.ndarray      # (n_links, 8)
    iterations: int


def soft_value_iteration(network: RoadNetwork, actions: ActionTable, reward_params, dest: int,
                         discount: float = 1.0, tol: float = 1e-10, max_iter: int = 100_000,
                         features: np.ndarray | None = None, length_scale: float = 1000.0) -> SoftSolution:
    """Logsum fixed point V(s) = log sum_a exp(r(s,a) + gamma V(s')), V(dest) = 0.

    Iterates upward from V = -inf so that the least fixed point is found; a
    reward too weak to contract the network makes the values blow up and
    raises ConvergenceError.
    """
    phi = transition_features(network, actions, length_scale) if features is None else features
    r = phi @ np.asarray(reward_params, dtype=float)
    ok = actions.succ != INVALID
    nxt = np.where(ok, actions.succ, 0)
    V = np.full(network.n_links, -np.inf)
    V[dest] = 0.0
    for it in range(1, max_iter + 1):
        q = np.where(ok, r + discount * V[nxt], -np.inf)
        with np.errstate(invalid="ignore"):
            newV = logsumexp(q, axis=1)
        newV[dest] = 0.0
        fin = np.isfinite(newV)
        if np.any(newV[fin] > 1e6):
            raise ConvergenceError("soft values diverge: reward not negative enough for this graph")
        both = fin & np.isfinite(V)
        delta = np.max(np.abs(newV[both] - V[both])) if both.any() else np.inf
        same_support = np.array_equal(fin, np.isfinite(V))
        V = newV
        if same_support and delta < tol:
            break
    else:
        raise ConvergenceError(f"soft value iteration did not converge in {max_iter} iterations")
    q = np.where(ok, r + discount * V[nxt], -np.inf)
    with np.errstate(invalid="ignore"):
        pol = np.exp(q - V[:, None])
    pol[~np.isfinite(V)] = 0.0
    pol = np.nan_to_num(pol, nan=0.0)
    pol[dest] = 0.0
    return SoftSolution(V, pol, it)


def uniform_od_sampler(bank: FeatureBank, min_hops: int = 5, candidates: Sequence[tuple[int, int]] | None = None):
    """OD pairs (origin, dest) with at least ``min_hops`` links between them, sampled uniformly."""
    if candidates is None:
        pairs = []
        for d in range(bank.network.n_links):
            hops = bank.paths.tree(d).metrics[:, 1]
            for o in np.flatnonzero(np.nan_to_num(hops, nan=-1) >= min_hops):
                pairs.append((int(o), d))
    else:
        pairs = list(candidates)
    if not pairs:
        raise TrajectoryError("OD sampler has no eligible pairs")
    pairs_a = np.asarray(pairs, dtype=np.int64)

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return pairs_a[rng.integers(len(pairs_a), size=n)]

    sample.pairs = pairs_a
    return sample


def synth_demonstrations(network: RoadNetwork, reward_params, n_trips: int, seed: int = 0,
                         od_sampler=None, actions: ActionTable | None = None, discount: float = 1.0,
                         min_hops: int = 5, length_scale: float = 1000.0, max_resample: int = 50,
                         n_agents: int = 0) -> TrajectoryDataset:
    """Trips sampled from the soft-optimal policy of a known linear reward.

    Cyclic rollouts are redrawn for the same OD; ``meta['beta']`` keeps the
    generating parameters.
    """
    actions = actions or build_action_table(network)
    bank = FeatureBank(network, actions)
    rng = np.random.default_rng(seed)
    od_sampler = od_sampler or uniform_od_sampler(bank, min_hops=min_hops)
    ods = od_sampler(rng, n_trips)
    phi = transition_features(network, actions, length_scale)
    cache: dict[int, np.ndarray] = {}

    def policy(links, dests, _agents):
        out = np.empty((len(links), N_DIR))
        for d in np.unique(dests):
            pol = cache.get(int(d))
            if pol is None:
                pol = cache[int(d)] = soft_value_iteration(
                    network, actions, reward_params, int(d), discount, features=phi).policy
            sel = dests == d
            out[sel] = pol[links[sel]]
        return out

    trajs: list[Trajectory | None] = [None] * n_trips
    pending = np.arange(n_trips)
    for _ in range(max_resample + 1):
        if pending.size == 0:
            break
        batch = rollout_batch(policy, ods[pending, 0], ods[pending, 1], rng=rng, bank=bank)
        retry = []
        for i, t in zip(pending, batch.trajectories()):
            if t.complete and t.is_simple():
                trajs[i] = t
            else:
                retry.append(i)
        pending = np.asarray(retry, dtype=np.int64)
    if pending.size:
        raise TrajectoryError(f"{pending.size} trips stayed cyclic after {max_resample} redraws")
    agents = [f"agent{i}" for i in range(n_agents)]
    for i, t in enumerate(trajs):
        t.trip_id = str(i)
        if n_agents:
            a = int(rng.integers(n_agents))
            t.context = Context(t.dest, a)
            t.agent_id = agents[a]
    return TrajectoryDataset(trajs, agents=agents,
                             meta={"beta": [float(b) for b in reward_params], "discount": discount,
                                   "length_scale": length_scale, "seed": seed})
