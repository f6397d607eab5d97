"""Recursive logit (link-based) and path size logit / DNN-PSL (path-based) baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np
from scipy import optimize, sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve
from scipy.special import logsumexp

from .approximator import Adam, ParamSet, dense_stack, init_uniform, Sequential
from .mdp import (
    TRANSITION_FEATURE_NAMES, ConvergenceError, TrajectoryDataset, soft_value_iteration,
    transition_features,
)
from .network import (
    CONTEXT_FEATURE_NAMES, INVALID, N_DIR, TURN_CLASS, ActionTable, RoadNetwork, UnreachableError,
)

log = logging.getLogger(__name__)

BARRIER = 1e12


# ---------------------------------------------------------------------------
# recursive logit

@dataclass
class LinearUtilityParams:
    names: tuple
    coef: np.ndarray
    loglik: float = float("nan")
    loglik0: float = float("nan")

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=float)
        if self.coef.shape != (len(self.names),):
            raise ValueError("one coefficient per feature name")
        if not np.all(np.isfinite(self.coef)):
            raise ValueError("coefficients must be finite")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "coefficient"])
            for n, c in zip(self.names, self.coef):
                w.writerow([n, repr(float(c))])

    @classmethod
    def read_csv(cls, path) -> "LinearUtilityParams":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(tuple(r["feature"] for r in rows), [float(r["coefficient"]) for r in rows])


def _utilities(actions: ActionTable, params, features: np.ndarray) -> np.ndarray:
    """(n, 8) instantaneous utilities v(s'|s), -inf on invalid moves."""
    v = features @ np.asarray(params, dtype=float)
    return np.where(actions.succ != INVALID, v, -np.inf)


def rl_solve_values(network: RoadNetwork, actions: ActionTable, params, dest: int,
                    features: np.ndarray | None = None, length_scale: float = 1000.0,
                    method: str = "auto") -> np.ndarray:
    """Logsum values V(.; dest) with V(dest) = 0 and -inf where dest is unreachable.

    z = exp(V) solves (I - M) z = e_dest, M[s, s'] = exp(v(s'|s)), with the
    destination row absorbing. Falls back to value iteration when the linear
    system is singular or yields non-positive z on reachable links.
    """
    phi = transition_features(network, actions, length_scale) if features is None else features
    if method not in ("auto", "linear", "iteration"):
        raise ValueError(f"unknown method {method!r}")
    if method != "iteration":
        V = _linear_values(actions, _utilities(actions, params, phi), dest)
        if V is not None or method == "linear":
            if V is None:
                raise ConvergenceError("linear system singular or not a contraction")
            return V
    return soft_value_iteration(network, actions, params, dest, discount=1.0, features=phi).values


def _linear_values(actions: ActionTable, v: np.ndarray, dest: int) -> np.ndarray | None:
    n = actions.succ.shape[0]
    ok = actions.succ != INVALID
    ok[dest] = False
    rows = np.repeat(np.arange(n), N_DIR).reshape(n, N_DIR)[ok]
    cols = actions.succ[ok]
    M = sparse.csr_matrix((np.exp(v[ok]), (rows, cols)), shape=(n, n))
    A = (sparse.identity(n, format="csr") - M).tocsc()
    b = np.zeros(n)
    b[dest] = 1.0
    with np.errstate(all="ignore"):
        try:
            z = spsolve(A, b)
        except RuntimeError:
            return None
    if not np.all(np.isfinite(z)):
        return None
    reach = _reaches(actions, dest)
    if np.any(z[reach] <= 0) or np.any(np.abs(z[~reach]) > 1e-9):
        return None
    if np.max(np.abs(A @ z - b)) > 1e-9 * max(1.0, np.max(np.abs(z))):
        return None
    with np.errstate(divide="ignore"):
        V = np.where(reach, np.log(np.where(reach, z, 1.0)), -np.inf)
    return V


_REACH: dict[int, tuple] = {}


def reach_matrix(actions: ActionTable) -> np.ndarray:
    """reach[s, d]: link d can be reached from link s (cached per action table)."""
    hit = _REACH.get(id(actions))
    if hit is not None and hit[0] is actions:
        return hit[1]
    n = actions.succ.shape[0]
    ok = actions.succ != INVALID
    adj = sparse.csr_matrix((np.ones(ok.sum()), (np.nonzero(ok)[0], actions.succ[ok])), shape=(n, n))
    dist = csgraph.shortest_path(adj, unweighted=True)
    reach = np.isfinite(dist)
    _REACH[id(actions)] = (actions, reach)
    return reach


def _reaches(actions: ActionTable, dest: int) -> np.ndarray:
    return reach_matrix(actions)[:, dest]


def rl_values_batch(network: RoadNetwork, actions: ActionTable, params, dests: Sequence[int],
                    features: np.ndarray) -> np.ndarray:
    """(len(dests), n) logsum values for several destinations at once.

    Inverts I - M once (no absorbing row) and corrects each destination's
    absorbing row with a rank-one update; destinations where that is unstable
    go through ``rl_solve_values``.
    """
    dests = np.asarray(dests, dtype=np.int64)
    n = network.n_links
    v = _utilities(actions, params, features)
    ok = actions.succ != INVALID
    rows = np.nonzero(ok)[0]
    A = np.eye(n)
    np.subtract.at(A, (rows, actions.succ[ok]), np.exp(v[ok]))
    reach = reach_matrix(actions)[:, dests].T            # (D, n)
    out = np.full((len(dests), n), -np.inf)
    todo = np.ones(len(dests), dtype=bool)
    with np.errstate(all="ignore"):
        try:
            X = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            X = None
        if X is not None and np.all(np.isfinite(X)):
            # A_d = A - e_d r_d^T with r_d = A[d] - e_d
            Xe = X[:, dests]                            # (n, D)
            R = A[dests].copy()
            R[np.arange(len(dests)), dests] -= 1.0
            rXe = np.einsum("dn,nd->d", R, Xe)
            Z = Xe / (1.0 - rXe)[None, :]               # (n, D)
            res = A @ Z
            res[dests, np.arange(len(dests))] -= np.einsum("dn,nd->d", R, Z) + 1.0
            scale = np.maximum(1.0, np.abs(Z).max(axis=0))
            good = (np.abs(res).max(axis=0) <= 1e-9 * scale) & np.all((Z.T > 0) | ~reach, axis=1)
            good &= np.all(np.where(reach, True, np.abs(Z.T) <= 1e-9), axis=1)
            Zt = Z.T
            out[good] = np.where(reach[good], np.log(np.where(reach[good], Zt[good], 1.0)), -np.inf)
            todo = ~good
    for i in np.flatnonzero(todo):
        out[i] = rl_solve_values(network, actions, params, int(dests[i]), features)
    return out


def rl_next_probs(actions: ActionTable, params, values: np.ndarray, s: int, features: np.ndarray) -> np.ndarray:
    """P(direction | s) over the 8 directions; zeros on invalid moves."""
    v = _utilities(actions, params, features)[s]
    ok = actions.succ[s] != INVALID
    q = np.full(N_DIR, -np.inf)
    q[ok] = v[ok] + values[actions.succ[s, ok]]
    if not np.isfinite(q).any():
        raise UnreachableError(f"no successor of link {s} reaches the destination")
    return np.exp(q - logsumexp(q))


def rl_next_prob(actions: ActionTable, params, values: np.ndarray, s: int, s_next: int,
                 features: np.ndarray) -> float:
    k = actions.action_between(s, s_next)
    if k == INVALID:
        raise ValueError(f"link {s_next} is not a successor of {s}")
    return float(rl_next_probs(actions, params, values, s, features)[k])


class RecursiveLogit:
    """Fitted recursive logit with cached per-destination values."""

    def __init__(self, network: RoadNetwork, actions: ActionTable, params: LinearUtilityParams,
                 length_scale: float = 1000.0):
        self.network, self.actions, self.params = network, actions, params
        self.features = transition_features(network, actions, length_scale)
        self.length_scale = length_scale
        self._values: dict[int, np.ndarray] = {}

    def values(self, dest: int) -> np.ndarray:
        if dest not in self._values:
            self._values[dest] = rl_solve_values(self.network, self.actions, self.params.coef, dest,
                                                 self.features)
        return self._values[dest]

    def probs(self, links, dests, agents=None) -> np.ndarray:
        """(B, 8) next-direction probabilities; rows of zeros at unreachable states."""
        links, dests = np.asarray(links), np.asarray(dests)
        v = _utilities(self.actions, self.params.coef, self.features)
        ok = self.actions.succ != INVALID
        nxt = np.where(ok, self.actions.succ, 0)
        out = np.zeros((len(links), N_DIR))
        missing = [int(d) for d in np.unique(dests) if int(d) not in self._values]
        if missing:
            for d, V in zip(missing, rl_values_batch(self.network, self.actions, self.params.coef, missing,
                                                     self.features)):
                self._values[d] = V
        for d in np.unique(dests):
            sel = np.flatnonzero(dests == d)
            V = self.values(int(d))
            q = np.where(ok[links[sel]], v[links[sel]] + V[nxt[links[sel]]], -np.inf)
            with np.errstate(invalid="ignore"):
                lse = logsumexp(q, axis=1, keepdims=True)
                p = np.exp(q - lse)
            out[sel] = np.nan_to_num(p, nan=0.0)
        return out


def rl_loglik(network: RoadNetwork, actions: ActionTable, coef, features: np.ndarray, s: np.ndarray,
              a: np.ndarray, d: np.ndarray) -> float:
    """Sum of log P(a | s; d) over transitions; -inf when any solve fails."""
    v = _utilities(actions, coef, features)
    dests = np.unique(d)
    try:
        Vs = rl_values_batch(network, actions, coef, dests, features)
    except ConvergenceError:
        return -np.inf
    V = Vs[np.searchsorted(dests, d)]                  # (N, n) rows per transition
    ok = actions.succ[s] != INVALID
    nxt = np.where(ok, actions.succ[s], 0)
    q = np.where(ok, v[s] + np.take_along_axis(V, nxt, axis=1), -np.inf)
    with np.errstate(invalid="ignore"):
        lse = logsumexp(q, axis=1)
    total = float(np.sum(q[np.arange(len(s)), a] - lse))
    return total if np.isfinite(total) else -np.inf


def rl_fit(dataset: TrajectoryDataset, network: RoadNetwork, actions: ActionTable,
           length_scale: float = 1000.0, init=None, max_iter: int = 200, step: float = 1e-4) -> LinearUtilityParams:
    """Maximum likelihood with central-difference gradients.

    Features are divided by their spread over valid moves (no centering, which
    would change the model) so one step size suits every coefficient.
    Parameters whose value system fails get the barrier objective.
    """
    phi = transition_features(network, actions, length_scale)
    s, a, d, _ = dataset.triplets()
    ok = actions.succ != INVALID
    scale = phi[ok].std(axis=0)
    scale[scale == 0] = 1.0
    phi_n = phi / scale
    p = phi.shape[-1]

    def nll(theta):
        ll = rl_loglik(network, actions, theta, phi_n, s, a, d)
        return -ll if np.isfinite(ll) else BARRIER

    def grad(theta):
        g = np.zeros(p)
        for i in range(p):
            e = np.zeros(p)
            e[i] = step
            g[i] = (nll(theta + e) - nll(theta - e)) / (2 * step)
        return g

    # start from a pure distance penalty, which always contracts
    theta0 = np.zeros(p) if init is None else np.asarray(init, dtype=float) * scale
    if init is None:
        theta0[0] = -1.0
        while nll(theta0) >= BARRIER:
            theta0[0] *= 2
    res = optimize.minimize(nll, theta0, jac=grad, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-4})
    coef = res.x / scale
    ll0 = float(np.sum(-np.log(ok[s].sum(axis=1))))
    ll = -float(res.fun)
    log.info("recursive logit: loglik %.3f (null %.3f), %s", ll, ll0, res.message)
    return LinearUtilityParams(TRANSITION_FEATURE_NAMES, coef, ll, ll0)


# ---------------------------------------------------------------------------
# path size logit

PATH_FEATURE_NAMES = CONTEXT_FEATURE_NAMES


@dataclass
class ChoiceSet:
    od: tuple
    paths: list                     # link index arrays
    kappa: np.ndarray
    features: np.ndarray            # (k, p) path-level features
    lengths: np.ndarray             # metres

    def __len__(self) -> int:
        return len(self.paths)


def _link_graph(network: RoadNetwork, actions: ActionTable) -> nx.DiGraph:
    """Links as nodes; edge weight is the length of the entered link."""
    G = nx.DiGraph()
    G.add_nodes_from(range(network.n_links))
    for s, k in zip(*np.nonzero(actions.succ != INVALID)):
        t = int(actions.succ[s, k])
        G.add_edge(int(s), t, weight=float(network.length[t]))
    return G


def path_features(network: RoadNetwork, actions: ActionTable, path: Sequence[int],
                  length_scale: float = 1000.0) -> np.ndarray:
    """Context-style totals of a whole path: distance, links, turns, level counts."""
    path = np.asarray(path)
    rest = path[1:]
    out = np.zeros(len(PATH_FEATURE_NAMES))
    out[0] = network.length[rest].sum() / length_scale
    out[1] = len(rest)
    for u, v in zip(path[:-1], path[1:]):
        c = TURN_CLASS[actions.action_between(int(u), int(v))]
        if c >= 0:
            out[2 + c] += 1
    np.add.at(out, 5 + network.level[rest], 1.0)
    return out


def path_size_terms(network: RoadNetwork, paths: Sequence[Sequence[int]]) -> np.ndarray:
    """Length-weighted path size kappa_j = sum_a (l_a / L_j) / N_a."""
    counts: dict[int, int] = {}
    for p in paths:
        for link in set(int(x) for x in p):
            counts[link] = counts.get(link, 0) + 1
    out = np.empty(len(paths))
    for j, p in enumerate(paths):
        links = np.unique(np.asarray(p, dtype=int))
        L = network.length[links].sum()
        out[j] = sum(network.length[a] / L / counts[int(a)] for a in links)
    return out


def path_size_term(network: RoadNetwork, j: int, choice_set: ChoiceSet) -> float:
    return float(path_size_terms(network, choice_set.paths)[j])


class ChoiceSetBuilder:
    """k loopless shortest paths per OD over the link graph, cached."""

    def __init__(self, network: RoadNetwork, actions: ActionTable, k: int = 5, length_scale: float = 1000.0):
        self.network, self.actions, self.k, self.length_scale = network, actions, k, length_scale
        self.graph = _link_graph(network, actions)
        self._cache: dict[tuple, ChoiceSet] = {}

    def __call__(self, od) -> ChoiceSet:
        od = (int(od[0]), int(od[1]))
        if od not in self._cache:
            self._cache[od] = self._build(od)
        return self._cache[od]

    def _build(self, od) -> ChoiceSet:
        o, d = od
        paths = []
        try:
            for p in nx.shortest_simple_paths(self.graph, o, d, weight="weight"):
                paths.append(np.asarray(p, dtype=np.int64))
                if len(paths) == self.k:
                    break
        except nx.NetworkXNoPath:
            pass
        if not paths:
            raise UnreachableError(f"no path from link {o} to link {d}")
        feats = np.array([path_features(self.network, self.actions, p, self.length_scale) for p in paths])
        lengths = np.array([self.network.length[p[1:]].sum() for p in paths])
        return ChoiceSet(od, paths, path_size_terms(self.network, paths), feats, lengths)


def ksp_choice_set(network: RoadNetwork, actions: ActionTable, od, k: int = 5,
                   length_scale: float = 1000.0) -> ChoiceSet:
    return ChoiceSetBuilder(network, actions, k, length_scale)(od)


def match_trajectory(network: RoadNetwork, links: Sequence[int], choice_set: ChoiceSet) -> int:
    """Candidate sharing the largest length-weighted fraction of the trajectory's links."""
    if not len(choice_set):
        raise ValueError("empty choice set")
    traj = np.unique(np.asarray(links, dtype=int))
    total = network.length[traj].sum()
    scores = []
    for p in choice_set.paths:
        shared = np.intersect1d(traj, p)
        scores.append(network.length[shared].sum() / total)
    scores = np.asarray(scores)
    best = np.flatnonzero(np.isclose(scores, scores.max(), rtol=0, atol=1e-12))
    # ties: shortest candidate, then lowest index
    return int(min(best, key=lambda j: (choice_set.lengths[j], j)))


def psl_prob(utilities: np.ndarray, kappa: np.ndarray, beta_ps: float) -> np.ndarray:
    """P(j) proportional to exp(v_j + beta_ps ln kappa_j)."""
    x = np.asarray(utilities, dtype=float) + beta_ps * np.log(kappa)
    return np.exp(x - logsumexp(x))


@dataclass
class PathSizeLogit:
    """Linear (``dnn=False``) or dense-network utilities over path features."""
    coef: np.ndarray                # linear weights, or the flat network parameters
    beta_ps: float
    feature_scale: np.ndarray
    dnn: bool = False
    hidden: int = 64
    report: dict = field(default_factory=dict)

    def _net(self):
        seq = Sequential(dense_stack("", [len(self.feature_scale), self.hidden, 1]))
        return seq, ParamSet(seq.param_shapes(), self.coef)

    def utilities(self, features: np.ndarray) -> np.ndarray:
        x = features / self.feature_scale
        if not self.dnn:
            return x @ self.coef
        seq, P = self._net()
        return seq.forward(P, x)[0][:, 0]

    def probs(self, choice_set: ChoiceSet) -> np.ndarray:
        return psl_prob(self.utilities(choice_set.features), choice_set.kappa, self.beta_ps)

    def write_csv(self, path) -> None:
        names = list(PATH_FEATURE_NAMES) if not self.dnn else [f"w{i}" for i in range(len(self.coef))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "coefficient"])
            w.writerow(["beta_ps", repr(float(self.beta_ps))])
            w.writerow(["dnn", int(self.dnn)])
            w.writerow(["hidden", self.hidden])
            for n, s in zip(PATH_FEATURE_NAMES, self.feature_scale):
                w.writerow([f"scale:{n}", repr(float(s))])
            for n, c in zip(names, self.coef):
                w.writerow([n, repr(float(c))])

    @classmethod
    def read_csv(cls, path) -> "PathSizeLogit":
        with open(path, newline="") as fh:
            rows = [(r["feature"], r["coefficient"]) for r in csv.DictReader(fh)]
        kv = dict(rows[:3])
        scale = [float(v) for k, v in rows if k.startswith("scale:")]
        coef = [float(v) for k, v in rows[3 + len(scale):]]
        return cls(np.array(coef), float(kv["beta_ps"]), np.array(scale), bool(int(kv["dnn"])), int(kv["hidden"]))


def psl_targets(dataset: TrajectoryDataset, network: RoadNetwork, builder: ChoiceSetBuilder):
    """Per-OD (choice set, empirical match frequencies); ODs that fail are counted and skipped."""
    groups, skipped = [], 0
    for od, idx in sorted(dataset.od_index().items()):
        try:
            cs = builder(od)
        except UnreachableError:
            skipped += 1
            continue
        freq = np.zeros(len(cs))
        for i in idx:
            freq[match_trajectory(network, dataset[i].links, cs)] += 1
        groups.append((cs, freq / freq.sum(), len(idx)))
    if skipped:
        log.warning("path size logit: %d OD pairs without a choice set skipped", skipped)
    return groups, skipped


def psl_cross_entropy(model: PathSizeLogit, groups) -> float:
    """Trip-weighted cross-entropy between empirical and predicted candidate shares."""
    total = sum(w for _, _, w in groups)
    ce = 0.0
    for cs, target, w in groups:
        p = model.probs(cs)
        ce -= w * np.sum(target * np.log(np.maximum(p, 1e-300)))
    return ce / total


def psl_fit(dataset: TrajectoryDataset, network: RoadNetwork, actions: ActionTable, dnn_utility: bool = False,
            k: int = 5, seed: int = 0, builder: ChoiceSetBuilder | None = None, epochs: int = 2000,
            hidden: int = 64) -> PathSizeLogit:
    builder = builder or ChoiceSetBuilder(network, actions, k)
    groups, skipped = psl_targets(dataset, network, builder)
    if not groups:
        raise ValueError("no OD pair with a choice set")
    feats = np.concatenate([cs.features for cs, _, _ in groups])
    scale = np.abs(feats).max(axis=0)
    scale[scale == 0] = 1.0
    p = feats.shape[1]
    # stack groups into padded arrays for vectorised likelihood
    K = max(len(cs) for cs, _, _ in groups)
    G = len(groups)
    X = np.zeros((G, K, p))
    lnk = np.zeros((G, K))
    T = np.zeros((G, K))
    live = np.zeros((G, K), dtype=bool)
    W = np.array([w for _, _, w in groups], dtype=float)
    W /= W.sum()
    for i, (cs, t, _) in enumerate(groups):
        n = len(cs)
        X[i, :n] = cs.features / scale
        lnk[i, :n] = np.log(cs.kappa)
        T[i, :n] = t
        live[i, :n] = True

    def loss_and_dx(util: np.ndarray, beta_ps: float):
        x = np.where(live, util + beta_ps * lnk, -np.inf)
        lse = logsumexp(x, axis=1, keepdims=True)
        logp = np.where(live, x - lse, 0.0)
        loss = -np.sum(W[:, None] * T * logp)
        pr = np.where(live, np.exp(logp), 0.0)
        dx = W[:, None] * (pr - T)            # d loss / d x
        return loss, dx

    report = {"skipped_od": skipped, "n_od": G}
    if not dnn_utility:
        def fun(theta):
            util = X @ theta[:p]
            loss, dx = loss_and_dx(util, theta[p])
            return loss, np.append(np.einsum("gk,gkp->p", dx, X), np.sum(dx * lnk))

        bounds = [(None, None)] * p + [(0.0, None)]
        res = optimize.minimize(fun, np.append(np.zeros(p), 1.0), jac=True, method="L-BFGS-B", bounds=bounds)
        report["cross_entropy"] = float(res.fun)
        return PathSizeLogit(res.x[:p], float(res.x[p]), scale, False, hidden, report)

    rng = np.random.default_rng(seed)
    seq = Sequential(dense_stack("", [p, hidden, 1]))
    P = ParamSet(seq.param_shapes() + [("beta_ps", ())])
    init_uniform(P, rng, seq.fan_in())
    P["beta_ps"] = 1.0
    opt = Adam(P, lr=1e-2)
    Xf = X.reshape(G * K, p)
    Gr = P.zeros_like()
    loss = np.inf
    for _ in range(epochs):
        out, caches = seq.forward(P, Xf)
        util = out[:, 0].reshape(G, K)
        b = float(P["beta_ps"])
        loss, dx = loss_and_dx(util, b)
        Gr.flat[:] = 0.0
        seq.backward(P, Gr, dx.reshape(-1, 1), caches)
        Gr["beta_ps"] = np.sum(dx * lnk)
        opt.step(Gr)
        P["beta_ps"] = max(0.0, float(P["beta_ps"]))
    report["cross_entropy"] = float(loss)
    net_params = P.flat[:-1].copy()
    return PathSizeLogit(net_params, float(P["beta_ps"]), scale, True, hidden, report)


def write_choice_sets(path, network: RoadNetwork, choice_sets: Sequence[ChoiceSet]) -> None:
    """Trajectory CSV layout with an extra kappa column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "agent_id", "link_seq", "kappa"])
        for cs in choice_sets:
            o, d = cs.od
            for j, (p, kap) in enumerate(zip(cs.paths, cs.kappa)):
                w.writerow([f"{network.link_ids[o]}-{network.link_ids[d]}-{j}", "",
                            ";".join(network.link_ids[i] for i in p), repr(float(kap))])
