"""Trajectory metrics, simulated flow assignment and Shapley attribution."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import Trajectory, TrajectoryDataset, rollout_batch
from .network import INVALID, N_DIR, FeatureBank, RoadNetwork

LP_FLOOR = -20.0


# ---------------------------------------------------------------------------
# sequence metrics

def levenshtein(a: Sequence, b: Sequence) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_distance_metric(predicted: Sequence, references: Sequence[Sequence], complete: bool = True) -> float:
    """Best normalized edit distance over references, capped at 1; incomplete predictions score 1."""
    if not len(references):
        raise ValueError("empty reference set")
    if not complete:
        return 1.0
    return min(min(levenshtein(predicted, r) / len(r), 1.0) for r in references)


def _ngrams(seq: Sequence, n: int) -> Counter:
    seq = tuple(seq)
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def bleu_metric(predicted: Sequence, references: Sequence[Sequence], n: int = 4) -> float:
    """Clipped n-gram precision geometric mean times min(1, T / T_ref), closest reference length."""
    if not len(predicted):
        raise ValueError("empty prediction")
    if not len(references):
        raise ValueError("empty reference set")
    T = len(predicted)
    n = min(n, T)
    logs = []
    for j in range(1, n + 1):
        grams = _ngrams(predicted, j)
        cap: Counter = Counter()
        for r in references:
            for g, c in _ngrams(r, j).items():
                cap[g] = max(cap[g], c)
        hit = sum(min(c, cap[g]) for g, c in grams.items())
        if hit == 0:
            return 0.0
        logs.append(math.log(hit / sum(grams.values())))
    t_ref = min((len(r) for r in references), key=lambda L: (abs(L - T), L))
    return min(1.0, T / t_ref) * math.exp(sum(logs) / n)


def jsd_metric(observed: Sequence[Sequence], predicted: Sequence[Sequence],
               predicted_weights: Sequence[float] | None = None) -> float:
    """Jensen-Shannon distance (base 2) between route frequency distributions.

    Predicted routes never observed share one "unseen" bucket.
    """
    if not len(observed) or not len(predicted):
        raise ValueError("both route sets must be non-empty")
    obs = Counter(tuple(r) for r in observed)
    w = np.ones(len(predicted)) if predicted_weights is None else np.asarray(predicted_weights, dtype=float)
    pred: dict = {}
    for r, wi in zip(predicted, w):
        key = tuple(r) if tuple(r) in obs else "__unseen__"
        pred[key] = pred.get(key, 0.0) + wi
    keys = list(obs) + (["__unseen__"] if "__unseen__" in pred else [])
    p = np.array([obs.get(k, 0) for k in keys], dtype=float)
    q = np.array([pred.get(k, 0.0) for k in keys], dtype=float)
    p, q = p / p.sum(), q / q.sum()
    return js_distance(p, q)


def js_distance(p: np.ndarray, q: np.ndarray) -> float:
    m = (p + q) / 2

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return math.sqrt(max(0.0, (kl(p) + kl(q)) / 2))


ProbFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def log_prob_metric(prob_fn: ProbFn, test: TrajectoryDataset | Sequence[Trajectory]) -> tuple[float, int]:
    """Mean over trajectories of the summed log next-step probability.

    ``prob_fn(links, dests, agents)`` returns (B, 8) direction probabilities.
    Zero-probability transitions are floored at exp(-20); their count is returned.
    """
    trajs = list(test)
    if not trajs:
        raise ValueError("empty test set")
    s, a, d, g, owner = [], [], [], [], []
    for i, t in enumerate(trajs):
        n = len(t.actions)
        s.append(t.links[:n])
        a.append(t.actions)
        d.append(np.full(n, t.dest))
        g.append(np.full(n, -1 if t.context.agent is None else t.context.agent))
        owner.append(np.full(n, i))
    s, a, d, g, owner = (np.concatenate(x).astype(np.int64) for x in (s, a, d, g, owner))
    if len(s) == 0:
        return 0.0, 0
    p = prob_fn(s, d, g)[np.arange(len(s)), a]
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    floored = int(np.sum(lp < LP_FLOOR))
    lp = np.maximum(lp, LP_FLOOR)
    per = np.bincount(owner, weights=lp, minlength=len(trajs))
    return float(per.mean()), floored


def uniform_prob_fn(bank: FeatureBank) -> ProbFn:
    """Uniform over valid actions whose successor can still reach the destination."""
    def fn(links, dests, agents=None):
        m = bank.masks(links, dests).astype(float)
        return m / np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return fn


# ---------------------------------------------------------------------------
# model-level evaluation

@dataclass
class Prediction:
    links: np.ndarray
    complete: bool
    logp: float = 0.0


@dataclass
class MetricsReport:
    ED: float
    BLEU: float
    JSD: float
    LP: float | None = None
    n_od: int = 0
    n_predictions: int = 0
    n_incomplete: int = 0
    n_lp_floored: int = 0
    per_od: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"ED": self.ED, "BLEU": self.BLEU, "JSD": self.JSD}
        if self.LP is not None:
            out["LP"] = self.LP
        out.update(n_od=self.n_od, n_predictions=self.n_predictions, n_incomplete=self.n_incomplete)
        if self.LP is not None:
            out["n_lp_floored"] = self.n_lp_floored
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps({**self.summary(), "per_od": self.per_od}, indent=2, sort_keys=False)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["origin", "dest", "n_refs", "ED", "BLEU"])
            for row in self.per_od:
                w.writerow([row["origin"], row["dest"], row["n_refs"], repr(row["ED"]), repr(row["BLEU"])])


def od_groups(test: TrajectoryDataset) -> list[tuple[tuple[int, int], list[int]]]:
    return sorted(test.od_index().items())


def predict_link_model(prob_fn: ProbFn, bank: FeatureBank, ods: np.ndarray, agents: np.ndarray | None = None,
                       seed: int = 0, max_steps=None) -> list[Prediction]:
    """One sampled rollout per OD row."""
    ods = np.asarray(ods, dtype=np.int64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    b = rollout_batch(prob_fn, ods[:, 0], ods[:, 1], agents, max_steps=max_steps, rng=rng, bank=bank)
    out = []
    for i in range(len(ods)):
        n = b.lengths[i]
        out.append(Prediction(b.links[i, :n + 1].copy(), bool(b.complete[i]), float(b.logp[i, :n].sum())))
    return out


def evaluate_predictions(test: TrajectoryDataset, predictions: Sequence[Sequence[Prediction]],
                         lp: tuple[float, int] | None = None, network: RoadNetwork | None = None) -> MetricsReport:
    """Score predictions against test trips.

    ``predictions[k][i]`` is seed k's prediction for the i-th OD group of
    ``od_groups(test)``. ED and BLEU average over every (seed, group); the
    predicted route distribution weights each prediction by its group's trip
    count so it mirrors the observed OD composition.
    """
    groups = od_groups(test)
    eds, bleus, pred_routes, weights, per_od = [], [], [], [], []
    incomplete = 0
    for gi, (od, idx) in enumerate(groups):
        refs = [test[i].links.tolist() for i in idx]
        ged, gbl = [], []
        for seed_preds in predictions:
            p = seed_preds[gi]
            seq = p.links.tolist()
            incomplete += not p.complete
            ged.append(edit_distance_metric(seq, refs, p.complete))
            gbl.append(bleu_metric(seq, refs) if p.complete else 0.0)
            pred_routes.append(seq if p.complete else ("__incomplete__", gi))
            weights.append(len(idx))
        eds += ged
        bleus += gbl
        name = (lambda j: network.link_ids[j]) if network is not None else int
        per_od.append({"origin": name(od[0]), "dest": name(od[1]), "n_refs": len(idx),
                       "ED": float(np.mean(ged)), "BLEU": float(np.mean(gbl))})
    observed = [t.links.tolist() for t in test]
    rep = MetricsReport(
        ED=float(np.mean(eds)), BLEU=float(np.mean(bleus)),
        JSD=jsd_metric(observed, pred_routes, weights),
        n_od=len(groups), n_predictions=len(eds), n_incomplete=incomplete, per_od=per_od,
    )
    if lp is not None:
        rep.LP, rep.n_lp_floored = lp
    return rep


def evaluate_link_model(prob_fn: ProbFn, bank: FeatureBank, test: TrajectoryDataset, seeds: Sequence[int] = (0,),
                        network: RoadNetwork | None = None) -> MetricsReport:
    groups = od_groups(test)
    ods = np.array([od for od, _ in groups], dtype=np.int64)
    ag = np.array([-1 if test[idx[0]].context.agent is None else test[idx[0]].context.agent
                   for _, idx in groups], dtype=np.int64)
    preds = [predict_link_model(prob_fn, bank, ods, ag, seed=s) for s in seeds]
    return evaluate_predictions(test, preds, log_prob_metric(prob_fn, test), network)


# ---------------------------------------------------------------------------
# flow assignment

PathSampler = Callable[[np.ndarray, int, np.random.Generator], list]


@dataclass
class FlowAssignment:
    flow: np.ndarray                    # per-link expected flow
    demand: dict                        # (o, d) -> demand
    paths: dict                         # (o, d) -> list of link arrays
    probs: dict                         # (o, d) -> normalized probabilities
    fallback: list = field(default_factory=list)    # ODs assigned to the shortest path
    r2: float | None = None

    def write_csv(self, path, network: RoadNetwork) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["link_id", "flow"])
            for i, f in enumerate(self.flow):
                w.writerow([network.link_ids[i], repr(float(f))])

    def summary_line(self) -> str:
        r2 = "nan" if self.r2 is None else repr(self.r2)
        return f"r2={r2} n_od={len(self.demand)} fallback={len(self.fallback)}"


def link_path_sampler(prob_fn: ProbFn, bank: FeatureBank, agents: dict | None = None) -> PathSampler:
    """Rollouts of a link-based model; returns per OD a list of (links, logp, complete)."""
    def sample(ods: np.ndarray, r: int, rng: np.random.Generator):
        rep = np.repeat(ods, r, axis=0)
        ag = None if agents is None else np.array([agents.get((int(o), int(d)), -1) for o, d in rep])
        b = rollout_batch(prob_fn, rep[:, 0], rep[:, 1], ag, rng=rng, bank=bank)
        out = []
        for i in range(len(ods)):
            row = []
            for k in range(i * r, (i + 1) * r):
                n = b.lengths[k]
                row.append((b.links[k, :n + 1].copy(), float(b.logp[k, :n].sum()), bool(b.complete[k])))
            out.append(row)
        return out
    return sample


def flow_assignment(sampler: PathSampler, od_demand: dict, n_links: int, r: int = 5, seed: int = 0,
                    shortest_path: Callable[[int, int], Sequence[int]] | None = None,
                    retries: int = 3) -> FlowAssignment:
    """Draw r paths per OD, weight them by normalized path probability and load the demand."""
    if any(v < 0 for v in od_demand.values()):
        raise ValueError("demands must be non-negative")
    rng = np.random.default_rng(seed)
    ods = sorted(od_demand)
    flow = np.zeros(n_links)
    paths, probs, fallback = {}, {}, []
    pending = list(ods)
    drawn = {od: [] for od in ods}
    for _ in range(retries + 1):
        if not pending:
            break
        res = sampler(np.array(pending, dtype=np.int64).reshape(-1, 2), r, rng)
        nxt = []
        for od, row in zip(pending, res):
            ok = [(p, lp) for p, lp, c in row if c]
            if ok:
                drawn[od] = ok
            else:
                nxt.append(od)
        pending = nxt
    for od in ods:
        ok = drawn[od]
        if not ok:
            if shortest_path is None:
                raise ValueError(f"no complete path sampled for OD {od}")
            fallback.append(od)
            ok = [(np.asarray(shortest_path(*od)), 0.0)]
        lps = np.array([lp for _, lp in ok])
        w = np.exp(lps - lps.max())
        w /= w.sum()
        paths[od] = [p for p, _ in ok]
        probs[od] = w
        for p, wi in zip(paths[od], w):
            np.add.at(flow, p, wi * od_demand[od])
    return FlowAssignment(flow, dict(od_demand), paths, probs, fallback)


def exact_link_flows(policy_for_dest: Callable[[int], np.ndarray], succ: np.ndarray, od_demand: dict) -> np.ndarray:
    """Expected link visits under a stochastic link policy, by a linear solve per destination.

    ``policy_for_dest(d)`` returns the (n, 8) direction probabilities towards d.
    """
    n = succ.shape[0]
    flow = np.zeros(n)
    by_dest: dict[int, np.ndarray] = {}
    for (o, d), q in od_demand.items():
        by_dest.setdefault(int(d), np.zeros(n))[int(o)] += q
    ok = succ != INVALID
    rows = np.nonzero(ok)[0]
    for d, b in sorted(by_dest.items()):
        pol = policy_for_dest(d)
        P = np.zeros((n, n))
        np.add.at(P, (rows, succ[ok]), pol[ok])
        P[d] = 0.0
        flow += np.linalg.solve(np.eye(n) - P.T, b)
    return flow


def r_squared(predicted: np.ndarray, observed: np.ndarray) -> float:
    predicted, observed = np.asarray(predicted, float), np.asarray(observed, float)
    ss_res = np.sum((observed - predicted) ** 2)
    ss_tot = np.sum((observed - observed.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan")


# ---------------------------------------------------------------------------
# Shapley attribution

ValueFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def shapley_mc(value_fn: ValueFn, n_features: int, n_samples: int, permutations: int = 100,
               rng: np.random.Generator | None = None, chunk: int = 64) -> np.ndarray:
    """Permutation-sampling Shapley values, (n_samples, n_features).

    ``value_fn(masks, idx)`` evaluates the model on sample ``idx[m]`` with
    features where ``masks[m]`` is False replaced by the baseline.
    """
    rng = rng or np.random.default_rng(0)
    p, N = n_features, n_samples
    phi = np.zeros((N, p))
    done = 0
    while done < permutations:
        k = min(chunk, permutations - done)
        perms = np.array([rng.permutation(p) for _ in range(k)])          # (k, p)
        # mask after adding the first j features of each permutation, j = 0..p
        masks = np.zeros((k, p + 1, p), dtype=bool)
        for j in range(1, p + 1):
            masks[:, j] = masks[:, j - 1]
            masks[np.arange(k), j, perms[:, j - 1]] = True
        M = np.broadcast_to(masks[None], (N, k, p + 1, p)).reshape(-1, p)
        idx = np.repeat(np.arange(N), k * (p + 1))
        v = value_fn(M, idx).reshape(N, k, p + 1)
        delta = np.diff(v, axis=2)                                         # (N, k, p)
        for j in range(p):
            np.add.at(phi.T, perms[:, j], delta[:, :, j].T)
        done += k
    return phi / permutations


def shapley_exact(value_fn: ValueFn, n_features: int, n_samples: int) -> np.ndarray:
    """Exact Shapley values by enumerating all 2^p coalitions."""
    p, N = n_features, n_samples
    subsets = np.array([[(s >> i) & 1 for i in range(p)] for s in range(2 ** p)], dtype=bool)
    M = np.broadcast_to(subsets[None], (N, 2 ** p, p)).reshape(-1, p)
    idx = np.repeat(np.arange(N), 2 ** p)
    v = value_fn(M, idx).reshape(N, 2 ** p)
    size = subsets.sum(axis=1)
    weight = np.array([math.factorial(k) * math.factorial(p - k - 1) / math.factorial(p) if k < p else 0.0
                       for k in range(p + 1)])
    phi = np.zeros((N, p))
    for i in range(p):
        without = np.flatnonzero(~subsets[:, i])
        with_i = without | (1 << i)
        phi[:, i] = (v[:, with_i] - v[:, without]) @ weight[size[without]]
    return phi


def linear_value_fn(w: np.ndarray, X: np.ndarray, baseline: np.ndarray) -> ValueFn:
    w, X, baseline = (np.asarray(a, dtype=float) for a in (w, X, baseline))

    def fn(masks, idx):
        return np.where(masks, X[idx], baseline) @ w
    return fn


@dataclass
class Attribution:
    names: tuple
    values: np.ndarray              # (n_samples, n_features)

    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)

    def ranking(self) -> list[str]:
        return [self.names[i] for i in np.argsort(-self.mean_abs(), kind="stable")]

    def write_csv(self, path, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)) -> None:
        q = np.quantile(self.values, quantiles, axis=0)
        order = np.argsort(-self.mean_abs(), kind="stable")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "mean_abs_shap", *(f"q{int(x * 100):02d}" for x in quantiles)])
            for i in order:
                w.writerow([self.names[i], repr(float(self.mean_abs()[i])), *(repr(float(v)) for v in q[:, i])])


def reward_value_fn(bundle, inputs, baseline_inputs=None) -> tuple[ValueFn, tuple]:
    """Adapter from the AIRL f(s, a, s') to a masked value function.

    Features are the [F_s; F_c] channels (masked jointly in the grid and in
    the h inputs) plus the action one-hot. The baseline is the mean of
    ``baseline_inputs`` (default: ``inputs``) per channel and grid cell.
    """
    from .models import discriminator_f, RewardInputs

    base = inputs if baseline_inputs is None else baseline_inputs
    C = bundle.config.base_dim
    names = tuple(bundle.features.feature_names()) + ("action",)
    mean_grid = base.grids.mean(axis=0)
    mean_feat = base.feats.mean(axis=0)
    mean_next = base.next_feats.mean(axis=0)
    mean_act = np.eye(N_DIR)[base.actions].mean(axis=0)
    onehot = np.eye(N_DIR)[inputs.actions]

    def fn(masks, idx):
        keep = masks[:, :C]
        grids = inputs.grids[idx].copy()
        grids[..., :C] = np.where(keep[:, None, None, :], grids[..., :C], mean_grid[None, ..., :C])
        feats = np.where(keep, inputs.feats[idx], mean_feat)
        nxt = np.where(keep, inputs.next_feats[idx], mean_next)
        act = np.where(masks[:, C:C + 1], onehot[idx], mean_act)
        inp = RewardInputs(grids, act, feats, nxt, inputs.terminal[idx], inputs.agents[idx])
        out = np.empty(len(idx))
        for a in range(0, len(idx), 8192):
            sl = slice(a, a + 8192)
            out[sl] = discriminator_f(bundle, inp.take(sl))[0]
        return out

    return fn, names


def shapley_attribution(bundle, inputs, baseline_inputs=None, permutations: int = 100, seed: int = 0) -> Attribution:
    if permutations < 100:
        raise ValueError("use at least 100 permutations")
    fn, names = reward_value_fn(bundle, inputs, baseline_inputs)
    phi = shapley_mc(fn, len(names), len(inputs.actions), permutations, np.random.default_rng(seed))
    return Attribution(names, phi)


def local_reward_map(bundle, bank: FeatureBank, link: int, dest: int, agent: int = -1) -> dict:
    """f for every valid move out of ``link`` and the state value, for inspection."""
    from .models import reward_inputs, discriminator_f, value_forward

    ok = np.flatnonzero(bank.masks(np.array([link]), np.array([dest]))[0])
    out = {"value": float(value_forward(bundle, bank.features(np.array([link]), np.array([dest])),
                                        np.array([agent]))[0]) if bundle.value is not None else None}
    if len(ok) and bundle.g is not None:
        inp = reward_inputs(bank, np.full(len(ok), link), ok, np.full(len(ok), dest), np.full(len(ok), agent))
        f = discriminator_f(bundle, inp)[0]
        out["reward"] = {int(a): float(v) for a, v in zip(ok, f)}
    return out
