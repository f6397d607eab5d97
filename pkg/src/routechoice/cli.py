"""``routechoice`` command line: data preparation, training, evaluation and reports.

Every command writes into an output directory with fixed file names
(``config.snapshot``, ``checkpoint.*``, ``log.csv``, ``metrics.json``,
``flow.csv``) and derives all randomness from one ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .baselines import (
    ChoiceSetBuilder, LinearUtilityParams, PathSizeLogit, RecursiveLogit, psl_fit, rl_fit,
)
from .evaluation import (
    Prediction, evaluate_link_model, evaluate_predictions, flow_assignment, link_path_sampler, od_groups,
    r_squared, shapley_attribution,
)
from .mdp import (
    TRANSITION_FEATURE_NAMES, TrajectoryDataset, ingest_trajectories, make_trajectory, rollout_batch,
    synth_demonstrations, synth_grid_network, write_trajectories,
)
from .models import ModelBundle, load_bundle, reward_inputs, save_bundle
from .network import (
    FeatureBank, FeatureConfig, RoadNetwork, build_action_table, read_network, remove_link, write_network,
)
from .training import LOG_COLUMNS, TrainConfig, policy_fn, train_adversarial, train_bc

MODELS = ("airl", "gail", "bc", "rl", "psl", "dnnpsl")
NEURAL = ("airl", "gail", "bc")
DEFAULT_BETA = "-1,0,0,0,0,0,0,-0.5,-0.3,0"


class UsageError(ValueError):
    """Invalid command-line or configuration input, raised before any compute."""


# ---------------------------------------------------------------------------
# small file helpers

def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k in sorted(values):
            fh.write(f"{k}={values[k]}\n")


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# data loading and splits

def load_data(data_dir) -> tuple[RoadNetwork, object, TrajectoryDataset]:
    d = Path(data_dir)
    for name in ("nodes.csv", "links.csv", "trajectories.csv"):
        _require(d / name, "data file")
    snap = read_kv(d / "config.snapshot") if (d / "config.snapshot").exists() else {}
    net = read_network(d / "nodes.csv", d / "links.csv", allow_uturn=snap.get("allow_uturn", "1") == "1")
    act = build_action_table(net)
    ds, _ = ingest_trajectories(d / "trajectories.csv", net, act, min_links=1, drop_cyclic=False)
    return net, act, ds


def split_indices(dataset: TrajectoryDataset, seed: int, folds: int = 5, fold: int = 0,
                  test_fraction: float | None = None, unseen_dest: bool = False):
    """(train, test) trip indices: k-fold by trip, a random fraction, or grouped by destination."""
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if test_fraction is not None:
        if not 0 < test_fraction < 1:
            raise UsageError("test fraction must lie in (0, 1)")
        folds, fold = None, None
    elif folds < 2 or not 0 <= fold < folds:
        raise UsageError("need folds >= 2 and 0 <= fold < folds")
    if unseen_dest:
        dests = dataset.destinations()
        perm = rng.permutation(dests)
        if test_fraction is not None:
            held = set(perm[:max(1, int(round(test_fraction * len(perm))))].tolist())
        else:
            held = set(np.array_split(perm, folds)[fold].tolist())
        test = np.array([i for i, t in enumerate(dataset) if t.dest in held], dtype=np.int64)
    else:
        perm = rng.permutation(n)
        if test_fraction is not None:
            test = np.sort(perm[:max(1, int(round(test_fraction * n)))])
        else:
            test = np.sort(np.array_split(perm, folds)[fold])
    train = np.setdiff1d(np.arange(n), test)
    if not len(train) or not len(test):
        raise UsageError("split leaves an empty train or test set")
    return train, test


def read_split(run: Path) -> tuple[np.ndarray, np.ndarray]:
    train, test = [], []
    with open(_require(run / "split.csv", "split file"), newline="") as fh:
        for row in csv.DictReader(fh):
            (train if row["role"] == "train" else test).append(int(row["index"]))
    return np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)


# ---------------------------------------------------------------------------
# model loading

class LoadedModel:
    def __init__(self, run: Path):
        self.run = run
        self.snapshot = read_kv(_require(run / "config.snapshot", "run snapshot"))
        self.kind = self.snapshot.get("model")
        if self.kind not in MODELS:
            raise UsageError(f"{run}: unknown model kind {self.kind!r}")
        self.bundle: ModelBundle | None = None
        self.linear: LinearUtilityParams | None = None
        self.psl: PathSizeLogit | None = None
        if self.kind in NEURAL:
            _require(run / "checkpoint.params", "checkpoint")
            self.bundle = load_bundle(run / "checkpoint")
        elif self.kind == "rl":
            self.linear = LinearUtilityParams.read_csv(_require(run / "checkpoint.csv", "checkpoint"))
        else:
            self.psl = PathSizeLogit.read_csv(_require(run / "checkpoint.csv", "checkpoint"))

    @property
    def link_based(self) -> bool:
        return self.kind not in ("psl", "dnnpsl")

    def feature_config(self) -> FeatureConfig:
        if self.bundle is not None:
            return self.bundle.features
        return FeatureConfig(length_scale=float(self.snapshot.get("length_scale", 1000.0)))

    def bank(self, net, act) -> FeatureBank:
        bank = FeatureBank(net, act, self.feature_config())
        if self.bundle is not None and bank.base_dim != self.bundle.config.base_dim:
            raise UsageError(f"feature width {bank.base_dim} does not match manifest base_dim="
                            f"{self.bundle.config.base_dim} (use_context={int(self.bundle.features.use_context)})")
        return bank

    def prob_fn(self, net, act, bank):
        if self.bundle is not None:
            return policy_fn(self.bundle, bank)
        if self.linear is not None:
            return RecursiveLogit(net, act, self.linear, self.feature_config().length_scale).probs
        raise UsageError(f"{self.kind} is path-based and has no next-link probabilities")


def _psl_predictions(model: LoadedModel, builder: ChoiceSetBuilder, ods, seed: int) -> list[Prediction]:
    rng = np.random.default_rng(seed)
    out = []
    for od in ods:
        cs = builder(od)
        p = model.psl.probs(cs)
        j = int(rng.choice(len(cs), p=p))
        out.append(Prediction(cs.paths[j].copy(), True, float(np.log(p[j]))))
    return out


def _psl_sampler(model: LoadedModel, builder: ChoiceSetBuilder):
    def sample(ods, r, rng):
        out = []
        for od in ods:
            cs = builder(od)
            p = model.psl.probs(cs)
            picks = rng.choice(len(cs), size=r, p=p)
            out.append([(cs.paths[j].copy(), float(np.log(p[j])), True) for j in picks])
        return out
    return sample


def _agent_of(dataset, idx) -> int:
    a = dataset[idx].context.agent
    return -1 if a is None else a


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = _outdir(args.out)
    beta = np.array([float(x) for x in args.beta.split(",")])
    if beta.shape != (len(TRANSITION_FEATURE_NAMES),):
        raise UsageError(f"--beta needs {len(TRANSITION_FEATURE_NAMES)} values ({','.join(TRANSITION_FEATURE_NAMES)})")
    net = synth_grid_network(args.rows, args.cols, args.block, seed=args.seed, jitter=args.jitter)
    act = build_action_table(net)
    ds = synth_demonstrations(net, beta, args.trips, seed=args.seed + 1, actions=act, min_hops=args.min_hops,
                              length_scale=args.oracle_scale, n_agents=args.agents)
    write_network(net, out / "nodes.csv", out / "links.csv")
    write_trajectories(out / "trajectories.csv", net, ds.trajectories)
    with open(out / "beta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "coefficient"])
        for n, b in zip(TRANSITION_FEATURE_NAMES, beta):
            w.writerow([n, repr(float(b))])
    write_kv(out / "config.snapshot", {
        "command": "synth", "rows": args.rows, "cols": args.cols, "block": args.block, "jitter": args.jitter,
        "trips": args.trips, "beta": args.beta, "oracle_scale": args.oracle_scale, "min_hops": args.min_hops,
        "agents": args.agents, "seed": args.seed, "allow_uturn": 0,
    })
    print(f"synth trips={len(ds)} links={net.n_links} out={out}")
    return 0


def cmd_prepare(args) -> int:
    out = _outdir(args.out)
    for p in (args.nodes, args.links, args.trajectories):
        _require(Path(p), "input file")
    net = read_network(args.nodes, args.links, allow_uturn=not args.no_uturn)
    act = build_action_table(net)
    ds, report = ingest_trajectories(args.trajectories, net, act, min_links=args.min_links,
                                     drop_cyclic=not args.keep_cyclic)
    write_network(net, out / "nodes.csv", out / "links.csv")
    write_trajectories(out / "trajectories.csv", net, ds.trajectories)
    (out / "ingest_report.txt").write_text(report.text())
    write_kv(out / "config.snapshot", {
        "command": "prepare", "nodes": args.nodes, "links": args.links, "trajectories": args.trajectories,
        "min_links": args.min_links, "keep_cyclic": int(args.keep_cyclic), "allow_uturn": int(not args.no_uturn),
    })
    sys.stdout.write(report.text())
    return 0


def _train_config(args) -> TrainConfig:
    values = read_kv(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.setdefault("seed", str(args.seed))
    try:
        return TrainConfig.from_mapping(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc).strip("'\"")) from exc


def cmd_train(args) -> int:
    if args.model not in MODELS:
        raise UsageError(f"unknown model {args.model!r}")
    _require(Path(args.data), "data directory")
    cfg = _train_config(args)
    net, act, ds = load_data(args.data)
    train_idx, test_idx = split_indices(ds, args.seed, args.folds, args.fold, args.test_fraction, args.unseen_dest)
    if args.subset:
        train_idx = np.sort(np.random.default_rng(args.seed).permutation(train_idx)[:args.subset])
    train = ds.subset(train_idx)
    out = _outdir(args.out)
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "trip_id", "role"])
        roles = {int(i): "train" for i in train_idx} | {int(i): "test" for i in test_idx}
        for i in sorted(roles):
            w.writerow([i, ds[i].trip_id, roles[i]])
    snapshot = {
        "command": "train", "model": args.model, "data": str(Path(args.data).resolve()), "seed": args.seed,
        "folds": args.folds, "fold": args.fold, "test_fraction": args.test_fraction,
        "unseen_dest": int(args.unseen_dest), "subset": args.subset or 0, "use_context": int(not args.no_context),
        "length_scale": args.length_scale,
    }
    snapshot.update({f"train.{k}": v for k, v in read_kv_text(cfg.as_text()).items()})
    write_kv(out / "config.snapshot", snapshot)

    features = FeatureConfig(length_scale=args.length_scale, use_context=not args.no_context)
    if args.model in NEURAL:
        bank = FeatureBank(net, act, features)
        rows = []
        with open(out / "log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = LOG_COLUMNS if args.model != "bc" else ("epoch", "loss")
            w.writerow(cols)

            def log_row(row):
                rows.append(row)
                w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
                fh.flush()

            if args.model == "bc":
                bundle, _ = train_bc(cfg, train, bank, log_row)
            else:
                bundle, _ = train_adversarial(cfg, train, bank, args.model, log_row)
        save_bundle(bundle, out / "checkpoint")
        last = rows[-1]
        print("train " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))
    elif args.model == "rl":
        params = rl_fit(train, net, act, length_scale=args.length_scale)
        params.write_csv(out / "checkpoint.csv")
        write_rows(out / "log.csv", ("loglik", "loglik_null"), [{"loglik": params.loglik, "loglik_null": params.loglik0}])
        print(f"train loglik={params.loglik:.6g} loglik_null={params.loglik0:.6g}")
    else:
        model = psl_fit(train, net, act, dnn_utility=args.model == "dnnpsl", seed=cfg.seed)
        model.write_csv(out / "checkpoint.csv")
        write_rows(out / "log.csv", ("cross_entropy", "skipped_od"), [model.report])
        print(f"train cross_entropy={model.report['cross_entropy']:.6g} skipped_od={model.report['skipped_od']}")
    return 0


def read_kv_text(text: str) -> dict:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def _run_context(args):
    run = Path(args.run)
    model = LoadedModel(run)
    net, act, ds = load_data(model.snapshot["data"])
    _, test_idx = read_split(run)
    return run, model, net, act, ds, ds.subset(test_idx)


def cmd_evaluate(args) -> int:
    run, model, net, act, ds, test = _run_context(args)
    seeds = [args.seed + k for k in range(args.seeds)]
    if model.link_based:
        bank = model.bank(net, act)
        rep = evaluate_link_model(model.prob_fn(net, act, bank), bank, test, seeds, network=net)
    else:
        builder = ChoiceSetBuilder(net, act)
        ods = [od for od, _ in od_groups(test)]
        preds = [_psl_predictions(model, builder, ods, s) for s in seeds]
        rep = evaluate_predictions(test, preds, None, network=net)
    rep.to_json(run / "metrics.json")
    rep.to_csv(run / "metrics.csv")
    print("evaluate " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in rep.summary().items()))
    return 0


def cmd_flow(args) -> int:
    run, model, net, act, ds, test = _run_context(args)
    demand = Counter(t.od for t in test)
    observed = np.zeros(net.n_links)
    for t in test:
        np.add.at(observed, t.links, 1.0)
    if model.link_based:
        bank = model.bank(net, act)
        agents = {t.od: _agent_of(test, i) for i, t in enumerate(test)}
        sampler = link_path_sampler(model.prob_fn(net, act, bank), bank, agents)
        shortest = lambda o, d: bank.paths.tree(d).path(o)
    else:
        builder = ChoiceSetBuilder(net, act)
        sampler = _psl_sampler(model, builder)
        shortest = lambda o, d: builder((o, d)).paths[0]
    fa = flow_assignment(sampler, dict(demand), net.n_links, r=args.r, seed=args.seed, shortest_path=shortest)
    fa.r2 = r_squared(fa.flow, observed)
    with open(run / "flow.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "flow", "observed"])
        for i in range(net.n_links):
            w.writerow([net.link_ids[i], repr(float(fa.flow[i])), repr(float(observed[i]))])
    (run / "flow_summary.txt").write_text(fa.summary_line() + "\n")
    print("flow " + fa.summary_line())
    return 0


def cmd_attribute(args) -> int:
    run, model, net, act, ds, test = _run_context(args)
    if model.bundle is None or model.bundle.g is None:
        raise UsageError(f"attribution needs a learned reward; model kind is {model.kind}")
    bank = model.bank(net, act)
    s, a, d, g = test.triplets()
    rng = np.random.default_rng(args.seed)
    pick = np.sort(rng.permutation(len(s))[:args.samples])
    inp = reward_inputs(bank, s[pick], a[pick], d[pick], g[pick])
    base = reward_inputs(bank, s, a, d, g)
    att = shapley_attribution(model.bundle, inp, base, permutations=args.permutations, seed=args.seed)
    att.write_csv(run / "attribution.csv")
    print("attribute ranking=" + ",".join(att.ranking()[:5]))
    return 0


def cmd_counterfactual(args) -> int:
    run, model, net, act, ds, test = _run_context(args)
    closed = list(dict.fromkeys(args.close))
    new = net
    for lid in closed:
        if lid not in new.link_index:
            raise UsageError(f"unknown link {lid!r}")
        new = remove_link(new, lid)
    new_act = build_action_table(new)
    old_bank = FeatureBank(net, act, model.feature_config())
    bank = model.bank(new, new_act)
    # test trips re-indexed on the edited network; trips over closed links keep only their OD
    ods, kept = [], []
    for t in test:
        o, d = net.link_ids[t.links[0]], net.link_ids[t.dest]
        if o in closed or d in closed:
            continue
        oi, di = new.link_index[o], new.link_index[d]
        if not bank.reachable(di)[oi]:
            continue
        ods.append((oi, di, t.links[0], t.dest))
        if not set(closed) & {net.link_ids[j] for j in t.links}:
            kept.append(make_trajectory(new_act, [new.link_index[net.link_ids[j]] for j in t.links],
                                        agent=t.context.agent, trip_id=t.trip_id))
    if not ods:
        raise UsageError("no test OD pair remains connected after closing the links")
    rng = np.random.default_rng(args.seed)
    pick = np.arange(args.rollouts) % len(ods)
    od_arr = np.array([(o, d) for o, d, _, _ in ods], dtype=np.int64)[pick]
    if model.link_based:
        b = rollout_batch(model.prob_fn(new, new_act, bank), od_arr[:, 0], od_arr[:, 1], rng=rng, bank=bank)
        routes = [t.links for t in b.trajectories()]
        complete = b.complete
    else:
        builder = ChoiceSetBuilder(new, new_act)
        preds = _psl_predictions(model, builder, [tuple(x) for x in od_arr], args.seed)
        routes = [p.links for p in preds]
        complete = np.ones(len(preds), dtype=bool)
    closed_new = {lid for lid in closed}
    traverse = sum(any(new.link_ids[j] in closed_new for j in r) for r in routes)
    d_old = np.array([old_bank.paths.tree(int(d)).metrics[int(o), 0] for _, _, o, d in ods])
    d_new = np.array([bank.paths.tree(int(d)).metrics[int(o), 0] for o, d, _, _ in ods])
    summary = {
        "closed": closed, "rollouts": int(len(routes)), "completion_rate": float(np.mean(complete)),
        "traversing_closed": int(traverse), "n_od": len(ods),
        "shortest_distance_increase_mean": float(np.mean(d_new - d_old)),
        "shortest_distance_decreased": int(np.sum(d_new < d_old - 1e-9)),
    }
    if kept and model.link_based:
        rep = evaluate_link_model(model.prob_fn(new, new_act, bank), bank, TrajectoryDataset(kept, ds.agents),
                                  [args.seed], network=new)
        summary["metrics"] = rep.summary()
    with open(run / "counterfactual.json", "w") as fh:
        fh.write(json.dumps(summary, indent=2) + "\n")
    with open(run / "counterfactual_trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "agent_id", "link_seq", "complete"])
        for i, (r, c) in enumerate(zip(routes, complete)):
            w.writerow([i, "", ";".join(new.link_ids[j] for j in r), int(c)])
    print(f"counterfactual rollouts={summary['rollouts']} traversing_closed={traverse} "
          f"completion_rate={summary['completion_rate']:.6g}")
    return 0


def cmd_report(args) -> int:
    from . import plots

    run = Path(args.run)
    _require(run / "config.snapshot", "run snapshot")
    fig_dir = _outdir(run / "figures")
    lines = [("section", "key", "value")]
    if (run / "log.csv").exists():
        with open(run / "log.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) > 1:
            lines.append(("figure", "training", plots.training_curves(rows, fig_dir / "training.png")))
        for k, v in rows[-1].items():
            lines.append(("log_last", k, v))
    if (run / "metrics.json").exists():
        m = json.loads((run / "metrics.json").read_text())
        for k in ("ED", "BLEU", "JSD", "LP"):
            if k in m:
                lines.append(("metrics", k, repr(m[k])))
        lines.append(("figure", "metrics", plots.metric_bars(m, fig_dir / "metrics.png")))
    if (run / "flow.csv").exists():
        with open(run / "flow.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        pred = np.array([float(r["flow"]) for r in rows])
        obs = np.array([float(r["observed"]) for r in rows])
        r2 = r_squared(pred, obs)
        lines.append(("flow", "r2", repr(r2)))
        lines.append(("figure", "flow", plots.flow_scatter(pred, obs, fig_dir / "flow.png", r2)))
    if (run / "attribution.csv").exists():
        with open(run / "attribution.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            lines.append(("attribution", r["feature"], r["mean_abs_shap"]))
        lines.append(("figure", "attribution", plots.attribution_bars(
            [r["feature"] for r in rows], [float(r["mean_abs_shap"]) for r in rows], fig_dir / "attribution.png")))
    with open(run / "report.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(lines)
    w = csv.writer(sys.stdout)
    w.writerows(lines)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="routechoice", description="Link-based route choice modelling")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthetic grid network and oracle demonstrations")
    s.add_argument("--rows", type=int, default=8)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--block", type=float, default=100.0, help="block length in metres")
    s.add_argument("--jitter", type=float, default=0.1)
    s.add_argument("--trips", type=int, default=2000)
    s.add_argument("--beta", default=DEFAULT_BETA, help="comma list: " + ",".join(TRANSITION_FEATURE_NAMES))
    s.add_argument("--oracle-scale", type=float, default=2.0, help="metres per unit of the oracle length feature")
    s.add_argument("--min-hops", type=int, default=5)
    s.add_argument("--agents", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="ingest and filter raw network and trajectory files")
    s.add_argument("--nodes", required=True)
    s.add_argument("--links", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--min-links", type=int, default=15)
    s.add_argument("--keep-cyclic", action="store_true")
    s.add_argument("--no-uturn", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="fit a model on the training split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, choices=MODELS)
    s.add_argument("--config", help="key=value training options file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one training option")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--test-fraction", type=float)
    s.add_argument("--unseen-dest", action="store_true", help="split by destination")
    s.add_argument("--subset", type=int, default=0, help="train on this many randomly chosen training trips")
    s.add_argument("--no-context", action="store_true", help="drop destination features (ablation)")
    s.add_argument("--length-scale", type=float, default=1000.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "ED / BLEU / JSD / LP on the test split"),
        ("flow", cmd_flow, "simulated link flow assignment of the test demand"),
        ("attribute", cmd_attribute, "Shapley attribution of the learned reward"),
        ("counterfactual", cmd_counterfactual, "rerun predictions with links closed"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--run", required=True)
        s.add_argument("--seed", type=int, default=0)
        if name == "evaluate":
            s.add_argument("--seeds", type=int, default=1)
        if name == "flow":
            s.add_argument("--r", type=int, default=5)
        if name == "attribute":
            s.add_argument("--samples", type=int, default=500)
            s.add_argument("--permutations", type=int, default=100)
        if name == "counterfactual":
            s.add_argument("--close", action="append", required=True, metavar="LINK_ID")
            s.add_argument("--rollouts", type=int, default=1000)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="figures and a delimited summary of a run directory")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parsable line per failure
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else ""
        print(f"error {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
