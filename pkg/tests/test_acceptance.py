"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark criteria (4, 5, 7, 8, 9) share one 8x8 world and one full
AIRL run, so the module takes tens of minutes on a single core.
"""

import math
import time

import numpy as np
import pytest

import benchmark as bm
import gradcheck
from routechoice.baselines import rl_fit, rl_solve_values
from routechoice.cli import main
from routechoice.evaluation import (
    bleu_metric, edit_distance_metric, jsd_metric, linear_value_fn, log_prob_metric, shapley_attribution,
    shapley_exact, shapley_mc,
)
from routechoice.mdp import make_trajectory, rollout_batch, synth_demonstrations, synth_grid_network, transition_features
from routechoice.models import discriminator_prob_and_reward, reward_inputs
from routechoice.network import N_DIR, FeatureBank, build_action_table, remove_link
from routechoice.training import airl_disc_loss, policy_fn
from test_baselines import random_rl_case
from test_network import chain


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def world():
    return bm.build_world()


@pytest.fixture(scope="module")
def full(world):
    return bm.run_airl(world)


@pytest.fixture(scope="module")
def full_report(world, full):
    return bm.evaluate(world, bm.model_prob_fn(world, full), world.bank())


@pytest.fixture(scope="module")
def uniform_report(world):
    return bm.evaluate(world, bm.uniform(world), world.bank())


def test_1_gradients(small, verdict):
    t0 = time.perf_counter()
    worst = gradcheck.worst_errors(small, n_instances=20)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and secs < 60
    verdict(1, ok, f"worst relative error {max(worst.values()):.2e} over {sorted(worst)}, {secs:.1f}s")


def test_2_metric_oracles(verdict):
    A, B, C, D = "ABCD"
    net = chain(4)
    act = build_action_table(net)
    traj = make_trajectory(act, [0, 1, 2, 3])

    def two_way(s, d, g):
        p = np.zeros((len(s), N_DIR))
        a = traj.actions[s]
        p[np.arange(len(s)), a] = 0.5
        p[np.arange(len(s)), (a + 4) % N_DIR] = 0.5
        return p

    certain = lambda s, d, g: np.eye(N_DIR)[traj.actions[s]]  # noqa: E731
    checks = {
        "ED identical": (edit_distance_metric([A, B, C], [[A, B, C]]), 0.0),
        "ED substitution": (edit_distance_metric([A, B, C], [[A, B, D]]), 1 / 3),
        "ED cap": (edit_distance_metric(list("xxxxxxxxx"), [list("abcde")]), 1.0),
        "BLEU identical": (bleu_metric([A, B, C, D], [[A, B, C, D]]), 1.0),
        "BLEU bigram": (bleu_metric([A, B, C], [[A, B, D]], n=2), math.sqrt(2 / 3 * 1 / 2)),
        "BLEU brevity": (bleu_metric(list("abcd"), [list("abcdefgh")]), 0.5),
        "JSD identical": (jsd_metric([[1], [2]], [[2], [1]]), 0.0),
        "JSD disjoint": (jsd_metric([[1]], [[2]]), 1.0),
        # sqrt((0.5 log2(2/3) + 0.5 log2 2 + log2(4/3)) / 2)
        "JSD half": (jsd_metric([[1], [2]], [[1]]),
                     math.sqrt((0.5 * math.log2(0.5 / 0.75) + 0.5 * math.log2(0.5 / 0.25) + math.log2(1 / 0.75)) / 2)),
        "LP certain": (log_prob_metric(certain, [traj])[0], 0.0),
        "LP uniform": (log_prob_metric(two_way, [traj])[0], 3 * math.log(0.5)),
    }
    bad = {k: v for k, v in checks.items() if abs(v[0] - v[1]) > 1e-9}
    ok = not bad and abs(checks["LP uniform"][0] + 2.0794) < 1e-4 and abs(checks["JSD half"][0] - 0.5579) < 1e-4
    verdict(2, ok, f"{len(checks) - len(bad)}/{len(checks)} examples within 1e-9" + (f", off: {bad}" if bad else ""))


def test_3_recursive_logit(verdict):
    gaps = []
    for seed in range(10):
        net, act, beta, dest = random_rl_case(seed)
        phi = transition_features(net, act, 100.0)
        lin = rl_solve_values(net, act, beta, dest, phi, method="linear")
        it = rl_solve_values(net, act, beta, dest, phi, method="iteration")
        fin = np.isfinite(it)
        same_support = np.array_equal(fin, np.isfinite(lin))
        gaps.append(np.max(np.abs(lin[fin] - it[fin])) if same_support else np.inf)
    net = synth_grid_network(8, 8, 100.0, seed=0)
    act = build_action_table(net)
    ds = synth_demonstrations(net, bm.BETA, 2000, seed=1, actions=act, length_scale=bm.ORACLE_SCALE)
    fit = rl_fit(ds, net, act)
    nz = np.flatnonzero(bm.BETA)
    signs = bool(np.all(np.sign(fit.coef[nz]) == np.sign(bm.BETA[nz])))
    order = bool(np.array_equal(np.argsort(fit.coef[nz]), np.argsort(bm.BETA[nz])))
    ok = max(gaps) < 1e-6 and signs and order
    verdict(3, ok, f"max |V_lin - V_iter| {max(gaps):.1e}; fitted {np.round(fit.coef[nz], 3).tolist()} "
                   f"vs generating {bm.BETA[nz].tolist()} signs={signs} order={order}")


def test_4_airl_end_to_end(world, full, full_report, uniform_report, verdict):
    bc = bm.run_bc(world)
    bc_report = bm.evaluate(world, bm.model_prob_fn(world, bc), world.bank())
    a, u, b = full_report, uniform_report, bc_report
    checks = {
        "completion>=0.95": full.final_completion >= 0.95,
        "ED 2x below uniform": 2 * a.ED < u.ED,
        "LP above uniform": a.LP > u.LP,
        "beats BC on ED": a.ED < b.ED,
        "beats BC on BLEU": a.BLEU > b.BLEU,
        "beats BC on JSD": a.JSD < b.JSD,
        "beats BC on LP": a.LP > b.LP,
        "runtime<=30min": full.seconds <= 1800,
        "not aborted": not full.aborted,
    }
    detail = (f"completion {full.final_completion:.3f}, {full.seconds / 60:.1f} min; "
              f"AIRL {fmt(a)}; uniform {fmt(u)}; BC(100) {fmt(b)}")
    failed = [k for k, v in checks.items() if not v]
    verdict(4, not failed, detail + (f"; failed {failed}" if failed else ""))


def test_5_destination_ablation(world, full, full_report, verdict):
    abl = bm.run_airl(world, use_context=False)
    rep = bm.evaluate(world, bm.model_prob_fn(world, abl), world.bank(False))
    ok = (full.final_completion >= 2 * abl.final_completion) and (rep.ED >= 2 * full_report.ED)
    verdict(5, ok, f"completion full {full.final_completion:.3f} vs ablated {abl.final_completion:.3f}; "
                   f"ED full {full_report.ED:.3f} vs ablated {rep.ED:.3f}")


def test_6_equilibrium(verdict):
    rng = np.random.default_rng(0)
    loss, _, _ = airl_disc_loss(np.zeros(64), np.zeros(64))
    f = rng.uniform(-30, 30, 10_000)
    pi = np.exp(rng.uniform(np.log(1e-12), 0, 10_000))
    _, R = discriminator_prob_and_reward(f, pi)
    gap = float(np.max(np.abs(R - (f - np.log(pi)))))
    ok = abs(loss - 2 * math.log(2)) <= 1e-9 and gap <= 1e-12
    verdict(6, ok, f"|L_D - 2 log 2| {abs(loss - 2 * math.log(2)):.1e}; max |R - (f - log pi)| {gap:.1e}")


def test_7_flow_assignment(world, full, verdict):
    bank = world.bank()
    fa = bm.sampled_flows(world, bm.model_prob_fn(world, full), bank)
    fu = bm.sampled_flows(world, bm.uniform(world), bank)
    norm = max(abs(p.sum() - 1.0) for p in fa.probs.values())
    assigned = sum(float(np.sum(fa.probs[od])) * q for od, q in fa.demand.items())
    demand = float(sum(fa.demand.values()))
    r2_airl, r2_unif = bm.flow_r2(world, fa), bm.flow_r2(world, fu)
    ok = norm <= 1e-12 and abs(assigned - demand) <= 1e-9 * demand and r2_airl > r2_unif
    verdict(7, ok, f"max |sum p - 1| {norm:.1e}; assigned {assigned:.6f} of {demand:.0f}; "
                   f"R2 AIRL {r2_airl:.3f} vs uniform {r2_unif:.3f}")


def test_8_counterfactual(world, full, verdict):
    net = world.network
    usage = np.bincount(np.concatenate([t.links for t in world.test]), minlength=net.n_links)
    closed = net.link_ids[int(np.argmax(usage))]
    new = remove_link(net, closed)
    new_act = build_action_table(new)
    old_bank, bank = world.bank(), FeatureBank(new, new_act, full.bundle.features)
    ods = []
    for t in world.test:
        o, d = net.link_ids[t.links[0]], net.link_ids[t.dest]
        if closed in (o, d):
            continue
        oi, di = new.link_index[o], new.link_index[d]
        if bank.reachable(di)[oi]:
            ods.append((oi, di))
    ods = np.array(ods)[np.arange(1000) % len(ods)]
    b = rollout_batch(policy_fn(full.bundle, bank), ods[:, 0], ods[:, 1], rng=np.random.default_rng(0), bank=bank)
    traversing = sum(closed in {new.link_ids[j] for j in t.links} for t in b.trajectories())
    old_ix = np.array([net.link_index[lid] for lid in new.link_ids])
    worse = 0
    for d in range(new.n_links):
        dn = bank.paths.tree(d).metrics[:, 0]
        do = old_bank.paths.tree(int(old_ix[d])).metrics[old_ix, 0]
        # pairs that became unreachable count as increased
        both = np.isfinite(do) & np.isfinite(dn)
        worse += int(np.sum(dn[both] < do[both] - 1e-9))
    ok = traversing == 0 and worse == 0
    verdict(8, ok, f"closed {closed}: {traversing} of {len(ods)} rollouts traverse it "
                   f"(completion {b.complete.mean():.3f}); {worse} shortest distances decreased")


def test_9_shapley(world, full, verdict):
    rng = np.random.default_rng(0)
    X, base = rng.normal(size=(3, 8)), rng.normal(size=8)

    def nonlinear(masks, idx):
        z = np.where(masks, X[idx], base)
        return z[:, 0] * z[:, 1] + np.tanh(z[:, 2] - z[:, 3]) + 0.5 * z[:, 4] ** 2 + z[:, 5:] @ [1.0, 2.0, 3.0]

    gap = float(np.max(np.abs(shapley_mc(nonlinear, 8, 3, 10_000, np.random.default_rng(1), chunk=500)
                              - shapley_exact(nonlinear, 8, 3))))
    w = rng.normal(size=8)
    lin = shapley_mc(linear_value_fn(w, X, base), 8, 3, 100, np.random.default_rng(2))
    lin_gap = float(np.max(np.abs(lin - w * (X - base))))

    bank = world.bank()
    s, a, d, g = world.test.triplets()
    pick = np.random.default_rng(0).permutation(len(s))[:200]
    att = shapley_attribution(full.bundle, reward_inputs(bank, s[pick], a[pick], d[pick], g[pick]),
                              reward_inputs(bank, s, a, d, g), permutations=100)
    top = att.ranking()[0]
    ok = gap <= 5e-2 and lin_gap <= 1e-12 and top == "shortest_distance"
    verdict(9, ok, f"MC vs exact {gap:.3f}; linear closed form {lin_gap:.1e}; "
                   f"top features {att.ranking()[:3]} mean|phi| {np.round(np.sort(att.mean_abs())[::-1][:3], 3).tolist()}")


def test_10_reproducibility(tmp_path, verdict):
    def run_all(root):
        data, r = root / "data", root / "run"
        assert main(["synth", "--rows", "4", "--cols", "4", "--trips", "60", "--min-hops", "3", "--seed", "5",
                     "--out", str(data)]) == 0
        assert main(["train", "--model", "airl", "--data", str(data), "--test-fraction", "0.25", "--seed", "5",
                     "--set", "iterations=3", "--set", "samples_per_iter=128", "--set", "ppo_epochs=1",
                     "--out", str(r)]) == 0
        for cmd in (["evaluate", "--seeds", "2"], ["flow"], ["attribute", "--samples", "10"],
                    ["counterfactual", "--close", "n1_1>n1_2", "--rollouts", "100"]):
            assert main([cmd[0], "--run", str(r), "--seed", "5", *cmd[1:]]) == 0
        out = {}
        for sub in (data, r):
            for p in sorted(sub.iterdir()):
                if p.is_file():
                    out[f"{sub.name}/{p.name}"] = p.read_bytes()
        return out

    first, second = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    # runs record their absolute data path, which differs between the two roots
    snap = "run/config.snapshot"
    strip = lambda b: b.replace(str(tmp_path / "a").encode(), b"").replace(str(tmp_path / "b").encode(), b"")  # noqa: E731
    same = [k for k in first if first[k] == second.get(k) or (k == snap and strip(first[k]) == strip(second[k]))]
    ok = len(same) == len(first) == len(second)
    verdict(10, ok, f"{len(same)}/{len(first)} output files byte-identical across reruns")


def fmt(rep) -> str:
    return f"ED {rep.ED:.3f} BLEU {rep.BLEU:.3f} JSD {rep.JSD:.3f} LP {rep.LP:.2f}"
