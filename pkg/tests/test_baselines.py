import numpy as np
import pytest

from benchmark import BETA, ORACLE_SCALE
from routechoice.baselines import (
    ChoiceSet, ChoiceSetBuilder, LinearUtilityParams, PathSizeLogit, RecursiveLogit, ksp_choice_set,
    match_trajectory, path_features, path_size_term, path_size_terms, psl_cross_entropy, psl_fit, psl_prob,
    psl_targets, rl_fit, rl_loglik, rl_next_prob, rl_next_probs, rl_solve_values, rl_values_batch,
    write_choice_sets,
)
from routechoice.mdp import (
    TRANSITION_FEATURE_NAMES, TrajectoryDataset, make_trajectory, synth_demonstrations, synth_grid_network,
    transition_features,
)
from routechoice.network import INVALID, N_DIR, NetworkError, UnreachableError, build_action_table, load_network
from test_mdp import diamond
from test_network import chain


def unit_features(actions):
    phi = np.zeros(actions.succ.shape + (1,))
    phi[actions.succ != INVALID] = 1.0
    return phi


def corner_square():
    """Unit square entered at one corner and left at the opposite one; no u-turns, no jitter."""
    nodes = [("x", -100, -100), ("a", 0, 0), ("b", 100, 0), ("c", 100, 100), ("d", 0, 100), ("y", 200, 200)]
    links = [("xa", "x", "a", 141.0, "primary"), ("cy", "c", "y", 141.0, "primary")]
    for u, v in [("a", "b"), ("b", "c"), ("c", "d"), ("d", "a")]:
        links += [(u + v, u, v, 100.0, "primary"), (v + u, v, u, 100.0, "primary")]
    return load_network(nodes, links, allow_uturn=False)


def random_rl_case(seed):
    rng = np.random.default_rng(seed)
    net = synth_grid_network(5, 5, 100.0, seed=seed)
    act = build_action_table(net)
    beta = np.concatenate([[rng.uniform(-3, -1)], rng.uniform(-0.3, 0.3, 9)])
    return net, act, beta, int(rng.integers(net.n_links))


class TestRecursiveLogitValues:
    def test_chain(self):
        net = chain(5)
        act = build_action_table(net)
        V = rl_solve_values(net, act, [-1.0], 4, unit_features(act), method="linear")
        assert np.allclose(V, [-4, -3, -2, -1, 0], atol=1e-12)

    def test_parallel_routes_add_log_two(self):
        net = diamond()
        act = build_action_table(net)
        V = rl_solve_values(net, act, [-1.0], net.index("ef"), unit_features(act), method="linear")
        assert V[net.index("ab")] == pytest.approx(-3 + np.log(2), abs=1e-12)
        assert V[net.index("bc")] == pytest.approx(-2, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_linear_equals_iteration(self, seed):
        net, act, beta, dest = random_rl_case(seed)
        phi = transition_features(net, act, 100.0)
        lin = rl_solve_values(net, act, beta, dest, phi, method="linear")
        it = rl_solve_values(net, act, beta, dest, phi, method="iteration")
        fin = np.isfinite(it)
        assert np.array_equal(fin, np.isfinite(lin))
        assert np.max(np.abs(lin[fin] - it[fin])) < 1e-6

    def test_batch_matches_single(self):
        net, act, beta, _ = random_rl_case(3)
        phi = transition_features(net, act, 100.0)
        dests = [0, 9, 33, 70]
        batch = rl_values_batch(net, act, beta, dests, phi)
        for d, row in zip(dests, batch):
            single = rl_solve_values(net, act, beta, d, phi, method="linear")
            fin = np.isfinite(single)
            assert np.allclose(row[fin], single[fin], atol=1e-9)
            assert np.all(np.isinf(row[~fin]))

    def test_unknown_method(self):
        net = chain(2)
        with pytest.raises(ValueError):
            rl_solve_values(net, build_action_table(net), [-1.0], 1, method="magic")


class TestRecursiveLogitProbs:
    def test_symmetric_successors(self):
        net = diamond()
        act = build_action_table(net)
        phi = unit_features(act)
        V = rl_solve_values(net, act, [-1.0], net.index("ef"), phi)
        p = rl_next_probs(act, [-1.0], V, net.index("ab"), phi)
        assert p[p > 0] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_rows_sum_to_one(self):
        net, act, beta, dest = random_rl_case(1)
        rl = RecursiveLogit(net, act, LinearUtilityParams(TRANSITION_FEATURE_NAMES, beta), 100.0)
        links = np.array([s for s in range(net.n_links) if s != dest])
        P = rl.probs(links, np.full(len(links), dest))
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(P[act.succ[links] == INVALID] == 0.0)

    def test_chain_certain(self):
        net = chain(4)
        act = build_action_table(net)
        phi = unit_features(act)
        V = rl_solve_values(net, act, [-1.0], 3, phi)
        assert rl_next_prob(act, [-1.0], V, 0, 1, phi) == 1.0

    def test_non_successor(self):
        net = chain(4)
        act = build_action_table(net)
        phi = unit_features(act)
        V = rl_solve_values(net, act, [-1.0], 3, phi)
        with pytest.raises(NetworkError):
            rl_next_prob(act, [-1.0], V, 0, 2, phi)

    def test_params_csv(self, tmp_path):
        p = LinearUtilityParams(("a", "b"), [-1.5, 0.25])
        p.write_csv(tmp_path / "p.csv")
        back = LinearUtilityParams.read_csv(tmp_path / "p.csv")
        assert back.names == p.names and np.array_equal(back.coef, p.coef)
        with pytest.raises(ValueError):
            LinearUtilityParams(("a",), [1.0, 2.0])


@pytest.fixture(scope="module")
def rl_world():
    net = synth_grid_network(6, 6, 100.0, seed=0)
    act = build_action_table(net)
    ds = synth_demonstrations(net, BETA, 600, seed=1, actions=act, length_scale=ORACLE_SCALE)
    return net, act, ds, rl_fit(ds, net, act)


class TestRecursiveLogitFit:
    def test_recovers_signs_and_order(self, rl_world):
        *_, fit = rl_world
        nz = np.flatnonzero(BETA)
        assert np.all(np.sign(fit.coef[nz]) == np.sign(BETA[nz]))
        assert np.array_equal(np.argsort(fit.coef[nz]), np.argsort(BETA[nz]))

    def test_null_loglik(self, rl_world):
        net, act, ds, fit = rl_world
        s, *_ = ds.triplets()
        n_valid = (act.succ[s] != INVALID).sum(axis=1)
        assert fit.loglik0 == pytest.approx(np.sum(np.log(1.0 / n_valid)))
        assert fit.loglik >= fit.loglik0

    def test_loglik_consistent(self, rl_world):
        net, act, ds, fit = rl_world
        s, a, d, _ = ds.triplets()
        phi = transition_features(net, act)
        assert rl_loglik(net, act, fit.coef, phi, s, a, d) == pytest.approx(fit.loglik, rel=1e-6)


class TestChoiceSets:
    def test_chain_single_path(self):
        net = chain(4)
        cs = ksp_choice_set(net, build_action_table(net), (0, 3), k=5)
        assert len(cs) == 1 and cs.kappa.tolist() == [1.0]

    def test_square_two_equal_paths(self):
        net = corner_square()
        act = build_action_table(net)
        cs = ksp_choice_set(net, act, (net.index("xa"), net.index("cy")), k=5)
        assert len(cs) == 2
        assert cs.lengths[0] == cs.lengths[1] == 341.0
        got = {tuple(net.link_ids[i] for i in p) for p in cs.paths}
        assert got == {("xa", "ab", "bc", "cy"), ("xa", "ad", "dc", "cy")}

    def test_sorted_and_distinct(self):
        net = synth_grid_network(5, 5, seed=2)
        act = build_action_table(net)
        cs = ChoiceSetBuilder(net, act, k=5)((0, 60))
        assert len(cs) == 5
        assert np.all(np.diff(cs.lengths) >= 0)
        assert len({tuple(p) for p in cs.paths}) == 5

    def test_unreachable(self):
        net = chain(3)
        with pytest.raises(UnreachableError):
            ksp_choice_set(net, build_action_table(net), (2, 0))

    def test_path_features(self):
        net = corner_square()
        act = build_action_table(net)
        f = path_features(net, act, [net.index(x) for x in ("xa", "ab", "bc", "cy")], 1000.0)
        assert f[0] == pytest.approx(0.341) and f[1] == 3
        assert (f[2], f[3]) == (1, 2)   # right at a and c, left at b

    def test_write(self, tmp_path):
        net = corner_square()
        cs = ksp_choice_set(net, build_action_table(net), (net.index("xa"), net.index("cy")))
        write_choice_sets(tmp_path / "c.csv", net, [cs])
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "trip_id,agent_id,link_seq,kappa"
        assert len(lines) == 3 and lines[1].split(",")[2].startswith("xa;")


class TestPathSize:
    def _net(self):
        return synth_grid_network(4, 4, seed=0)

    def test_single(self):
        assert path_size_terms(self._net(), [[0, 1, 2]]).tolist() == [1.0]

    def test_identical(self):
        assert path_size_terms(self._net(), [[0, 4], [0, 4]]).tolist() == [0.5, 0.5]

    def test_disjoint(self):
        assert path_size_terms(self._net(), [[0, 4], [7, 9]]).tolist() == [1.0, 1.0]

    def test_partial_overlap_between_bounds(self):
        net = self._net()
        k = path_size_terms(net, [[0, 4], [0, 9]])
        assert np.all((k > 0.5) & (k < 1.0))
        cs = ChoiceSet((0, 4), [np.array([0, 4]), np.array([0, 9])], k, np.zeros((2, 1)), np.ones(2))
        assert path_size_term(net, 1, cs) == k[1]


class TestPSLProb:
    def test_uniform(self):
        assert psl_prob(np.ones(4), np.full(4, 0.7), 1.3) == pytest.approx(np.full(4, 0.25))

    def test_zero_beta_is_logit(self):
        v = np.array([0.2, -1.0, 0.5])
        p = psl_prob(v, np.array([0.1, 1.0, 0.5]), 0.0)
        assert p == pytest.approx(np.exp(v) / np.exp(v).sum())

    def test_overlap_penalised(self):
        p = psl_prob(np.zeros(3), np.array([0.5, 0.5, 1.0]), 1.0)
        assert p[2] > 1 / 3
        assert p == pytest.approx([0.25, 0.25, 0.5])


class TestMatch:
    def _set(self, net, paths):
        lengths = np.array([net.length[np.asarray(p)[1:]].sum() for p in paths])
        return ChoiceSet((paths[0][0], paths[0][-1]), [np.asarray(p) for p in paths],
                         path_size_terms(net, paths), np.zeros((len(paths), 1)), lengths)

    def test_identical(self):
        net = corner_square()
        act = build_action_table(net)
        cs = ksp_choice_set(net, act, (net.index("xa"), net.index("cy")))
        assert match_trajectory(net, cs.paths[1], cs) == 1

    def test_majority_overlap(self):
        net = chain(10)
        cs = self._set(net, [list(range(0, 10)), [0, 9]])
        assert match_trajectory(net, list(range(0, 10)), cs) == 0

    def test_tie_prefers_shortest_then_index(self):
        net = load_network([("a", 0, 0), ("b", 0, 100), ("c", 0, 300), ("d", 0, 400)],
                           [("p", "a", "b", 100, "primary"), ("q", "b", "c", 200, "primary"),
                            ("r", "c", "d", 100, "primary")])
        # candidates share the same fraction of the trip; shorter one wins
        cs = self._set(net, [[0, 1], [0, 2]])
        assert match_trajectory(net, [0], cs) == 1
        cs_equal = self._set(net, [[0, 2], [0, 2]])
        assert match_trajectory(net, [0, 2], cs_equal) == 0


@pytest.fixture(scope="module")
def psl_world():
    net = synth_grid_network(5, 5, 100.0, seed=0)
    act = build_action_table(net)
    ds = synth_demonstrations(net, BETA, 200, seed=2, actions=act, length_scale=ORACLE_SCALE)
    return net, act, ds, ChoiceSetBuilder(net, act, k=5)


def uniform_ce(groups):
    total = sum(w for *_, w in groups)
    return sum(w * -np.sum(t * np.log(1.0 / len(cs))) for cs, t, w in groups) / total


class TestPSLFit:
    def test_modal_first_candidate(self, psl_world):
        net, act, _, builder = psl_world
        rng = np.random.default_rng(0)
        trips = []
        for _ in range(12):
            o, d = rng.choice(net.n_links, 2, replace=False)
            try:
                cs = builder((o, d))
            except UnreachableError:
                continue
            trips += [make_trajectory(act, cs.paths[0])] * 3
        model = psl_fit(TrajectoryDataset(trips), net, act, builder=builder)
        for t in trips:
            assert np.argmax(model.probs(builder(t.od))) == 0

    def test_uniform_targets_fit_uniform(self):
        net = corner_square()
        act = build_action_table(net)
        cs = ksp_choice_set(net, act, (net.index("xa"), net.index("cy")))
        trips = [make_trajectory(act, cs.paths[0]), make_trajectory(act, cs.paths[1])] * 2
        model = psl_fit(TrajectoryDataset(trips), net, act)
        assert model.probs(cs) == pytest.approx([0.5, 0.5], abs=1e-3)

    def test_linear_beats_uniform(self, psl_world):
        net, act, ds, builder = psl_world
        model = psl_fit(ds, net, act, builder=builder)
        groups, _ = psl_targets(ds, net, builder)
        assert model.beta_ps >= 0
        assert psl_cross_entropy(model, groups) <= uniform_ce(groups)
        assert model.report["cross_entropy"] == pytest.approx(psl_cross_entropy(model, groups), rel=1e-9)

    def test_dnn_beats_uniform(self, psl_world):
        net, act, ds, builder = psl_world
        model = psl_fit(ds, net, act, dnn_utility=True, builder=builder, epochs=300, hidden=8)
        groups, _ = psl_targets(ds, net, builder)
        assert psl_cross_entropy(model, groups) <= uniform_ce(groups)

    @pytest.mark.parametrize("dnn", [False, True])
    def test_csv_round_trip(self, psl_world, tmp_path, dnn):
        net, act, ds, builder = psl_world
        model = psl_fit(ds.subset(range(40)), net, act, dnn_utility=dnn, builder=builder, epochs=20, hidden=4)
        model.write_csv(tmp_path / "m.csv")
        back = PathSizeLogit.read_csv(tmp_path / "m.csv")
        cs = builder(ds[0].od)
        assert np.array_equal(back.probs(cs), model.probs(cs))

    def test_choice_set_direction_count(self, psl_world):
        net, act, ds, builder = psl_world
        cs = builder(ds[0].od)
        for p in cs.paths:
            for u, v in zip(p[:-1], p[1:]):
                assert v in act.succ[u]
        assert act.succ.shape[1] == N_DIR
