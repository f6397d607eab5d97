import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from benchmark import BETA, ORACLE_SCALE
from routechoice.mdp import (
    ConvergenceError, Context, TrajectoryDataset, TrajectoryError, default_max_steps, ingest_trajectories,
    make_trajectory, rollout, rollout_batch, soft_value_iteration, step, synth_demonstrations,
    synth_grid_network, transition_features, write_trajectories,
)
from routechoice.network import (
    DIRECTIONS, INVALID, LEVELS, N_DIR, FeatureBank, build_action_table, load_network,
)
from test_network import chain, link_graph

LENGTH_ONLY = np.array([-1.0] + [0.0] * 9)


@pytest.fixture(scope="module")
def grid6():
    net = synth_grid_network(6, 6, 100.0, seed=0)
    return net, build_action_table(net)


def snake_nodes(rows=6, cols=6):
    out = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        out += [(r, c) for c in cs]
    return out


def node_path_links(nodes):
    return [f"n{a[0]}_{a[1]}>n{b[0]}_{b[1]}" for a, b in zip(nodes[:-1], nodes[1:])]


def write_trips(path, rows):
    path.write_text("trip_id,agent_id,link_seq\n" + "".join(f"{r}\n" for r in rows))
    return path


def uniform_policy(bank):
    def fn(links, dests, _agents):
        m = bank.masks(links, dests).astype(float)
        return m / m.sum(axis=1, keepdims=True)
    return fn


def greedy_distance_policy(bank):
    """All mass on the successor with the smallest length + remaining distance."""
    net, succ = bank.network, bank.actions.succ

    def fn(links, dests, _agents):
        out = np.zeros((len(links), N_DIR))
        for i, (s, d) in enumerate(zip(links, dests)):
            rem = bank.paths.tree(int(d)).metrics[:, 0]
            score = [np.inf if j == INVALID or np.isnan(rem[j]) else net.length[j] + rem[j] for j in succ[s]]
            out[i, int(np.argmin(score))] = 1.0
        return out
    return fn


def diamond():
    s2 = 100 * np.sqrt(2)
    nodes = [("a", 0, 0), ("b", 0, 100), ("c", -100, 200), ("d", 100, 200), ("e", 0, 300), ("f", 0, 400)]
    links = [("ab", "a", "b", 100, "primary"), ("bc", "b", "c", s2, "primary"),
             ("bd", "b", "d", s2, "primary"), ("ce", "c", "e", s2, "primary"),
             ("de", "d", "e", s2, "primary"), ("ef", "e", "f", 100, "primary")]
    return load_network(nodes, links)


class TestStep:
    def test_forward_successor(self, grid6):
        net, act = grid6
        s = net.index("n0_0>n0_1")
        f = DIRECTIONS.index("F")
        nxt, done = step(act, s, f)
        assert net.link_ids[nxt] == "n0_1>n0_2" and not done

    def test_missing_action(self, grid6):
        net, act = grid6
        s = net.index("n0_0>n0_1")
        with pytest.raises(TrajectoryError):
            step(act, s, DIRECTIONS.index("R"))   # heading east on the bottom edge: no right turn

    def test_terminal(self, grid6):
        net, act = grid6
        s = net.index("n0_0>n0_1")
        nxt, done = step(act, s, DIRECTIONS.index("F"), dest=net.index("n0_1>n0_2"))
        assert done


class TestIngest:
    def test_filters(self, tmp_path, grid6):
        net, act = grid6
        snake = node_path_links(snake_nodes())
        loop = node_path_links([(1, 1), (1, 2), (2, 2), (2, 1)] * 4 + [(1, 1)])
        skip = snake[:8] + snake[9:20]
        rows = [f"t14,,{';'.join(snake[:14])}", f"t20,u1,{';'.join(snake[:20])}",
                f"loop,,{';'.join(loop)}", f"gap,,{';'.join(skip)}", "broken,,", "unk,,x;y"]
        ds, rep = ingest_trajectories(write_trips(tmp_path / "t.csv", rows), net, act)
        assert [t.trip_id for t in ds] == ["t20"]
        assert len(ds.triplets()[0]) == 19
        assert rep.dropped["too_short"] == 1
        assert rep.dropped["cyclic"] == 1
        assert rep.dropped["non_adjacent"] == 1
        assert rep.dropped["unknown_link"] == 1
        assert rep.dropped["parse_error"] == 1
        assert any("line 6" in e for e in rep.errors)
        assert "dropped_cyclic 1" in rep.text()
        assert ds.agents == ("u1",) and ds[0].context.agent == 0

    def test_empty_result(self, tmp_path, grid6):
        net, act = grid6
        path = write_trips(tmp_path / "t.csv", [f"a,,{';'.join(node_path_links(snake_nodes())[:5])}"])
        with pytest.raises(TrajectoryError, match="no trips"):
            ingest_trajectories(path, net, act)

    def test_header_required(self, tmp_path, grid6):
        (tmp_path / "t.csv").write_text("a,b,c\n")
        with pytest.raises(TrajectoryError, match="header"):
            ingest_trajectories(tmp_path / "t.csv", grid6[0])

    def test_write_then_ingest(self, tmp_path, grid6):
        net, act = grid6
        t = make_trajectory(act, [net.index(x) for x in node_path_links(snake_nodes())[:16]], trip_id="7")
        write_trajectories(tmp_path / "t.csv", net, [t])
        ds, _ = ingest_trajectories(tmp_path / "t.csv", net, act)
        assert np.array_equal(ds[0].links, t.links)
        assert np.array_equal(ds[0].actions, t.actions)


class TestDataset:
    def test_triplets_and_od_index(self, grid6):
        net, act = grid6
        seq = [net.index(x) for x in node_path_links(snake_nodes())]
        trips = [make_trajectory(act, seq[:6]), make_trajectory(act, seq[:6]), make_trajectory(act, seq[2:9])]
        ds = TrajectoryDataset(trips)
        s, a, d, g = ds.triplets()
        assert len(s) == sum(len(t) - 1 for t in trips)
        assert np.all(g == -1)
        idx = ds.od_index()
        assert sorted(i for v in idx.values() for i in v) == [0, 1, 2]
        assert idx[(seq[0], seq[5])] == [0, 1]


class TestRollout:
    def test_greedy_policy_follows_dijkstra(self, grid6):
        net, act = grid6
        bank = FeatureBank(net, act)
        G = link_graph(net, act)
        pol = greedy_distance_policy(bank)
        rng = np.random.default_rng(0)
        for _ in range(15):
            o, d = rng.choice(net.n_links, 2, replace=False)
            t = rollout(pol, int(o), Context(int(d)), seed=1, bank=bank)
            assert t.complete
            assert list(t.links) == nx.dijkstra_path(G, int(o), int(d))

    def test_max_steps_incomplete(self, grid6):
        net, act = grid6
        bank = FeatureBank(net, act)
        o, d = net.index("n0_0>n0_1"), net.index("n0_2>n0_3")
        t = rollout(greedy_distance_policy(bank), o, Context(d), max_steps=1, bank=bank)
        assert not t.complete and len(t.links) == 2

    def test_seeded_determinism(self, grid6):
        net, act = grid6
        bank = FeatureBank(net, act)
        pol = uniform_policy(bank)
        a = rollout(pol, 0, Context(40), seed=5, bank=bank)
        b = rollout(pol, 0, Context(40), seed=5, bank=bank)
        assert np.array_equal(a.links, b.links)

    def test_zero_mass_rejected(self, grid6):
        net, act = grid6
        bank = FeatureBank(net, act)
        with pytest.raises(TrajectoryError, match="no mass"):
            rollout(lambda l, d, g: np.zeros((len(l), N_DIR)), 0, Context(40), bank=bank)

    def test_origin_equals_dest(self, grid6):
        with pytest.raises(TrajectoryError):
            rollout(None, 3, Context(3))

    def test_default_max_steps(self):
        assert default_max_steps(4).item() == 50
        assert default_max_steps(30).item() == 90

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**16))
    def test_rollouts_replay_through_step(self, seed):
        net = synth_grid_network(4, 4, 100.0, seed=0)
        act = build_action_table(net)
        bank = FeatureBank(net, act)
        rng = np.random.default_rng(seed)
        o, d = rng.choice(net.n_links, size=(2, 8))
        keep = o != d
        batch = rollout_batch(uniform_policy(bank), o[keep], d[keep], rng=rng, bank=bank, max_steps=30)
        for t in batch.trajectories():
            cur = t.links[0]
            for k, a in enumerate(t.actions):
                cur, done = step(act, cur, a, t.dest)
                assert cur == t.links[k + 1]
            assert t.complete == (t.links[-1] == t.dest)


class TestSynthNetwork:
    def test_unit_square(self):
        net = synth_grid_network(2, 2, 100.0)
        assert net.n_links == 8
        assert np.all(np.abs(net.length - 100.0) <= 10.0)

    def test_seeded(self):
        a, b = synth_grid_network(5, 5, seed=3), synth_grid_network(5, 5, seed=3)
        assert np.array_equal(a.length, b.length) and a.link_ids == b.link_ids
        assert not np.array_equal(a.length, synth_grid_network(5, 5, seed=4).length)

    def test_levels(self):
        net = synth_grid_network(7, 7)
        lv = {lid: LEVELS[net.level[i]] for i, lid in enumerate(net.link_ids)}
        assert lv["n0_2>n0_3"] == "primary"
        assert lv["n3_2>n3_3"] == "secondary"
        assert lv["n2_2>n2_3"] == "residential"

    def test_interior_offers_three_actions(self):
        net = synth_grid_network(5, 5)
        act = build_action_table(net)
        for i in range(net.n_links):
            r, c = (int(v) for v in net.node_ids[net.to_node[i]][1:].split("_"))
            if 0 < r < 4 and 0 < c < 4:
                assert len(act.actions(i)) == 3

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth_grid_network(1, 4)


class TestSoftValueIteration:
    def test_chain(self):
        net = chain(5)
        act = build_action_table(net)
        phi = np.zeros((net.n_links, N_DIR, 1))
        phi[act.succ != INVALID] = 1.0
        sol = soft_value_iteration(net, act, [-1.0], 4, features=phi)
        assert np.allclose(sol.values, [-4, -3, -2, -1, 0])
        assert np.all(sol.policy[:4].max(axis=1) == 1.0)

    def test_parallel_routes_split_evenly(self):
        net = diamond()
        act = build_action_table(net)
        sol = soft_value_iteration(net, act, LENGTH_ONLY, net.index("ef"))
        p = sol.policy[net.index("ab")]
        assert sorted(DIRECTIONS[k] for k in np.flatnonzero(p)) == ["FL", "FR"]
        assert p[p > 0] == pytest.approx([0.5, 0.5], abs=1e-12)

    def test_grid_values_bound_shortest_distance(self):
        net = synth_grid_network(5, 5, 100.0, seed=1)
        act = build_action_table(net)
        G = link_graph(net, act)
        scale = 1.0   # reward in meters
        for d in (3, 27, 66):
            sol = soft_value_iteration(net, act, LENGTH_ONLY, d, tol=1e-12, length_scale=scale)
            dist = nx.single_source_dijkstra_path_length(G.reverse(), d)
            for s, ds in dist.items():
                assert sol.values[s] >= -ds / scale - 1e-9
                if s == d:
                    continue
                j = act.succ[s, np.argmax(sol.policy[s])]
                assert net.length[j] + dist[int(j)] == pytest.approx(ds, abs=1e-9)

    def test_policy_rows_and_dest(self):
        net = synth_grid_network(4, 4, seed=0)
        act = build_action_table(net)
        sol = soft_value_iteration(net, act, BETA, 11, length_scale=ORACLE_SCALE)
        assert sol.values[11] == 0.0
        rows = np.delete(np.arange(net.n_links), 11)
        assert np.allclose(sol.policy[rows].sum(axis=1), 1.0, atol=1e-12)
        assert np.all(sol.policy[act.succ == INVALID] == 0.0)

    def test_zero_reward_diverges_on_cycles(self):
        net = synth_grid_network(3, 3)
        with pytest.raises(ConvergenceError):
            soft_value_iteration(net, build_action_table(net), np.zeros(10), 0)

    def test_transition_features(self):
        net = diamond()
        act = build_action_table(net)
        phi = transition_features(net, act, 100.0)
        ab = net.index("ab")
        fl = DIRECTIONS.index("FL")
        assert phi[ab, fl, 0] == pytest.approx(np.sqrt(2))
        assert phi[ab, fl, 7] == 1.0 and phi[ab, fl, 8] == 0.0
        assert np.all(phi[ab, DIRECTIONS.index("F")] == 0.0)


@pytest.fixture(scope="module")
def demos():
    net = synth_grid_network(8, 8, 100.0, seed=0)
    act = build_action_table(net)
    ds = synth_demonstrations(net, BETA, 300, seed=1, actions=act, length_scale=ORACLE_SCALE)
    return net, act, ds


class TestSynthDemonstrations:
    def test_mostly_shortest_paths(self, demos):
        net, act, ds = demos
        G = link_graph(net, act)
        hits = sum(list(t.links) == nx.dijkstra_path(G, t.origin, t.dest) for t in ds)
        assert hits / len(ds) >= 0.8

    def test_complete_simple_and_recorded(self, demos):
        _, _, ds = demos
        assert all(t.complete and t.is_simple() for t in ds)
        assert ds.meta["beta"] == list(BETA)

    def test_seeded(self, demos):
        net, act, ds = demos
        again = synth_demonstrations(net, BETA, 300, seed=1, actions=act, length_scale=ORACLE_SCALE)
        assert all(np.array_equal(a.links, b.links) for a, b in zip(ds, again))

    def test_agents_assigned(self):
        net = synth_grid_network(4, 4, seed=0)
        ds = synth_demonstrations(net, BETA, 20, seed=2, length_scale=ORACLE_SCALE, n_agents=3, min_hops=3)
        assert len(ds.agents) == 3
        assert {t.context.agent for t in ds} <= {0, 1, 2}
