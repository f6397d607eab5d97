"""Road-network model: links, 8-direction action tables, shortest-path context
features and the 3x3 feature grid consumed by the convolutional models."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LEVELS = ("primary", "secondary", "tertiary", "living_street", "residential", "unclassified")
DIRECTIONS = ("F", "FR", "R", "BR", "B", "BL", "L", "FL")
N_DIR = 8
INVALID = -1

# direction index k sits at heading difference 45*k degrees (clockwise positive);
# grid cell (row, col) for each direction, center is (1, 1)
GRID_POS = {0: (0, 1), 1: (0, 2), 2: (1, 2), 3: (2, 2), 4: (2, 1), 5: (2, 0), 6: (1, 0), 7: (0, 0)}

STATE_DIM = 1 + len(LEVELS)
CONTEXT_DIM = 5 + len(LEVELS)
STATE_FEATURE_NAMES = ("link_length",) + tuple(f"level_{lv}" for lv in LEVELS)
CONTEXT_FEATURE_NAMES = (
    "shortest_distance", "n_links", "n_left", "n_right", "n_uturn",
) + tuple(f"freq_{lv}" for lv in LEVELS)


class NetworkError(ValueError):
    pass


class UnreachableError(LookupError):
    """Destination cannot be reached from the source link."""


def _norm_level(level: str) -> str:
    lv = level.strip().lower().replace("-", "_").replace(" ", "_")
    if lv not in LEVELS:
        raise NetworkError(f"unknown link level {level!r}")
    return lv


@dataclass(frozen=True)
class RoadNetwork:
    node_ids: tuple
    xy: np.ndarray            # (n_nodes, 2)
    link_ids: tuple
    from_node: np.ndarray     # node index per link
    to_node: np.ndarray
    length: np.ndarray        # meters
    level: np.ndarray         # index into LEVELS
    successors: tuple         # tuple of int arrays, outgoing links of each link
    link_index: dict = field(repr=False, compare=False)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    def index(self, link_id) -> int:
        try:
            return self.link_index[str(link_id)]
        except KeyError:
            raise NetworkError(f"unknown link {link_id!r}") from None

    def heading(self) -> np.ndarray:
        """Compass heading of every link in degrees, clockwise from +y."""
        d = self.xy[self.to_node] - self.xy[self.from_node]
        return np.degrees(np.arctan2(d[:, 0], d[:, 1]))


def load_network(node_records: Iterable[Sequence], link_records: Iterable[Sequence],
                 allow_uturn: bool = True) -> RoadNetwork:
    """Build a network from ``(node_id, x, y)`` and
    ``(link_id, from_node, to_node, length_m, level)`` records.

    Adjacency links every pair sharing a node (head of the first equals tail of
    the second). With ``allow_uturn=False`` the reverse twin of a link
    (same endpoints swapped) is left out of its successors.
    """
    node_ids, xy, node_index = [], [], {}
    for rec in node_records:
        nid = str(rec[0]).strip()
        if nid in node_index:
            raise NetworkError(f"duplicate node id {nid!r}")
        node_index[nid] = len(node_ids)
        node_ids.append(nid)
        xy.append((float(rec[1]), float(rec[2])))

    link_ids, fr, to, length, level, link_index = [], [], [], [], [], {}
    for rec in link_records:
        lid, u, v = (str(r).strip() for r in rec[:3])
        if lid in link_index:
            raise NetworkError(f"duplicate link id {lid!r}")
        for n in (u, v):
            if n not in node_index:
                raise NetworkError(f"link {lid!r} references missing node {n!r}")
        ln = float(rec[3])
        if not ln > 0:
            raise NetworkError(f"link {lid!r} has non-positive length {ln}")
        link_index[lid] = len(link_ids)
        link_ids.append(lid)
        fr.append(node_index[u])
        to.append(node_index[v])
        length.append(ln)
        level.append(LEVELS.index(_norm_level(rec[4])))

    fr_a = np.asarray(fr, dtype=np.int64)
    to_a = np.asarray(to, dtype=np.int64)
    out_by_node: dict[int, list[int]] = {}
    for i, u in enumerate(fr):
        out_by_node.setdefault(u, []).append(i)
    succ = []
    for i in range(len(link_ids)):
        nxt = [j for j in out_by_node.get(to[i], [])
               if allow_uturn or not (to[j] == fr[i] and fr[j] == to[i])]
        succ.append(np.asarray(nxt, dtype=np.int64))

    return RoadNetwork(
        node_ids=tuple(node_ids),
        xy=np.asarray(xy, dtype=float).reshape(-1, 2),
        link_ids=tuple(link_ids),
        from_node=fr_a,
        to_node=to_a,
        length=np.asarray(length, dtype=float),
        level=np.asarray(level, dtype=np.int64),
        successors=tuple(succ),
        link_index=link_index,
    )


def read_network(node_file, link_file, allow_uturn: bool = True) -> RoadNetwork:
    """Load ``node_id,x,y`` and ``link_id,from_node,to_node,length_m,level`` CSVs."""
    def rows(path, cols):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(cols) - set(reader.fieldnames or ())
            if missing:
                raise NetworkError(f"{path}: missing columns {sorted(missing)}")
            out = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    out.append(tuple(row[c] for c in cols))
                except Exception as exc:  # pragma: no cover - csv module already strict
                    raise NetworkError(f"{path}:{lineno}: {exc}") from exc
            return out

    nodes = rows(node_file, ("node_id", "x", "y"))
    links = rows(link_file, ("link_id", "from_node", "to_node", "length_m", "level"))
    return load_network(nodes, links, allow_uturn=allow_uturn)


def write_network(network: RoadNetwork, node_file, link_file) -> None:
    with open(node_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y"])
        for nid, (x, y) in zip(network.node_ids, network.xy):
            w.writerow([nid, repr(float(x)), repr(float(y))])
    with open(link_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["link_id", "from_node", "to_node", "length_m", "level"])
        for i, lid in enumerate(network.link_ids):
            w.writerow([lid, network.node_ids[network.from_node[i]], network.node_ids[network.to_node[i]],
                        repr(float(network.length[i])), LEVELS[network.level[i]]])


def remove_link(network: RoadNetwork, link_id) -> RoadNetwork:
    """Copy of ``network`` without ``link_id``; adjacency is rebuilt."""
    drop = network.index(link_id)
    nodes = [(n, x, y) for n, (x, y) in zip(network.node_ids, network.xy)]
    links = [
        (lid, network.node_ids[network.from_node[i]], network.node_ids[network.to_node[i]],
         network.length[i], LEVELS[network.level[i]])
        for i, lid in enumerate(network.link_ids) if i != drop
    ]
    new = load_network(nodes, links)
    # keep the original adjacency rule (e.g. u-turns excluded) rather than re-deriving it
    keep = {network.link_ids[j] for j in range(network.n_links) if j != drop}
    succ = []
    for i, lid in enumerate(new.link_ids):
        old = network.successors[network.index(lid)]
        succ.append(np.asarray([new.index(network.link_ids[j]) for j in old
                                if network.link_ids[j] in keep], dtype=np.int64))
    return RoadNetwork(new.node_ids, new.xy, new.link_ids, new.from_node, new.to_node,
                       new.length, new.level, tuple(succ), new.link_index)


# ---------------------------------------------------------------------------
# action space

def heading_difference(h_from: float, h_to: float) -> float:
    """Signed turn angle in (-180, 180], clockwise (right turn) positive."""
    d = (h_to - h_from) % 360.0
    return d - 360.0 if d > 180.0 else d


def direction_bin(theta: float) -> int:
    """Index into DIRECTIONS of the 45-degree sector containing ``theta``."""
    return int(math.floor((theta + 22.5) / 45.0)) % N_DIR


def _circ_delta(center: float, theta: float) -> float:
    d = (center - theta) % 360.0
    return d - 360.0 if d > 180.0 else d


def assign_directions(thetas: Sequence[float]) -> list[int]:
    """Label each turn angle with a distinct direction.

    Successors closest to their own sector center claim it first; a collision
    moves the later one to the nearest free sector, ties going to the side of
    the angle's sign (clockwise for zero).
    """
    if len(thetas) > N_DIR:
        raise NetworkError(f"{len(thetas)} successors cannot be labeled with {N_DIR} directions")
    dev = [abs(_circ_delta(45.0 * direction_bin(t), t)) for t in thetas]
    order = sorted(range(len(thetas)), key=lambda i: (dev[i], i))
    taken: set[int] = set()
    labels = [INVALID] * len(thetas)
    for i in order:
        t = thetas[i]
        k = direction_bin(t)
        if k in taken:
            prefer_cw = t >= 0
            free = [j for j in range(N_DIR) if j not in taken]

            def rank(j):
                delta = _circ_delta(45.0 * j, t)
                return (round(abs(delta), 9), 0 if (delta > 0) == prefer_cw else 1, j)

            k = min(free, key=rank)
        taken.add(k)
        labels[i] = k
    return labels


@dataclass(frozen=True)
class ActionTable:
    succ: np.ndarray   # (n_links, 8) successor link index or INVALID
    turn: np.ndarray   # (n_links, 8) raw heading difference in degrees (nan if invalid)

    def actions(self, link: int) -> np.ndarray:
        """Local action set A(s)."""
        return np.flatnonzero(self.succ[link] != INVALID)

    def valid_mask(self) -> np.ndarray:
        return self.succ != INVALID

    def action_between(self, s: int, s_next: int) -> int:
        hit = np.flatnonzero(self.succ[s] == s_next)
        if hit.size == 0:
            raise NetworkError(f"link {s_next} does not follow link {s}")
        return int(hit[0])


def build_action_table(network: RoadNetwork) -> ActionTable:
    heading = network.heading()
    succ = np.full((network.n_links, N_DIR), INVALID, dtype=np.int64)
    turn = np.full((network.n_links, N_DIR), np.nan)
    for i, nxt in enumerate(network.successors):
        if len(nxt) == 0:
            continue
        thetas = [heading_difference(heading[i], heading[j]) for j in nxt]
        try:
            labels = assign_directions(thetas)
        except NetworkError as exc:
            raise NetworkError(f"link {network.link_ids[i]!r}: {exc}") from None
        for j, k, t in zip(nxt, labels, thetas):
            succ[i, k] = j
            turn[i, k] = t
    return ActionTable(succ=succ, turn=turn)


def turn_class(direction: int) -> int | None:
    """0 = left, 1 = right, 2 = u-turn, None = straight."""
    name = DIRECTIONS[direction]
    if name == "F":
        return None
    if name == "B":
        return 2
    return 1 if "R" in name else 0


TURN_CLASS = np.array([-1 if turn_class(k) is None else turn_class(k) for k in range(N_DIR)])


# ---------------------------------------------------------------------------
# shortest paths and features

@dataclass(frozen=True)
class PathMetrics:
    distance: float
    n_links: int
    n_left: int
    n_right: int
    n_uturn: int
    level_counts: tuple

    def as_array(self) -> np.ndarray:
        return np.array([self.distance, self.n_links, self.n_left, self.n_right, self.n_uturn,
                         *self.level_counts], dtype=float)


@dataclass(frozen=True)
class DestinationTree:
    """Shortest-path tree of every link towards one destination.

    ``metrics`` rows hold [distance_m, n_links, left, right, uturn, 6 level counts]
    of the remaining path (current link excluded), NaN where unreachable.
    """
    dest: int
    next_link: np.ndarray
    metrics: np.ndarray

    @property
    def reachable(self) -> np.ndarray:
        return ~np.isnan(self.metrics[:, 0])

    def path(self, source: int) -> list[int]:
        if not self.reachable[source]:
            raise UnreachableError(f"link {source} cannot reach destination {self.dest}")
        out = [source]
        while out[-1] != self.dest:
            out.append(int(self.next_link[out[-1]]))
        return out


def destination_tree(network: RoadNetwork, actions: ActionTable, dest: int) -> DestinationTree:
    """Dijkstra over the reversed link graph; edge s->s' weighs length(s')."""
    n = network.n_links
    pred: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for s in range(n):
        for k in range(N_DIR):
            j = actions.succ[s, k]
            if j != INVALID:
                pred[j].append((s, k))
    dist = np.full(n, np.inf)
    nxt = np.full(n, INVALID, dtype=np.int64)
    via = np.full(n, INVALID, dtype=np.int64)
    dist[dest] = 0.0
    done = np.zeros(n, dtype=bool)
    heap = [(0.0, dest)]
    order = []
    while heap:
        d, j = heapq.heappop(heap)
        if done[j]:
            continue
        done[j] = True
        order.append(j)
        for s, k in pred[j]:
            if done[s]:
                continue
            nd = d + network.length[j]
            if nd < dist[s] or (nd == dist[s] and j < nxt[s]):
                dist[s] = nd
                nxt[s] = j
                via[s] = k
                heapq.heappush(heap, (nd, s))

    metrics = np.full((n, CONTEXT_DIM), np.nan)
    metrics[dest] = 0.0
    for s in order[1:]:
        j, k = nxt[s], via[s]
        row = metrics[j].copy()
        row[0] = dist[s]
        row[1] += 1
        tc = TURN_CLASS[k]
        if tc >= 0:
            row[2 + tc] += 1
        row[5 + network.level[j]] += 1
        metrics[s] = row
    return DestinationTree(dest=dest, next_link=nxt, metrics=metrics)


class PathCache:
    """Per-destination shortest-path trees, filled on first use."""

    def __init__(self, network: RoadNetwork, actions: ActionTable):
        self.network = network
        self.actions = actions
        self._trees: dict[int, DestinationTree] = {}

    def tree(self, dest: int) -> DestinationTree:
        t = self._trees.get(dest)
        if t is None:
            t = self._trees[dest] = destination_tree(self.network, self.actions, dest)
        return t

    def metrics(self, source: int, dest: int) -> PathMetrics:
        row = self.tree(dest).metrics[source]
        if np.isnan(row[0]):
            raise UnreachableError(
                f"destination {self.network.link_ids[dest]} unreachable from {self.network.link_ids[source]}")
        return PathMetrics(float(row[0]), int(row[1]), int(row[2]), int(row[3]), int(row[4]),
                           tuple(int(v) for v in row[5:]))


def shortest_path_metrics(network: RoadNetwork, source, dest, actions: ActionTable | None = None,
                          cache: PathCache | None = None) -> PathMetrics:
    s, d = network.index(source), network.index(dest)
    if cache is None:
        cache = PathCache(network, actions if actions is not None else build_action_table(network))
    return cache.metrics(s, d)


@dataclass(frozen=True)
class FeatureConfig:
    length_scale: float = 1000.0
    use_context: bool = True    # False drops every destination-related feature

    @property
    def context_dim(self) -> int:
        return CONTEXT_DIM if self.use_context else 0

    @property
    def base_dim(self) -> int:
        return STATE_DIM + self.context_dim

    def feature_names(self) -> tuple:
        return STATE_FEATURE_NAMES + (CONTEXT_FEATURE_NAMES if self.use_context else ())


def link_state_features(network: RoadNetwork, link=None, length_scale: float = 1000.0) -> np.ndarray:
    """[length / scale, one-hot level]; all links when ``link`` is None."""
    idx = np.arange(network.n_links) if link is None else np.atleast_1d(
        link if isinstance(link, (int, np.integer)) else network.index(link))
    out = np.zeros((len(idx), STATE_DIM))
    out[:, 0] = network.length[idx] / length_scale
    out[np.arange(len(idx)), 1 + network.level[idx]] = 1.0
    return out[0] if link is not None else out


def context_rows(metrics: np.ndarray, length_scale: float) -> np.ndarray:
    out = np.array(metrics, dtype=float, copy=True)
    out[..., 0] /= length_scale
    return out


def trip_context_features(network: RoadNetwork, current, dest, cache: PathCache,
                          length_scale: float = 1000.0, embedding=None) -> np.ndarray:
    m = cache.metrics(network.index(current), network.index(dest)).as_array()
    m[0] /= length_scale
    if embedding is not None:
        m = np.concatenate([m, np.asarray(embedding, dtype=float)])
    return m


class FeatureBank:
    """Dense per-destination feature tables for fast grid assembly.

    Row ``[d, s]`` of the base table is [F_s; F_c] of link ``s`` heading to
    ``d``; destinations are filled on first use. ``grids`` gathers the 3x3
    layout with a trailing validity channel.
    """

    def __init__(self, network: RoadNetwork, actions: ActionTable, config: FeatureConfig = FeatureConfig()):
        self.network = network
        self.actions = actions
        self.config = config
        self.paths = PathCache(network, actions)
        self.state = link_state_features(network, length_scale=config.length_scale)
        n = network.n_links
        self._base = np.zeros((n, n, config.base_dim))
        self._valid = np.zeros((n, n, N_DIR), dtype=bool)
        self._filled = np.zeros(n, dtype=bool)
        # direction index of each outer cell in row-major order (center excluded)
        self.cell_of_dir = np.array([GRID_POS[k][0] * 3 + GRID_POS[k][1] for k in range(N_DIR)])

    @property
    def base_dim(self) -> int:
        return self.config.base_dim

    @property
    def grid_channels(self) -> int:
        return self.config.base_dim + 1

    def _fill(self, dest: int) -> None:
        tree = self.paths.tree(dest)
        if self.config.use_context:
            ctx = np.nan_to_num(context_rows(tree.metrics, self.config.length_scale), nan=0.0)
            self._base[dest] = np.concatenate([self.state, ctx], axis=1)
        else:
            self._base[dest] = self.state
        succ = self.actions.succ
        self._valid[dest] = (succ != INVALID) & tree.reachable[np.maximum(succ, 0)]
        self._filled[dest] = True

    def ensure(self, dests) -> None:
        for d in np.unique(np.asarray(dests, dtype=np.int64)):
            if not self._filled[d]:
                self._fill(int(d))

    def base(self, dest: int) -> np.ndarray:
        self.ensure([dest])
        return self._base[dest]

    def valid(self, dest: int) -> np.ndarray:
        """(n_links, 8) mask: valid action whose successor reaches ``dest``."""
        self.ensure([dest])
        return self._valid[dest]

    def reachable(self, dest: int) -> np.ndarray:
        return self.paths.tree(dest).reachable

    def masks(self, links, dests) -> np.ndarray:
        self.ensure(dests)
        return self._valid[dests, links]

    def features(self, links, dests) -> np.ndarray:
        """Flat [F_s; F_c] rows for (link, dest) pairs."""
        self.ensure(dests)
        return self._base[dests, links]

    def grids(self, links, dests) -> np.ndarray:
        """(B, 3, 3, base_dim + 1) feature grids."""
        links = np.asarray(links, dtype=np.int64)
        dests = np.asarray(dests, dtype=np.int64)
        self.ensure(dests)
        B, C = len(links), self.base_dim
        out = np.zeros((B, 9, C + 1))
        out[:, 4, :C] = self._base[dests, links]
        out[:, 4, C] = 1.0
        valid = self._valid[dests, links]
        nb = np.where(valid, self.actions.succ[links], links[:, None])
        outer = self._base[dests[:, None], nb] * valid[..., None]
        out[:, self.cell_of_dir, :C] = outer
        out[:, self.cell_of_dir, C] = valid
        return out.reshape(B, 3, 3, C + 1)


def feature_grid(network: RoadNetwork, actions: ActionTable, link, dest,
                 config: FeatureConfig = FeatureConfig(), bank: FeatureBank | None = None) -> np.ndarray:
    bank = bank or FeatureBank(network, actions, config)
    s, d = network.index(link), network.index(dest)
    if not bank.reachable(d)[s]:
        raise UnreachableError(f"destination {dest} unreachable from {link}")
    return bank.grids(np.array([s]), np.array([d]))[0]
