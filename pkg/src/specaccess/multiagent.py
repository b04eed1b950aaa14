"""Distributed coordination among cognitive radios.

Nodes discover neighbours by thresholding expected RSSI, then agree on a
channel-access order through a quorum-gated ranked-ballot exchange: every
node broadcasts its RSSI-ranked list, aggregates the lists it hears with a
Borda count, rebroadcasts the aggregate, and declares consensus once its
neighbours' aggregates match its own for a number of consecutive rounds.

The control channel is simulated as synchronous rounds: a message sent in
round ``r`` is delivered at the start of round ``r + 1`` in ascending sender
order, optionally dropped with a fixed probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

BEACON = "discovery-beacon"
RSSI_LIST = "rssi-ranked-list"
AGGREGATE = "aggregated-ranked-list"


@dataclass(frozen=True)
class ControlMessage:
    kind: str
    sender: int
    payload: tuple[int, ...] | None
    round: int

    def __post_init__(self):
        if self.kind not in (BEACON, RSSI_LIST, AGGREGATE):
            raise ValueError(f"unknown message kind {self.kind!r}")
        if (self.payload is None) != (self.kind == BEACON):
            raise ValueError("payload must be present exactly for ranked-list messages")


def _tie_keys(items, rng: np.random.Generator) -> dict[int, float]:
    # random secondary keys; items are sorted first so equal inputs give equal keys
    ordered = sorted(items)
    return dict(zip(ordered, rng.random(len(ordered))))


def discover_neighbors(self_id: int, rssi_map: Mapping[int, float], threshold_db: float,
                       rng: np.random.Generator) -> list[int]:
    """Peers whose expected RSSI reaches the threshold, strongest first."""
    if self_id in rssi_map:
        raise ValueError("rssi_map must not contain the node itself")
    keep = [j for j, r in rssi_map.items() if r >= threshold_db]
    tie = _tie_keys(keep, rng)
    return sorted(keep, key=lambda j: (-rssi_map[j], tie[j]))


def ballot_points(position: int, list_len: int) -> int:
    """Borda points for a 1-based ``position`` on a ballot of ``list_len`` names."""
    if not 1 <= position <= list_len:
        raise ValueError("position must lie in 1..list_len")
    return list_len - position


def aggregate_ballots(received: Sequence[Sequence[int]], self_list: Sequence[int],
                      rng: np.random.Generator) -> tuple[int, ...]:
    """Borda aggregate of ``self_list`` and ``received`` over ``self_list``'s members.

    Names on a ballot but outside the node's own list are ignored; members
    missing from a ballot score nothing on it. Ties are broken at random.
    """
    members = list(self_list)
    if len(set(members)) != len(members):
        raise ValueError("ranked list has duplicates")
    score = {m: 0 for m in members}
    for ballot in [self_list, *received]:
        n = len(ballot)
        for pos, m in enumerate(ballot, start=1):
            if m in score:
                score[m] += ballot_points(pos, n)
    tie = _tie_keys(members, rng)
    return tuple(sorted(members, key=lambda m: (-score[m], tie[m])))


@dataclass
class NodeState:
    node_id: int
    rssi_map: dict[int, float]
    threshold_db: float
    quorum: int
    stability_rounds: int
    heard: set = field(default_factory=set)
    neighbors: list[int] = field(default_factory=list)
    own_list: tuple[int, ...] | None = None
    aggregate: tuple[int, ...] | None = None
    stable: int = 0
    consensus: tuple[int, ...] | None = None


def consensus_step(node: NodeState, inbox: Sequence[ControlMessage], round_: int,
                   rng: np.random.Generator) -> tuple[list[ControlMessage], tuple[int, ...] | None]:
    """Advance one node by one round; returns its outbox and any consensus list.

    ``rng`` must be the round's shared protocol generator so that nodes with
    identical inputs break ties identically.
    """
    if node.quorum < 1:
        raise ValueError("quorum must be >= 1")
    inbox = [m for m in inbox if m.sender in node.rssi_map and m.sender != node.node_id]
    node.heard.update(m.sender for m in inbox)

    if node.consensus is not None:
        return [ControlMessage(AGGREGATE, node.node_id, node.consensus, round_)], node.consensus

    if node.own_list is None:
        heard_rssi = {j: node.rssi_map[j] for j in node.heard}
        node.neighbors = discover_neighbors(node.node_id, heard_rssi, node.threshold_db, rng)
        if len(node.neighbors) < node.quorum:
            return [ControlMessage(BEACON, node.node_id, None, round_)], None
        node.own_list = (node.node_id, *node.neighbors)
        return [ControlMessage(RSSI_LIST, node.node_id, node.own_list, round_)], None

    late = sorted((j for j in node.heard
                   if j not in node.neighbors and node.rssi_map[j] >= node.threshold_db),
                  key=lambda j: (-node.rssi_map[j], j))
    if late:
        # peers whose earlier frames were lost join at the tail
        node.neighbors.extend(late)
        node.own_list = (*node.own_list, *late)
        if node.aggregate is not None:
            node.aggregate = (*node.aggregate, *late)
            node.stable = 0
    nbrs = set(node.neighbors)
    ballots = [m.payload for m in inbox if m.kind == RSSI_LIST and m.sender in nbrs]
    aggs = [m.payload for m in inbox if m.kind == AGGREGATE and m.sender in nbrs]

    if node.aggregate is None:
        node.aggregate = aggregate_ballots(ballots, node.own_list, rng)
    elif late:
        pass
    elif aggs:
        if all(a == node.aggregate for a in aggs):
            node.stable += 1
        else:
            node.aggregate = aggregate_ballots(aggs, node.aggregate, rng)
            node.stable = 0
    if node.stable >= node.stability_rounds:
        node.consensus = node.aggregate
    return [ControlMessage(AGGREGATE, node.node_id, node.aggregate, round_)], node.consensus


@dataclass
class ConsensusResult:
    lists: dict[int, tuple[int, ...] | None]
    rounds: dict[int, int | None]
    neighbors: dict[int, list[int]]
    terminated: bool
    total_rounds: int

    def agreed(self) -> bool:
        lists = list(self.lists.values())
        return all(x is not None for x in lists) and len(set(lists)) == 1

    def order(self) -> tuple[int, ...]:
        """The common list when all nodes agree, else the smallest-id node's list."""
        first = self.lists[min(self.lists)]
        if first is None:
            raise ValueError("no consensus reached")
        return first


def default_quorum(n_nodes: int) -> int:
    return max(1, math.ceil(n_nodes / 2))


def run_consensus(rssi: np.ndarray, threshold_db: float, seed: int, quorum: int | None = None,
                  stability_rounds: int = 3, max_rounds: int = 100,
                  drop_prob: float = 0.0) -> ConsensusResult:
    """Simulate the ballot protocol on an ``n x n`` RSSI matrix (dB; diagonal ignored)."""
    rssi = np.asarray(rssi, dtype=float)
    n = rssi.shape[0]
    if rssi.shape != (n, n) or n < 1:
        raise ValueError("rssi must be a square matrix")
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError("drop probability must lie in [0, 1)")
    quorum = default_quorum(n) if quorum is None else quorum
    if n == 1:
        return ConsensusResult({0: (0,)}, {0: 0}, {0: []}, True, 0)
    nodes = [
        NodeState(i, {j: float(rssi[i, j]) for j in range(n) if j != i}, threshold_db,
                  quorum, stability_rounds)
        for i in range(n)
    ]
    seq = np.random.SeedSequence(seed)
    drop_rng = np.random.default_rng(seq.spawn(1)[0])
    inboxes: list[list[ControlMessage]] = [[] for _ in range(n)]
    done_round: dict[int, int | None] = {i: None for i in range(n)}
    r = 0
    for r in range(max_rounds):
        outgoing = []
        for node in nodes:
            proto_rng = np.random.default_rng([seed, r])
            out, cons = consensus_step(node, inboxes[node.node_id], r, proto_rng)
            outgoing.extend(out)
            if cons is not None and done_round[node.node_id] is None:
                done_round[node.node_id] = r
        if all(v is not None for v in done_round.values()):
            break
        inboxes = [[] for _ in range(n)]
        for msg in sorted(outgoing, key=lambda m: m.sender):
            for i in range(n):
                if i == msg.sender:
                    continue
                if drop_prob and drop_rng.random() < drop_prob:
                    continue
                inboxes[i].append(msg)
    terminated = all(v is not None for v in done_round.values())
    return ConsensusResult({nd.node_id: nd.consensus for nd in nodes}, done_round,
                           {nd.node_id: nd.neighbors for nd in nodes}, terminated, r + 1)


def allocate_access(rank: Sequence[int], intents: Mapping[int, Sequence[int]],
                    max_per_agent: int | None = None) -> dict[int, list[int]]:
    """Draft subcarriers in rank order.

    Each pass lets every agent, best-ranked first, claim its most preferred
    subcarrier nobody holds yet; passes repeat until no agent can claim more
    (or each holds ``max_per_agent``). With one agent this is "take every
    intended subcarrier".
    """
    claimed: set[int] = set()
    out = {a: [] for a in rank}
    cursor = {a: 0 for a in rank}
    progress = True
    while progress:
        progress = False
        for a in rank:
            if max_per_agent is not None and len(out[a]) >= max_per_agent:
                continue
            prefs = intents.get(a, ())
            while cursor[a] < len(prefs) and prefs[cursor[a]] in claimed:
                cursor[a] += 1
            if cursor[a] < len(prefs):
                k = prefs[cursor[a]]
                claimed.add(k)
                out[a].append(k)
                cursor[a] += 1
                progress = True
    return out


def rssi_matrix(positions, p_t: float, env, rng: np.random.Generator | None = None) -> np.ndarray:
    """Symmetric expected-RSSI matrix (dB) among nodes at ``positions``."""
    from .channel import expected_rssi_db, link_geometry

    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    out = np.full((n, n), -np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            d, e = link_geometry(pos[i], pos[j])
            out[i, j] = out[j, i] = expected_rssi_db(d, e, p_t, env)
    return out
