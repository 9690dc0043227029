"""Iterative scene graphs: agent/room/object nodes with agent-relative
positions and a per-step recomputed directed relation-edge set.

Nodes accumulate over an episode (an object seen once stays in the graph);
edges and positional features are functions of the current pose and are
recomputed whenever a graph is materialized. ``strip_history`` and
``mask_positions`` produce the ablation variants.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .sim.env import (AgentPose, EnvState, agent_frame_offset,
                      object_visible, visible_objects)
from .sim.house import (CATEGORIES, CATEGORY_INDEX, CELL, House,
                        line_of_sight, ROOM_TYPES)

log = logging.getLogger(__name__)

NEAR_THRESHOLD = 1.0
REL_DEADBAND = 0.25  # one grid cell
NODE_CAP = 64

# Node category vocabulary: object categories, then room types, then agent.
ROOM_CATEGORY_BASE = len(CATEGORIES)
AGENT_CATEGORY = ROOM_CATEGORY_BASE + len(ROOM_TYPES)
NODE_VOCAB_SIZE = AGENT_CATEGORY + 1


class Relation(enum.IntEnum):
    SEES = 0
    TOUCHES = 1
    HOLDS = 2
    ON = 3
    NEAR = 4
    ADJACENT = 5
    RIGHT = 6
    LEFT = 7
    ABOVE = 8
    BELOW = 9
    FRONT = 10
    BEHIND = 11
    CONTAINS = 12


NUM_RELATIONS = len(Relation)


class NodeKind(enum.IntEnum):
    AGENT = 0
    ROOM = 1
    OBJECT = 2


class EpisodeMismatchError(RuntimeError):
    pass


class GraphPayloadError(ValueError):
    pass


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    kind: NodeKind
    category_index: int
    rel_position: tuple[float, float, float]  # (forward, up, lateral)
    first_seen_step: int
    ref: int  # object id, room id, or -1 for the agent


@dataclass
class SceneGraph:
    nodes: list[GraphNode]
    edges: set[tuple[int, int, Relation]]
    step: int

    def node_by_ref(self, kind: NodeKind, ref: int) -> GraphNode | None:
        for n in self.nodes:
            if n.kind == kind and n.ref == ref:
                return n
        return None

    def same_structure(self, other: "SceneGraph") -> bool:
        mine = {(n.kind, n.ref) for n in self.nodes}
        theirs = {(n.kind, n.ref) for n in other.nodes}
        return mine == theirs


def _world_position(node: GraphNode, house: House,
                    pose: AgentPose) -> tuple[float, float, float]:
    if node.kind == NodeKind.AGENT:
        return (pose.x, 0.0, pose.z)
    if node.kind == NodeKind.ROOM:
        room = house.rooms[node.ref]
        x = (room.c0 + room.c1) / 2.0 * CELL
        z = (room.r0 + room.r1) / 2.0 * CELL
        return (x, 0.0, z)
    obj = next(o for o in house.objects if o.id == node.ref)
    return obj.position


def compute_relations(a: GraphNode, b: GraphNode, pose: AgentPose,
                      house: House) -> set[Relation]:
    """The exact set of relations holding from node a to node b."""
    if a.node_id == b.node_id:
        raise ValueError("relations are defined between distinct nodes")
    rels: set[Relation] = set()
    pa = _world_position(a, house, pose)
    pb = _world_position(b, house, pose)

    if a.kind == NodeKind.AGENT and b.kind == NodeKind.OBJECT:
        obj = next(o for o in house.objects if o.id == b.ref)
        if object_visible(house, pose, obj):
            rels.add(Relation.SEES)

    if a.kind == NodeKind.OBJECT and b.kind == NodeKind.OBJECT:
        oa = next(o for o in house.objects if o.id == a.ref)
        ob = next(o for o in house.objects if o.id == b.ref)
        if oa.support_id == ob.id:
            rels.add(Relation.ON)
        planar = math.hypot(pa[0] - pb[0], pa[2] - pb[2])
        if planar < NEAR_THRESHOLD:
            rels.add(Relation.NEAR)
            if line_of_sight(house, oa.cell, ob.cell):
                rels.add(Relation.ADJACENT)
        fa, ya, la = agent_frame_offset(pose, pa)
        fb, yb, lb = agent_frame_offset(pose, pb)
        if la - lb > REL_DEADBAND:
            rels.add(Relation.RIGHT)
        if lb - la > REL_DEADBAND:
            rels.add(Relation.LEFT)
        if fa - fb > REL_DEADBAND:
            rels.add(Relation.FRONT)
        if fb - fa > REL_DEADBAND:
            rels.add(Relation.BEHIND)
        if ya - yb > REL_DEADBAND:
            rels.add(Relation.ABOVE)
        if yb - ya > REL_DEADBAND:
            rels.add(Relation.BELOW)

    if a.kind == NodeKind.ROOM and b.kind != NodeKind.ROOM:
        room = house.rooms[a.ref]
        if room.contains_xz(pb[0], pb[2]):
            rels.add(Relation.CONTAINS)

    # Touches/Holds require an arm; never asserted here.
    return rels


def _compute_all_edges(nodes: list[GraphNode],
                       state: EnvState) -> set[tuple[int, int, Relation]]:
    """Vectorized full edge recomputation for the current pose."""
    house = state.house
    pose = state.agent
    edges: set[tuple[int, int, Relation]] = set()

    obj_nodes = [n for n in nodes if n.kind == NodeKind.OBJECT]
    room_nodes = [n for n in nodes if n.kind == NodeKind.ROOM]
    agent = next(n for n in nodes if n.kind == NodeKind.AGENT)
    objs = {o.id: o for o in house.objects}

    vis = visible_objects(state)
    for n in obj_nodes:
        if n.ref in vis:
            edges.add((agent.node_id, n.node_id, Relation.SEES))

    if obj_nodes:
        pos = np.array([objs[n.ref].position for n in obj_nodes])
        frame = np.array([agent_frame_offset(pose, tuple(p)) for p in pos])
        dx = pos[:, None, 0] - pos[None, :, 0]
        dz = pos[:, None, 2] - pos[None, :, 2]
        planar = np.hypot(dx, dz)
        near = planar < NEAR_THRESHOLD
        df = frame[:, None, 0] - frame[None, :, 0]
        dy = frame[:, None, 1] - frame[None, :, 1]
        dl = frame[:, None, 2] - frame[None, :, 2]
        n_obj = len(obj_nodes)
        for i in range(n_obj):
            ni = obj_nodes[i]
            oi = objs[ni.ref]
            for j in range(n_obj):
                if i == j:
                    continue
                nj = obj_nodes[j]
                if oi.support_id == nj.ref:
                    edges.add((ni.node_id, nj.node_id, Relation.ON))
                if near[i, j]:
                    edges.add((ni.node_id, nj.node_id, Relation.NEAR))
                    if line_of_sight(house, oi.cell, objs[nj.ref].cell):
                        edges.add((ni.node_id, nj.node_id, Relation.ADJACENT))
                if dl[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.RIGHT))
                if -dl[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.LEFT))
                if df[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.FRONT))
                if -df[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.BEHIND))
                if dy[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.ABOVE))
                if -dy[i, j] > REL_DEADBAND:
                    edges.add((ni.node_id, nj.node_id, Relation.BELOW))

    for rn in room_nodes:
        room = house.rooms[rn.ref]
        if room.contains_xz(pose.x, pose.z):
            edges.add((rn.node_id, agent.node_id, Relation.CONTAINS))
        for n in obj_nodes:
            p = objs[n.ref].position
            if room.contains_xz(p[0], p[2]):
                edges.add((rn.node_id, n.node_id, Relation.CONTAINS))

    return edges


def _refresh(nodes: list[GraphNode], state: EnvState,
             with_edges: bool = True) -> SceneGraph:
    """Recompute rel_positions (and optionally edges) for the current pose."""
    fresh = []
    for n in nodes:
        if n.kind == NodeKind.AGENT:
            fresh.append(replace(n, rel_position=(0.0, 0.0, 0.0)))
        else:
            p = _world_position(n, state.house, state.agent)
            fresh.append(replace(n, rel_position=agent_frame_offset(state.agent, p)))
    edges = _compute_all_edges(fresh, state) if with_edges else set()
    return SceneGraph(nodes=fresh, edges=edges, step=state.step_count)


def _new_nodes(existing: list[GraphNode], state: EnvState) -> list[GraphNode]:
    """Existing nodes plus the current room and newly visible objects."""
    nodes = list(existing)
    have = {(n.kind, n.ref) for n in nodes}
    next_id = max((n.node_id for n in nodes), default=-1) + 1

    room = state.house.room_of_cell(*state.agent.cell)
    if (NodeKind.ROOM, room.room_id) not in have:
        nodes.append(GraphNode(
            node_id=next_id, kind=NodeKind.ROOM,
            category_index=ROOM_CATEGORY_BASE + ROOM_TYPES.index(room.room_type),
            rel_position=(0.0, 0.0, 0.0),
            first_seen_step=state.step_count, ref=room.room_id))
        have.add((NodeKind.ROOM, room.room_id))
        next_id += 1

    objs = {o.id: o for o in state.house.objects}
    for oid in sorted(visible_objects(state)):
        if (NodeKind.OBJECT, oid) in have:
            continue
        if len(nodes) >= NODE_CAP:
            log.warning("scene graph node cap %d reached; dropping object %d",
                        NODE_CAP, oid)
            continue
        nodes.append(GraphNode(
            node_id=next_id, kind=NodeKind.OBJECT,
            category_index=CATEGORY_INDEX[objs[oid].category],
            rel_position=(0.0, 0.0, 0.0),
            first_seen_step=state.step_count, ref=oid))
        have.add((NodeKind.OBJECT, oid))
        next_id += 1
    return nodes


def init_graph(state: EnvState, with_edges: bool = True) -> SceneGraph:
    """Fresh-episode graph: agent node, current room, visible objects."""
    agent = GraphNode(node_id=0, kind=NodeKind.AGENT,
                      category_index=AGENT_CATEGORY,
                      rel_position=(0.0, 0.0, 0.0),
                      first_seen_step=state.step_count, ref=-1)
    nodes = _new_nodes([agent], state)
    return _refresh(nodes, state, with_edges)


def update_graph(g: SceneGraph, state: EnvState,
                 with_edges: bool = True) -> SceneGraph:
    """Append newly seen nodes, recompute features and edges; removes nothing."""
    if state.step_count != g.step + 1:
        raise EpisodeMismatchError(
            f"graph at step {g.step} cannot be advanced to state step "
            f"{state.step_count}")
    nodes = _new_nodes(g.nodes, state)
    return _refresh(nodes, state, with_edges)


def strip_history(g: SceneGraph, state: EnvState) -> SceneGraph:
    """No-history ablation: only agent, current room, currently visible objects."""
    vis = visible_objects(state)
    room = state.house.room_of_cell(*state.agent.cell)
    kept = [n for n in g.nodes
            if n.kind == NodeKind.AGENT
            or (n.kind == NodeKind.ROOM and n.ref == room.room_id)
            or (n.kind == NodeKind.OBJECT and n.ref in vis)]
    return _refresh(kept, state, with_edges=True)


def mask_positions(g: SceneGraph) -> SceneGraph:
    """Position-masking ablation: zero every rel_position, keep structure."""
    nodes = [replace(n, rel_position=(0.0, 0.0, 0.0)) for n in g.nodes]
    return SceneGraph(nodes=nodes, edges=set(g.edges), step=g.step)


_GRAPH_MAGIC = b"SGGR"
_GRAPH_VERSION = 1


def serialize_graph(g: SceneGraph) -> bytes:
    out = bytearray()
    out += _GRAPH_MAGIC
    out += struct.pack("<iiii", _GRAPH_VERSION, g.step, len(g.nodes),
                       len(g.edges))
    for n in g.nodes:
        out += struct.pack("<iBii", n.node_id, int(n.kind),
                           n.category_index, n.ref)
        out += struct.pack("<i", n.first_seen_step)
        out += struct.pack("<3d", *n.rel_position)
    for src, dst, rel in sorted(g.edges):
        out += struct.pack("<iiB", src, dst, int(rel))
    return bytes(out)


def deserialize_graph(payload: bytes) -> SceneGraph:
    def need(offset: int, count: int) -> None:
        if offset + count > len(payload):
            raise GraphPayloadError(
                f"truncated graph payload at offset {offset}")

    need(0, 4)
    if payload[:4] != _GRAPH_MAGIC:
        raise GraphPayloadError("bad magic at offset 0")
    off = 4
    need(off, 16)
    version, step, n_nodes, n_edges = struct.unpack_from("<iiii", payload, off)
    off += 16
    if version != _GRAPH_VERSION:
        raise GraphPayloadError(f"unsupported version {version} at offset 4")
    nodes = []
    for _ in range(n_nodes):
        need(off, 13 + 4 + 24)
        node_id, kind, cat, ref = struct.unpack_from("<iBii", payload, off)
        off += 13
        (first_seen,) = struct.unpack_from("<i", payload, off)
        off += 4
        rel_pos = struct.unpack_from("<3d", payload, off)
        off += 24
        nodes.append(GraphNode(node_id=node_id, kind=NodeKind(kind),
                               category_index=cat, rel_position=rel_pos,
                               first_seen_step=first_seen, ref=ref))
    edges = set()
    for _ in range(n_edges):
        need(off, 9)
        src, dst, rel = struct.unpack_from("<iiB", payload, off)
        off += 9
        edges.add((src, dst, Relation(rel)))
    return SceneGraph(nodes=nodes, edges=edges, step=step)


class GraphStreamWriter:
    """Length-prefixed stream of serialized graphs tagged with provenance."""

    def __init__(self, path):
        self._f = open(path, "wb")
        self._f.write(b"SGST" + struct.pack("<i", 1))

    def append(self, g: SceneGraph, episode_id: int, step: int,
               worker_id: int) -> None:
        blob = serialize_graph(g)
        self._f.write(struct.pack("<iiiI", episode_id, step, worker_id,
                                  len(blob)))
        self._f.write(blob)

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_graph_stream(path):
    """Yield (episode_id, step, worker_id, SceneGraph) records."""
    with open(path, "rb") as f:
        header = f.read(8)
        if header[:4] != b"SGST":
            raise GraphPayloadError("not a graph stream file")
        while True:
            head = f.read(16)
            if not head:
                return
            if len(head) < 16:
                raise GraphPayloadError("truncated stream record header")
            episode_id, step, worker_id, size = struct.unpack("<iiiI", head)
            blob = f.read(size)
            if len(blob) < size:
                raise GraphPayloadError("truncated stream record body")
            yield episode_id, step, worker_id, deserialize_graph(blob)
