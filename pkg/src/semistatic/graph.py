"""Predictive scene graph: typed nodes, session association, dense temporal edges."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .filter import Observation
from .receptacles import DEFAULT_DELTA, LocationVerdict, ObjectTracker
from .switching import Estimator, EstimatorTemplate, joint_update

logger = logging.getLogger(__name__)

DEFAULT_MAX_DIST = 1.5
Pair = tuple[str, str]


class NodeKind(str, Enum):
    SEMI_STATIC = "semi_static"
    RECEPTACLE = "receptacle"
    BACKGROUND = "background"


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in metres."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("boxes need 3-vectors")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, centre, size) -> Box:
        c, s = np.asarray(centre, float), np.asarray(size, float) / 2
        return cls(tuple(c - s), tuple(c + s))

    @property
    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))

    @property
    def centre(self) -> tuple[float, float, float]:
        return tuple((a + b) / 2 for a, b in zip(self.lo, self.hi))


def iou3d(a: Box, b: Box) -> float:
    """Intersection over union of two axis-aligned boxes; 0 when either has no volume."""
    va, vb = a.volume, b.volume
    if va <= 0 or vb <= 0:
        return 0.0
    inter = 1.0
    for lo_a, hi_a, lo_b, hi_b in zip(a.lo, a.hi, b.lo, b.hi):
        side = min(hi_a, hi_b) - max(lo_a, lo_b)
        if side <= 0:
            return 0.0
        inter *= side
    return min(max(inter / (va + vb - inter), 0.0), 1.0)


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    centroid: tuple[float, float, float]
    bbox: Box
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        c = tuple(float(x) for x in self.centroid)
        object.__setattr__(self, "centroid", c)
        tol = 1e-9
        if len(c) != 3 or any(x < lo - tol or x > hi + tol for x, lo, hi in zip(c, self.bbox.lo, self.bbox.hi)):
            raise ValueError(f"node {self.id!r}: centroid {c} outside its box")

    @classmethod
    def box(cls, id: str, kind, centre, size=(0.2, 0.2, 0.2), label: str = "") -> Node:
        return cls(id, NodeKind(kind), tuple(centre), Box.around(centre, size), label)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "centroid": list(self.centroid),
                "bbox": {"min": list(self.bbox.lo), "max": list(self.bbox.hi)}, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> Node:
        box = Box(tuple(data["bbox"]["min"]), tuple(data["bbox"]["max"]))
        centroid = data.get("centroid") or box.centre
        return cls(str(data["id"]), NodeKind(data.get("kind", "receptacle")), tuple(centroid), box,
                   data.get("label", ""))


def match_receptacles(candidates: Sequence[Node], annotations: Sequence[Node]) -> dict:
    """One-to-one matching maximising total 3D IoU; zero-overlap pairs stay unmatched."""
    if not candidates or not annotations:
        return {}
    iou = np.array([[iou3d(c.bbox, a.bbox) for a in annotations] for c in candidates])
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return {candidates[r].id: annotations[c].id for r, c in zip(rows, cols) if iou[r, c] > 0}


@dataclass(frozen=True)
class SessionAssociation:
    session_id: int
    pairs: frozenset = frozenset()

    def __post_init__(self):
        pairs = frozenset((str(o), str(r)) for o, r in self.pairs)
        objs = [o for o, _ in pairs]
        if len(objs) != len(set(objs)):
            raise ValueError(f"session {self.session_id}: an object is placed on two receptacles")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_pairs(cls, session_id: int, pairs: Iterable[Pair]) -> SessionAssociation:
        """Keep the first placement of each object, logging any conflicting ones."""
        seen: dict[str, str] = {}
        for o, r in pairs:
            if o in seen and seen[o] != r:
                logger.warning("session %s: %s seen on both %s and %s; keeping %s", session_id, o, seen[o], r, seen[o])
                continue
            seen.setdefault(o, r)
        return cls(session_id, frozenset(seen.items()))

    def receptacle_of(self, object_id: str) -> str | None:
        for o, r in self.pairs:
            if o == object_id:
                return r
        return None


def associate_session(objects: Sequence[Node], receptacles: Sequence[Node], max_dist: float = DEFAULT_MAX_DIST,
                      session_id: int = 0) -> SessionAssociation:
    """Assign each object to its nearest receptacle centroid within ``max_dist``."""
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    recs = sorted(receptacles, key=lambda n: n.id)
    pairs = []
    for obj in objects:
        best = None
        for rec in recs:
            d = math.dist(obj.centroid, rec.centroid)
            # strict < keeps the lexicographically first receptacle on ties
            if d <= max_dist and (best is None or d < best[0]):
                best = (d, rec.id)
        if best is not None:
            pairs.append((obj.id, best[1]))
    return SessionAssociation(session_id, frozenset(pairs))


def build_history(sessions: Iterable[SessionAssociation]) -> frozenset:
    """A(o_j, o_k): every pair observed in any session."""
    out: set = set()
    for s in sessions:
        out |= s.pairs
    return frozenset(out)


@dataclass
class TemporalEdge:
    object_id: str
    receptacle_id: str
    estimator: Estimator
    weight_cache: float = 0.0

    def to_dict(self) -> dict:
        return {"object_id": self.object_id, "receptacle_id": self.receptacle_id,
                "weight_cache": self.weight_cache, "estimator": self.estimator.to_dict()}


@dataclass(frozen=True)
class Snapshot:
    """What the robot saw at one time: placements on the receptacles it could see."""

    time: float
    visible_receptacles: frozenset
    placements: SessionAssociation

    @classmethod
    def from_dict(cls, data: dict, session_id: int = 0) -> Snapshot:
        pairs = [(p["object_id"], p["receptacle_id"]) for p in data.get("placements", [])]
        return cls(float(data["time"]), frozenset(data.get("visible_receptacles", [])),
                   SessionAssociation.from_pairs(int(data.get("session_id", session_id)), pairs))

    def to_dict(self) -> dict:
        return {"time": self.time, "session_id": self.placements.session_id,
                "visible_receptacles": sorted(self.visible_receptacles),
                "placements": [{"object_id": o, "receptacle_id": r} for o, r in sorted(self.placements.pairs)]}


@dataclass
class PredictiveGraph:
    template: EstimatorTemplate
    nodes: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)
    history: set = field(default_factory=set)
    last_map_time: float = 0.0
    absence_threshold: float = DEFAULT_DELTA
    # per-edge templates, keyed "object|receptacle"
    edge_templates: dict = field(default_factory=dict)
    # seconds per estimator time unit; graph methods take estimator units
    time_unit: float = 1.0

    def add_node(self, node: Node) -> PredictiveGraph:
        if node.id in self.nodes and self.nodes[node.id] != node:
            raise ValueError(f"node {node.id!r} already exists with different attributes")
        self.nodes[node.id] = node
        return self

    def _check_pair(self, object_id: str, receptacle_id: str):
        obj, rec = self.nodes.get(object_id), self.nodes.get(receptacle_id)
        if obj is None or obj.kind is not NodeKind.SEMI_STATIC:
            raise KeyError(f"{object_id!r} is not a known semi-static object")
        if rec is None or rec.kind is not NodeKind.RECEPTACLE:
            raise KeyError(f"{receptacle_id!r} is not a known receptacle")

    def _new_edge(self, object_id: str, receptacle_id: str, origin: float) -> TemporalEdge:
        self._check_pair(object_id, receptacle_id)
        tpl = self.edge_templates.get(f"{object_id}|{receptacle_id}", self.template)
        est = tpl.create(origin)
        edge = TemporalEdge(object_id, receptacle_id, est, 0.0)
        self.edges[(object_id, receptacle_id)] = edge
        self.history.add((object_id, receptacle_id))
        return edge

    def add_history(self, sessions: Iterable[SessionAssociation], origin: float = 0.0) -> PredictiveGraph:
        """Grow the edge set to cover every pair in the aggregated history."""
        for pair in sorted(build_history(sessions)):
            if pair not in self.edges:
                self._new_edge(*pair, origin=origin)
        return self

    def ingest_observation(self, snapshot: Snapshot) -> PredictiveGraph:
        """Presence updates for objects seen on visible receptacles, absence updates for
        known edges of visible receptacles whose object was not seen there."""
        t = snapshot.time
        visible = snapshot.visible_receptacles
        found = {(o, r) for o, r in snapshot.placements.pairs if r in visible}
        for o, r in found:
            self._check_pair(o, r)
        # validate ordering before touching anything
        touched = found | {p for p in self.edges if p[1] in visible}
        for p in touched:
            edge = self.edges.get(p)
            if edge is not None and t < edge.estimator.last_time:
                raise ValueError(f"out-of-order snapshot at t={t} for edge {p} (last update t={edge.estimator.last_time})")
        for p in sorted(touched):
            edge = self.edges.get(p) or self._new_edge(*p, origin=t)
            edge.estimator = joint_update(edge.estimator, Observation(t, 1 if p in found else 0))
        self.last_map_time = max(self.last_map_time, t)
        return self

    def tracker(self, object_id: str) -> ObjectTracker:
        node = self.nodes.get(object_id)
        if node is None or node.kind is not NodeKind.SEMI_STATIC:
            raise KeyError(f"unknown semi-static object {object_id!r}")
        ests = {r: e.estimator for (o, r), e in self.edges.items() if o == object_id}
        return ObjectTracker(object_id, ests, self.absence_threshold)

    def query_object(self, object_id: str, t: float, k: int = 3) -> tuple[LocationVerdict, list]:
        if k < 1:
            raise ValueError("k must be at least 1")
        if t < self.last_map_time:
            raise ValueError(f"query at t={t} precedes the last map update t={self.last_map_time}")
        tracker = self.tracker(object_id)
        verdict = tracker.locate(t)
        for r, b in verdict.per_receptacle.items():
            self.edges[(object_id, r)].weight_cache = b
        return verdict, tracker.top_k(t, k)

    def semi_static_ids(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if n.kind is NodeKind.SEMI_STATIC)

    def to_dict(self) -> dict:
        return {
            "schema": "pgraph_v1",
            "last_map_time": self.last_map_time,
            "absence_threshold": self.absence_threshold,
            "time_unit": self.time_unit,
            "template": self.template.to_dict(),
            "edge_templates": {k: v.to_dict() for k, v in self.edge_templates.items()},
            "nodes": [n.to_dict() for _, n in sorted(self.nodes.items())],
            "history": [list(p) for p in sorted(self.history)],
            "edges": [e.to_dict() for _, e in sorted(self.edges.items())],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PredictiveGraph:
        if data.get("schema") != "pgraph_v1":
            raise ValueError(f"expected schema 'pgraph_v1', got {data.get('schema')!r}")
        g = cls(
            template=EstimatorTemplate.from_dict(data["template"]),
            last_map_time=float(data["last_map_time"]),
            absence_threshold=float(data.get("absence_threshold", DEFAULT_DELTA)),
            edge_templates={k: EstimatorTemplate.from_dict(v) for k, v in data.get("edge_templates", {}).items()},
            time_unit=float(data.get("time_unit", 1.0)),
        )
        for nd in data["nodes"]:
            g.add_node(Node.from_dict(nd))
        g.history = {tuple(p) for p in data["history"]}
        for ed in data["edges"]:
            e = TemporalEdge(ed["object_id"], ed["receptacle_id"], Estimator.from_dict(ed["estimator"]),
                             float(ed.get("weight_cache", 0.0)))
            g.edges[(e.object_id, e.receptacle_id)] = e
        return g

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> PredictiveGraph:
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> PredictiveGraph:
        with open(path) as fh:
            return cls.from_json(fh.read())


def ingest_observation(graph: PredictiveGraph, snapshot: Snapshot) -> PredictiveGraph:
    return graph.ingest_observation(snapshot)


def query_object(graph: PredictiveGraph, object_id: str, t: float, k: int = 3):
    return graph.query_object(object_id, t, k)


def load_annotations(path) -> list[Node]:
    """JSON list of annotated receptacle boxes: [{id, bbox:{min,max}, label?}]."""
    with open(path) as fh:
        data = json.load(fh)
    return [Node.from_dict({**d, "kind": d.get("kind", "receptacle")}) for d in data]


def load_snapshots(path) -> list[Snapshot]:
    """One snapshot object or a list of them."""
    with open(path) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    return [Snapshot.from_dict(d, i) for i, d in enumerate(items)]
