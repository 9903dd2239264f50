"""Primal road graph, polyline helpers and the dual (line-graph) conversion.

Coordinates are planar, projected metres. Bearings are degrees clockwise
from north (+y).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateGeometryError,
    DomainError,
    DuplicateIdError,
    ParseError,
    ReferentialError,
)

Point = tuple[float, float]

HIGHWAY_CLASSES = (
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "unclassified",
    "residential",
    "living_street",
)

_ENDPOINT_TOL = 1e-6
_LENGTH_RTOL = 1e-6


# ---------------------------------------------------------------------------
# polyline helpers
# ---------------------------------------------------------------------------


def as_array(geometry) -> np.ndarray:
    arr = np.asarray(geometry, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise DegenerateGeometryError(f"polyline needs >= 2 points of (x, y), got shape {arr.shape}")
    return arr


def cumulative_lengths(geometry) -> np.ndarray:
    pts = as_array(geometry)
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    return np.concatenate([[0.0], np.cumsum(seg)])


def arc_length(geometry) -> float:
    return float(cumulative_lengths(geometry)[-1])


def point_at_distance(pts: np.ndarray, cum: np.ndarray, s: float) -> tuple[int, np.ndarray]:
    """Locate arc-length ``s``; returns (index of the leg start, point)."""
    total = cum[-1]
    s = min(max(s, 0.0), total)
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(pts) - 2)
    leg = cum[i + 1] - cum[i]
    if leg == 0.0:
        return i, pts[i].copy()
    w = (s - cum[i]) / leg
    if w >= 1.0:
        return i, pts[i + 1].copy()
    return i, pts[i] + w * (pts[i + 1] - pts[i])


def substring(geometry, s0: float, s1: float) -> np.ndarray:
    """Sub-polyline between arc lengths ``s0 <= s1``, keeping interior vertices."""
    pts = as_array(geometry)
    cum = cumulative_lengths(pts)
    _, p0 = point_at_distance(pts, cum, s0)
    _, p1 = point_at_distance(pts, cum, s1)
    inner = pts[(cum > s0) & (cum < s1)]
    return np.vstack([p0, inner, p1])


def edge_bearing(geometry) -> float:
    """Bearing of the chord from first to last point, in [0, 360)."""
    pts = as_array(geometry)
    dx, dy = pts[-1] - pts[0]
    if dx == 0.0 and dy == 0.0:
        raise DegenerateGeometryError("first and last point coincide; bearing undefined")
    b = math.degrees(math.atan2(dx, dy)) % 360.0
    # -0.0 % 360 and tiny negatives can round to exactly 360
    return 0.0 if b >= 360.0 else b


def fallback_bearing(geometry) -> float:
    """Bearing for closed polylines (self-loops): direction of the first non-empty leg."""
    try:
        return edge_bearing(geometry)
    except DegenerateGeometryError:
        pts = as_array(geometry)
        for a, b in zip(pts[:-1], pts[1:]):
            if not np.array_equal(a, b):
                return edge_bearing([a, b])
        raise


def resample_geometry(geometry, m: int) -> tuple[Point, np.ndarray]:
    """Resample to ``m`` equally spaced points along the arc.

    Returns the centroid ``(x, y)`` of the resampled points and the
    flattened offsets ``[n_0, e_0, n_1, e_1, ...]`` (northing, easting of
    each point minus the centroid).
    """
    if m < 2:
        raise DomainError(f"need at least 2 resampled points, got {m}")
    pts = resample_points(geometry, m)
    c = pts.mean(axis=0)
    rel = pts - c
    offsets = np.column_stack([rel[:, 1], rel[:, 0]]).ravel()
    return (float(c[0]), float(c[1])), offsets


def resample_points(geometry, m: int) -> np.ndarray:
    pts = as_array(geometry)
    cum = cumulative_lengths(pts)
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateGeometryError("zero-length geometry cannot be resampled")
    out = np.empty((m, 2))
    for k in range(m):
        if k == m - 1:
            out[k] = pts[-1]
        else:
            out[k] = point_at_distance(pts, cum, total * k / (m - 1))[1]
    return out


# ---------------------------------------------------------------------------
# primal graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoadNode:
    id: str
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class RoadEdge:
    id: str
    u: str
    v: str
    geometry: tuple[Point, ...]
    length_m: float
    bearing_deg: float
    travel_time_s: float | None = None
    throughput_vpd: float | None = None
    oneway: bool = False
    bridge: bool = False
    tunnel: bool = False
    highway: str | None = None
    parent_id: str = ""

    def __post_init__(self):
        if not self.parent_id:
            object.__setattr__(self, "parent_id", self.id)

    @classmethod
    def from_geometry(cls, id: str, u: str, v: str, geometry, **attrs) -> "RoadEdge":
        """Build an edge whose length and bearing are derived from ``geometry``."""
        pts = as_array(geometry)
        return cls(
            id=id,
            u=u,
            v=v,
            geometry=tuple((float(x), float(y)) for x, y in pts),
            length_m=arc_length(pts),
            bearing_deg=fallback_bearing(pts),
            **attrs,
        )

    def with_(self, **changes) -> "RoadEdge":
        return replace(self, **changes)


class RoadGraph:
    """Directed spatial graph: intersections as nodes, roads as edges.

    Node and edge order is insertion order. Instances are treated as
    immutable; every transformation returns a new graph.
    """

    def __init__(self, nodes: Iterable[RoadNode], edges: Iterable[RoadEdge], validate: bool = True):
        self.nodes: dict[str, RoadNode] = {}
        self.edges: dict[str, RoadEdge] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise DuplicateIdError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        for e in edges:
            if e.id in self.edges:
                raise DuplicateIdError(f"duplicate edge id {e.id!r}")
            self.edges[e.id] = e
        if validate:
            self.validate()

    def __len__(self) -> int:
        return len(self.edges)

    def __repr__(self) -> str:
        return f"RoadGraph(|V|={len(self.nodes)}, |E|={len(self.edges)})"

    def validate(self) -> None:
        for n in self.nodes.values():
            if not (math.isfinite(n.x) and math.isfinite(n.y)):
                raise DomainError(f"node {n.id!r} has non-finite coordinates")
        for e in self.edges.values():
            for end in (e.u, e.v):
                if end not in self.nodes:
                    raise ReferentialError(f"edge {e.id!r} references missing node {end!r}")
            if len(e.geometry) < 2:
                raise DegenerateGeometryError(f"edge {e.id!r} geometry has < 2 points")
            first, last = e.geometry[0], e.geometry[-1]
            nu, nv = self.nodes[e.u], self.nodes[e.v]
            if math.hypot(first[0] - nu.x, first[1] - nu.y) > _ENDPOINT_TOL or math.hypot(
                last[0] - nv.x, last[1] - nv.y
            ) > _ENDPOINT_TOL:
                raise DomainError(f"edge {e.id!r} geometry endpoints do not match its nodes")
            true_len = arc_length(e.geometry)
            if abs(e.length_m - true_len) > _LENGTH_RTOL * max(true_len, 1e-12):
                raise DomainError(
                    f"edge {e.id!r} length_m={e.length_m} differs from arc length {true_len}"
                )
            if e.travel_time_s is not None and not (e.travel_time_s >= 0 and math.isfinite(e.travel_time_s)):
                raise DomainError(f"edge {e.id!r} has invalid travel_time_s {e.travel_time_s}")
            if e.throughput_vpd is not None and not (e.throughput_vpd >= 0 and math.isfinite(e.throughput_vpd)):
                raise DomainError(f"edge {e.id!r} has invalid throughput_vpd {e.throughput_vpd}")
            if not (0.0 <= e.bearing_deg < 360.0):
                raise DomainError(f"edge {e.id!r} bearing {e.bearing_deg} outside [0, 360)")

    def bbox_center(self) -> Point:
        if not self.nodes:
            return (0.0, 0.0)
        xs = [n.x for n in self.nodes.values()]
        ys = [n.y for n in self.nodes.values()]
        return ((min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0)


# ---------------------------------------------------------------------------
# JSON-lines I/O
# ---------------------------------------------------------------------------


def _edge_from_record(rec: dict, lineno: int) -> RoadEdge:
    try:
        geometry = tuple((float(p[0]), float(p[1])) for p in rec["geometry"])
        bearing = rec.get("bearing_deg")
        if bearing is None:
            bearing = fallback_bearing(geometry)
        tt = rec.get("travel_time_s")
        tp = rec.get("throughput_vpd")
        highway = rec.get("highway")
        return RoadEdge(
            id=str(rec["id"]),
            u=str(rec["u"]),
            v=str(rec["v"]),
            geometry=geometry,
            length_m=float(rec["length_m"]),
            bearing_deg=float(bearing),
            travel_time_s=None if tt is None else float(tt),
            throughput_vpd=None if tp is None else float(tp),
            oneway=bool(rec.get("oneway", False)),
            bridge=bool(rec.get("bridge", False)),
            tunnel=bool(rec.get("tunnel", False)),
            highway=None if highway is None else str(highway),
            parent_id=rec.get("parent_id") or str(rec["id"]),
        )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        if isinstance(exc, DegenerateGeometryError):
            raise
        raise ParseError(f"line {lineno}: malformed edge record ({exc!r})") from exc


def load_graph(path) -> RoadGraph:
    nodes: list[RoadNode] = []
    edges: list[RoadEdge] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"line {lineno}: expected an object")
            kind = rec.get("kind")
            if kind == "node":
                try:
                    nodes.append(RoadNode(str(rec["id"]), float(rec["x"]), float(rec["y"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"line {lineno}: malformed node record ({exc!r})") from exc
            elif kind == "edge":
                edges.append(_edge_from_record(rec, lineno))
            else:
                raise ParseError(f"line {lineno}: unknown kind {kind!r}")
    return RoadGraph(nodes, edges)


def edge_record(e: RoadEdge) -> dict:
    return {
        "kind": "edge",
        "id": e.id,
        "u": e.u,
        "v": e.v,
        "geometry": [list(p) for p in e.geometry],
        "length_m": e.length_m,
        "bearing_deg": e.bearing_deg,
        "travel_time_s": e.travel_time_s,
        "throughput_vpd": e.throughput_vpd,
        "oneway": e.oneway,
        "bridge": e.bridge,
        "tunnel": e.tunnel,
        "highway": e.highway,
        "parent_id": e.parent_id,
    }


def save_graph(g: RoadGraph, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for n in g.nodes.values():
            fh.write(json.dumps({"kind": "node", "id": n.id, "x": n.x, "y": n.y}) + "\n")
        for e in g.edges.values():
            fh.write(json.dumps(edge_record(e)) + "\n")


# ---------------------------------------------------------------------------
# dual graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DualGraph:
    """Road segments as nodes; ``(i, j)`` means traffic continues from i into j.

    Nodes are integer positions into ``ids`` (sorted edge ids). ``neighbors``
    is the sorted union of in- and out-neighbours used for aggregation.
    """

    ids: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    road_edges: tuple[RoadEdge, ...]
    out_neighbors: tuple[np.ndarray, ...] = field(repr=False)
    in_neighbors: tuple[np.ndarray, ...] = field(repr=False)
    neighbors: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.ids)

    def index(self) -> dict[str, int]:
        return {eid: i for i, eid in enumerate(self.ids)}

    def edge_id_pairs(self) -> set[tuple[str, str]]:
        return {(self.ids[i], self.ids[j]) for i, j in self.edges}


def to_dual(g: RoadGraph) -> DualGraph:
    ids = tuple(sorted(g.edges))
    pos = {eid: i for i, eid in enumerate(ids)}
    by_tail: dict[str, list[int]] = {}
    for eid in ids:
        by_tail.setdefault(g.edges[eid].u, []).append(pos[eid])

    pairs: list[tuple[int, int]] = []
    out_n: list[list[int]] = [[] for _ in ids]
    in_n: list[list[int]] = [[] for _ in ids]
    for i, eid in enumerate(ids):
        for j in by_tail.get(g.edges[eid].v, ()):
            pairs.append((i, j))
            out_n[i].append(j)
            in_n[j].append(i)

    def arr(xs: Sequence[int]) -> np.ndarray:
        return np.asarray(xs, dtype=np.int64)

    both = tuple(np.unique(np.asarray(o + n, dtype=np.int64)) for o, n in zip(out_n, in_n))
    return DualGraph(
        ids=ids,
        edges=tuple(pairs),
        road_edges=tuple(g.edges[eid] for eid in ids),
        out_neighbors=tuple(arr(o) for o in out_n),
        in_neighbors=tuple(arr(n) for n in in_n),
        neighbors=both,
    )


def save_dual(d: DualGraph, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for eid in d.ids:
            fh.write(json.dumps({"kind": "dual_node", "id": eid}) + "\n")
        for i, j in d.edges:
            fh.write(json.dumps({"kind": "dual_edge", "src": d.ids[i], "dst": d.ids[j]}) + "\n")
