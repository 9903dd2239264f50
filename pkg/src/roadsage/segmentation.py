"""Split road edges into shorter segments by travel time and by length.

Each edge whose attribute value ``a`` exceeds the target ``t`` is cut at the
arc-length fractions ``i/n`` (``n = ceil(a/t)``) and replaced by a chain of
``n`` children. Endpoint intersections are kept; the interstitial nodes are
new. Children inherit the parent's ``parent_id`` so predictions can be voted
back onto the original road.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import AttributeMissingError, ConfigError, DomainError
from .graph import (
    Point,
    RoadEdge,
    RoadGraph,
    RoadNode,
    as_array,
    cumulative_lengths,
    fallback_bearing,
    point_at_distance,
    substring,
)

SEGMENT_ATTRS = ("travel_time_s", "length_m")


@dataclass(frozen=True)
class SegmentationConfig:
    target_traveltime_s: float = 15.0
    target_length_m: float = 120.0

    def __post_init__(self):
        if not (self.target_traveltime_s > 0 and self.target_length_m > 0):
            raise ConfigError("segmentation targets must be strictly positive")


def interpolate_along(geometry, t: float) -> tuple[Point, np.ndarray, np.ndarray]:
    """Point at arc-length fraction ``t`` plus the sub-polylines before and after it."""
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"fraction {t} outside [0, 1]")
    pts = as_array(geometry)
    cum = cumulative_lengths(pts)
    total = cum[-1]
    if total <= 0.0:
        raise DomainError("cannot interpolate along a zero-length polyline")
    s = t * total
    _, p = point_at_distance(pts, cum, s)
    return (float(p[0]), float(p[1])), substring(pts, 0.0, s), substring(pts, s, total)


def number_of_pieces(value: float, target: float) -> int:
    """``ceil(value / target)``, at least 1, bumped if rounding left a piece above target."""
    n = max(1, math.ceil(value / target))
    while value / n > target:
        n += 1
    return n


def _split_edge(edge: RoadEdge, n: int) -> tuple[list[RoadNode], list[RoadEdge]]:
    pts = as_array(edge.geometry)
    cum = cumulative_lengths(pts)
    total = cum[-1]
    if total <= 0.0:
        raise DomainError(f"edge {edge.id!r} has zero arc length and cannot be split")

    cut_s = [total * i / n for i in range(n + 1)]
    cut_s[-1] = total
    new_nodes = []
    chain = [edge.u]
    for i in range(1, n):
        _, p = point_at_distance(pts, cum, cut_s[i])
        nid = f"{edge.id}#v{i}"
        new_nodes.append(RoadNode(nid, float(p[0]), float(p[1])))
        chain.append(nid)
    chain.append(edge.v)

    children = []
    for i in range(1, n + 1):
        geom = substring(pts, cut_s[i - 1], cut_s[i])
        # snap ends to the exact node coordinates shared with neighbours
        if i == 1:
            geom[0] = pts[0]
        if i == n:
            geom[-1] = pts[-1]
        children.append(
            edge.with_(
                id=f"{edge.id}#{i}",
                u=chain[i - 1],
                v=chain[i],
                geometry=tuple((float(x), float(y)) for x, y in geom),
                length_m=edge.length_m / n,
                bearing_deg=fallback_bearing(geom),
                travel_time_s=None if edge.travel_time_s is None else edge.travel_time_s / n,
                parent_id=edge.parent_id,
            )
        )
    return new_nodes, children


def _natural_key(eid: str) -> tuple:
    # "e#2" sorts before "e#10"
    return tuple(int(t) if t.isdigit() else t for t in re.split(r"(\d+)", eid))


def segment_by_attribute(g: RoadGraph, attr: str, target: float) -> RoadGraph:
    if attr not in SEGMENT_ATTRS:
        raise ConfigError(f"cannot segment by {attr!r}; expected one of {SEGMENT_ATTRS}")
    if not target > 0:
        raise ConfigError("segmentation target must be strictly positive")

    nodes = list(g.nodes.values())
    edges: list[RoadEdge] = []
    # children ordered by parent id, then index
    for eid in sorted(g.edges, key=_natural_key):
        edge = g.edges[eid]
        value = getattr(edge, attr)
        if value is None or not math.isfinite(value) or value < 0:
            raise AttributeMissingError(f"edge {eid!r} has no usable {attr}")
        n = number_of_pieces(value, target)
        if n <= 1:
            edges.append(edge)
            continue
        new_nodes, children = _split_edge(edge, n)
        nodes.extend(new_nodes)
        edges.extend(children)
    return RoadGraph(nodes, edges)


def segment_pipeline(g: RoadGraph, cfg: SegmentationConfig | None = None) -> RoadGraph:
    """Travel-time pass first, then the length pass on its output."""
    cfg = cfg or SegmentationConfig()
    g = segment_by_attribute(g, "travel_time_s", cfg.target_traveltime_s)
    return segment_by_attribute(g, "length_m", cfg.target_length_m)
