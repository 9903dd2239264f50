"""Per-segment feature vectors and train-only z-score normalisation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AttributeMissingError, DimensionMismatchError, ParseError, SplitError
from .graph import RoadEdge, resample_geometry
from .raster import N_BINS, Histogram

DEFAULT_CHANNELS = ("R", "G", "B", "DSM")
STD_FLOOR = 1e-9


@dataclass(frozen=True)
class FeatureSpec:
    geometry_points: int = 5
    include_vision: bool = False
    channels: tuple[str, ...] = DEFAULT_CHANNELS
    bins: int = N_BINS
    gps_presence: bool = False
    origin: tuple[float, float] = (0.0, 0.0)
    # which feature groups bypass z-scoring
    passthrough: tuple[str, ...] = ("flags", "gps_presence", "hist")

    @property
    def layout(self) -> list[tuple[str, int]]:
        out = [
            ("length_m", 1),
            ("bearing_sincos", 2),
            ("centroid_km", 2),
            ("geometry", 2 * self.geometry_points),
            ("flags", 3),
            ("travel_time_s", 1),
            ("throughput_vpd", 1),
        ]
        if self.gps_presence:
            out.append(("gps_presence", 2))
        if self.include_vision:
            out.extend((f"hist_{c}", self.bins) for c in self.channels)
        return out

    @property
    def dim(self) -> int:
        return sum(w for _, w in self.layout)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, width in self.layout:
            out[name] = slice(start, start + width)
            start += width
        return out

    def passthrough_mask(self) -> np.ndarray:
        mask = np.zeros(self.dim, dtype=bool)
        for name, sl in self.slices().items():
            group = "hist" if name.startswith("hist_") else name
            if group in self.passthrough:
                mask[sl] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "geometry_points": self.geometry_points,
            "include_vision": self.include_vision,
            "channels": list(self.channels),
            "bins": self.bins,
            "gps_presence": self.gps_presence,
            "origin": list(self.origin),
            "passthrough": list(self.passthrough),
            "layout": [[n, w] for n, w in self.layout],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        spec = cls(
            geometry_points=int(d.get("geometry_points", 5)),
            include_vision=bool(d.get("include_vision", False)),
            channels=tuple(d.get("channels", DEFAULT_CHANNELS)),
            bins=int(d.get("bins", N_BINS)),
            gps_presence=bool(d.get("gps_presence", False)),
            origin=tuple(d.get("origin", (0.0, 0.0))),
            passthrough=tuple(d.get("passthrough", ("flags", "gps_presence", "hist"))),
        )
        if "layout" in d and [tuple(x) for x in d["layout"]] != spec.layout:
            raise ParseError("serialised feature layout does not match its spec fields")
        return spec


def assemble_features(edge: RoadEdge, spec: FeatureSpec, histograms: Sequence[Histogram] | None = None) -> np.ndarray:
    if spec.include_vision != (histograms is not None):
        raise DimensionMismatchError("histograms must be given exactly when include_vision is set")
    missing_gps = edge.travel_time_s is None or edge.throughput_vpd is None
    if missing_gps and not spec.gps_presence:
        raise AttributeMissingError(f"edge {edge.id!r} lacks GPS attributes and gps_presence is off")

    centroid, offsets = resample_geometry(edge.geometry, spec.geometry_points)
    b = math.radians(edge.bearing_deg)
    parts = [
        [edge.length_m],
        [math.sin(b), math.cos(b)],
        [(centroid[0] - spec.origin[0]) / 1000.0, (centroid[1] - spec.origin[1]) / 1000.0],
        offsets,
        [float(edge.oneway), float(edge.bridge), float(edge.tunnel)],
        [edge.travel_time_s or 0.0],
        [edge.throughput_vpd or 0.0],
    ]
    if spec.gps_presence:
        parts.append([float(edge.travel_time_s is not None), float(edge.throughput_vpd is not None)])
    if histograms is not None:
        if len(histograms) != len(spec.channels):
            raise DimensionMismatchError(f"expected {len(spec.channels)} histograms, got {len(histograms)}")
        for h in histograms:
            if len(h.bins) != spec.bins:
                raise DimensionMismatchError(f"histogram has {len(h.bins)} bins, spec wants {spec.bins}")
            parts.append(h.bins)
    vec = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    if vec.shape[0] != spec.dim:
        raise DimensionMismatchError(f"assembled {vec.shape[0]} values, layout says {spec.dim}")
    if not np.all(np.isfinite(vec)):
        raise DimensionMismatchError(f"edge {edge.id!r} produced non-finite features")
    return vec


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    passthrough: np.ndarray = field(default=None)

    @classmethod
    def fit(cls, train: np.ndarray, passthrough: np.ndarray | None = None) -> "Normalizer":
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or train.shape[0] == 0:
            raise SplitError("cannot fit a normaliser without training vectors")
        if passthrough is None:
            passthrough = np.zeros(train.shape[1], dtype=bool)
        mean, std = train.mean(axis=0), train.std(axis=0)
        # round-off spread (e.g. the middle resampled point of straight segments) counts as constant
        std = np.where(std <= STD_FLOOR * (1.0 + np.abs(mean)), 0.0, std)
        return cls(mean, std, np.asarray(passthrough, dtype=bool))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        scale = (self.std > 0) & ~self.passthrough
        out = x.copy()
        out[..., scale] = (x[..., scale] - self.mean[scale]) / self.std[scale]
        return out

    def to_dict(self) -> dict:
        return {
            "mean": [float(v).hex() for v in self.mean],
            "std": [float(v).hex() for v in self.std],
            "passthrough": [bool(v) for v in self.passthrough],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            np.array([float.fromhex(v) for v in d["mean"]]),
            np.array([float.fromhex(v) for v in d["std"]]),
            np.array(d["passthrough"], dtype=bool),
        )


def fit_apply_normalizer(train: np.ndarray, everything: np.ndarray, passthrough: np.ndarray | None = None):
    """Fit on ``train`` only and transform ``everything``; returns (normalised, normaliser)."""
    norm = Normalizer.fit(train, passthrough)
    return norm.apply(everything), norm


def save_features(path, edge_ids: Sequence[str], matrix: np.ndarray, spec: FeatureSpec) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", "spec": spec.to_dict()}) + "\n")
        for eid, row in zip(edge_ids, matrix):
            fh.write(json.dumps({"edge_id": eid, "values": [float(v) for v in row]}) + "\n")


def load_features(path) -> tuple[FeatureSpec, list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty feature file")
    head = json.loads(lines[0])
    if head.get("kind") != "header":
        raise ParseError(f"{path}: first line must be the layout header")
    spec = FeatureSpec.from_dict(head["spec"])
    ids, rows = [], []
    for ln in lines[1:]:
        rec = json.loads(ln)
        if len(rec["values"]) != spec.dim:
            raise DimensionMismatchError(f"{path}: {rec['edge_id']} has {len(rec['values'])} values, want {spec.dim}")
        ids.append(rec["edge_id"])
        rows.append(rec["values"])
    return spec, ids, np.array(rows, dtype=np.float64).reshape(len(rows), spec.dim)
