"""Seeded synthetic cities: a jittered street grid, traffic attributes and painted rasters.

Where the class signal lives:

* motorway / trunk / primary / secondary / living_street differ in speed
  (hence travel time), throughput and one-way flags, so graph attributes
  separate them.
* tertiary, unclassified and residential share one speed distribution and
  have heavily overlapping throughput. Only the rasters tell them apart:
  road surface colour, road width, the roof colour of the frontage strips
  and their building height in the DSM.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import HIGHWAY_CLASSES, RoadEdge, RoadGraph, RoadNode, save_graph
from .raster import RGB_RANGE, Channel, RasterGrid, save_raster, write_manifest

MINOR_CLASSES = ("tertiary", "unclassified", "residential", "living_street")
MINOR_PROBS = (0.32, 0.32, 0.32, 0.04)
ARTERIAL_BASE = ("motorway", "trunk", "primary", "secondary")

# speed m/s, throughput veh/day, road width m, road RGB, frontage RGB, building height m
CLASS_PROFILE = {
    "motorway": (27.0, 60000.0, 24.0, (50, 50, 60), (70, 150, 60), 0.0),
    "trunk": (20.0, 35000.0, 18.0, (80, 80, 80), (110, 110, 110), 8.0),
    "primary": (15.0, 20000.0, 14.0, (110, 105, 100), (150, 100, 90), 30.0),
    "secondary": (12.5, 12000.0, 12.0, (135, 135, 120), (130, 130, 160), 20.0),
    "tertiary": (10.0, 4000.0, 9.0, (210, 195, 165), (185, 75, 65), 25.0),
    "unclassified": (10.0, 2500.0, 6.0, (160, 120, 70), (165, 155, 90), 0.0),
    "residential": (10.0, 3000.0, 7.0, (90, 100, 140), (115, 55, 45), 7.0),
    "living_street": (5.0, 400.0, 5.0, (180, 145, 150), (205, 205, 205), 4.0),
}
BACKGROUND_RGB = (70, 110, 60)
FRONTAGE_SETBACK_M = 3.0
FRONTAGE_DEPTH_M = 35.0
FRONTAGE_END_CLEAR_M = 25.0


@dataclass(frozen=True)
class SynthConfig:
    grid_rows: int = 11
    grid_cols: int = 11
    block_m: float = 200.0
    arterial_every: int = 4
    noise_sigma: float = 4.0
    label_noise: float = 0.0
    seed: int = 0
    cellsize: float = 2.0
    jitter_m: float = 6.0
    bend_m: float = 4.0
    margin_m: float = 100.0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1 or self.block_m <= 0 or self.cellsize <= 0:
            raise ConfigError("grid dimensions, block size and cellsize must be positive")
        if self.arterial_every < 1:
            raise ConfigError("arterial_every must be >= 1")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label_noise must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SynthData:
    graph: RoadGraph
    channels: list[Channel]
    labels: dict[str, str]
    config: SynthConfig


def _segments(cfg: SynthConfig, rng: np.random.Generator):
    """Undirected grid segments as (id, node_a, node_b, line key)."""
    segs = []
    for i in range(cfg.grid_rows + 1):
        for j in range(cfg.grid_cols):
            segs.append((f"h{i:02d}_{j:02d}", f"n{i:02d}_{j:02d}", f"n{i:02d}_{j + 1:02d}", ("h", i)))
    for j in range(cfg.grid_cols + 1):
        for i in range(cfg.grid_rows):
            segs.append((f"v{j:02d}_{i:02d}", f"n{i:02d}_{j:02d}", f"n{i + 1:02d}_{j:02d}", ("v", j)))
    return segs


def _assign_classes(cfg: SynthConfig, segs, rng: np.random.Generator) -> dict[str, str]:
    lines = sorted({key for *_, key in segs if key[1] % cfg.arterial_every == 0})
    pool = list(ARTERIAL_BASE)
    while len(pool) < len(lines):
        pool.append(str(rng.choice(["trunk", "primary", "secondary"])))
    pool = pool[: len(lines)]
    order = rng.permutation(len(lines))
    line_class = {lines[k]: pool[order[k]] for k in range(len(lines))}
    out = {}
    for sid, _, _, key in segs:
        if key in line_class:
            out[sid] = line_class[key]
        else:
            out[sid] = MINOR_CLASSES[int(rng.choice(len(MINOR_CLASSES), p=MINOR_PROBS))]
    return out


def _paint(cfg, grids: dict[str, np.ndarray], road_cls: np.ndarray, origin, geom: np.ndarray, klass: str, layer: str):
    cs = cfg.cellsize
    nrows, ncols = road_cls.shape
    speed, tp, width, road_rgb, front_rgb, height = CLASS_PROFILE[klass]
    half = width / 2.0
    reach = half + FRONTAGE_SETBACK_M + FRONTAGE_DEPTH_M + cs
    x0, y0 = geom.min(axis=0) - reach
    x1, y1 = geom.max(axis=0) + reach
    top = origin[1] + nrows * cs
    c0 = max(int((x0 - origin[0]) / cs), 0)
    c1 = min(int((x1 - origin[0]) / cs) + 1, ncols)
    r0 = max(int((top - y1) / cs), 0)
    r1 = min(int((top - y0) / cs) + 1, nrows)
    if c0 >= c1 or r0 >= r1:
        return
    xc = origin[0] + (np.arange(c0, c1) + 0.5) * cs
    yc = top - (np.arange(r0, r1) + 0.5) * cs
    X, Y = np.meshgrid(xc, yc)

    if layer == "frontage":
        a, b = geom[0], geom[-1]
        chord = b - a
        L = float(np.hypot(*chord))
        ux, uy = chord / L
        t = (X - a[0]) * ux + (Y - a[1]) * uy
        lat = np.abs(-(X - a[0]) * uy + (Y - a[1]) * ux)
        inner = half + FRONTAGE_SETBACK_M
        mask = (lat >= inner) & (lat <= inner + FRONTAGE_DEPTH_M)
        mask &= (t >= FRONTAGE_END_CLEAR_M) & (t <= L - FRONTAGE_END_CLEAR_M)
        rgb, h = front_rgb, height
    else:
        dist = np.full(X.shape, np.inf)
        for p, q in zip(geom[:-1], geom[1:]):
            d = q - p
            ll = float(d @ d)
            s = np.clip(((X - p[0]) * d[0] + (Y - p[1]) * d[1]) / ll, 0.0, 1.0)
            dist = np.minimum(dist, np.hypot(X - p[0] - s * d[0], Y - p[1] - s * d[1]))
        mask = dist <= half
        rgb, h = road_rgb, 0.0
        road_cls[r0:r1, c0:c1][mask] = HIGHWAY_CLASSES.index(klass)
    for k, ch in enumerate("RGB"):
        grids[ch][r0:r1, c0:c1][mask] = rgb[k]
    grids["DSM"][r0:r1, c0:c1][mask] = h


def generate_synthetic(cfg: SynthConfig | None = None) -> SynthData:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)

    pos = {}
    for i in range(cfg.grid_rows + 1):
        for j in range(cfg.grid_cols + 1):
            jit = rng.normal(0.0, cfg.jitter_m, size=2) if cfg.jitter_m > 0 else np.zeros(2)
            pos[f"n{i:02d}_{j:02d}"] = np.array([j * cfg.block_m, i * cfg.block_m]) + jit
    nodes = [RoadNode(nid, float(p[0]), float(p[1])) for nid, p in pos.items()]

    segs = _segments(cfg, rng)
    seg_class = _assign_classes(cfg, segs, rng)

    edges: list[RoadEdge] = []
    seg_geom = {}
    for sid, a, b, _ in segs:
        pa, pb = pos[a], pos[b]
        d = pb - pa
        normal = np.array([-d[1], d[0]]) / np.hypot(*d)
        mid = (pa + pb) / 2.0 + normal * rng.normal(0.0, cfg.bend_m)
        geom = np.vstack([pa, mid, pb])
        seg_geom[sid] = geom
        klass = seg_class[sid]
        speed, tp, *_ = CLASS_PROFILE[klass]
        major = klass in ("motorway", "trunk")
        bridge = bool(major and rng.random() < 0.08)
        tunnel = bool(major and not bridge and rng.random() < 0.04)
        for suffix, (u, v, g) in (("f", (a, b, geom)), ("b", (b, a, geom[::-1]))):
            e = RoadEdge.from_geometry(
                f"{sid}{suffix}",
                u,
                v,
                g,
                oneway=major,
                bridge=bridge,
                tunnel=tunnel,
                highway=klass,
                throughput_vpd=float(tp * rng.lognormal(0.0, 0.3)),
            )
            e = e.with_(travel_time_s=e.length_m / (speed * float(rng.lognormal(0.0, 0.08))))
            edges.append(e)

    labels = {e.id: e.highway for e in edges}
    if cfg.label_noise > 0:
        k = int(round(cfg.label_noise * len(edges)))
        picked = rng.choice(len(edges), size=k, replace=False)
        shuffled = rng.permutation([edges[i].highway for i in picked])
        for i, lab in zip(picked, shuffled):
            edges[i] = edges[i].with_(highway=str(lab))
    graph = RoadGraph(nodes, edges)

    channels = _render(cfg, seg_geom, seg_class, rng)
    return SynthData(graph, channels, labels, cfg)


def _render(cfg: SynthConfig, seg_geom, seg_class, rng) -> list[Channel]:
    cs = cfg.cellsize
    x0 = y0 = -cfg.margin_m
    ncols = int(math.ceil((cfg.grid_cols * cfg.block_m + 2 * cfg.margin_m) / cs))
    nrows = int(math.ceil((cfg.grid_rows * cfg.block_m + 2 * cfg.margin_m) / cs))
    grids = {ch: np.full((nrows, ncols), float(v)) for ch, v in zip("RGB", BACKGROUND_RGB)}
    grids["DSM"] = np.zeros((nrows, ncols))
    road_cls = np.full((nrows, ncols), -1, dtype=np.int64)
    for layer in ("frontage", "road"):
        for sid in sorted(seg_geom):
            _paint(cfg, grids, road_cls, (x0, y0), seg_geom[sid], seg_class[sid], layer)

    sigma = cfg.noise_sigma
    for ch in "RGB":
        noisy = grids[ch] + rng.normal(0.0, sigma, size=grids[ch].shape)
        grids[ch] = np.clip(np.rint(noisy), 0, 255)
    grids["DSM"] = np.round(np.maximum(grids["DSM"] + rng.normal(0.0, sigma / 8.0, size=grids["DSM"].shape), 0.0), 2)

    _check_planted_signal(grids, road_cls, sigma)

    channels = []
    for ch in ("R", "G", "B", "DSM"):
        grid = RasterGrid(x0, y0, cs, ncols, nrows, -9999.0, grids[ch], ch)
        if ch == "DSM":
            lo, hi = grid.valid_range()
            channels.append(Channel(grid, lo, max(hi, lo + 1.0)))
        else:
            channels.append(Channel(grid, *RGB_RANGE))
    return channels


def _check_planted_signal(grids, road_cls, sigma: float) -> None:
    """Every pair of classes must differ by >= 3 sigma in some RGB road-surface mean."""
    present = [k for k in range(len(HIGHWAY_CLASSES)) if np.any(road_cls == k)]
    means = {k: np.array([grids[ch][road_cls == k].mean() for ch in "RGB"]) for k in present}
    for a in present:
        for b in present:
            if a < b and np.max(np.abs(means[a] - means[b])) < 3.0 * sigma:
                raise AssertionError(
                    f"planted raster signal too weak between {HIGHWAY_CLASSES[a]} and {HIGHWAY_CLASSES[b]}"
                )


def class_fractions(labels: dict[str, str]) -> dict[str, float]:
    n = len(labels)
    return {c: sum(1 for v in labels.values() if v == c) / n for c in HIGHWAY_CLASSES}


def write_synthetic(data: SynthData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"graph": out / "graph.jsonl", "manifest": out / "manifest.json", "labels": out / "labels.json"}
    save_graph(data.graph, paths["graph"])
    entries = []
    for ch in data.channels:
        fname = f"{ch.name}.asc"
        save_raster(ch.grid, out / fname, fmt="%d" if ch.name in "RGB" else "%.2f")
        entries.append({"name": ch.name, "path": fname, "range_lo": ch.range_lo, "range_hi": ch.range_hi})
    write_manifest(paths["manifest"], entries)
    paths["labels"].write_text(json.dumps(data.labels, indent=0, sort_keys=True) + "\n", encoding="utf-8")
    (out / "synth_config.json").write_text(json.dumps(asdict(data.config), indent=2, sort_keys=True) + "\n")
    return paths
