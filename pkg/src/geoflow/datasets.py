"""Synthetic shape datasets: circles and blobs (in-distribution), triangles and
envelopes (out-of-distribution stand-ins for held-out drawing classes).

All generators are pure functions of (args, seed); per-sample seeds are
spawned from one SeedSequence so results do not depend on generation order.
Images are antialiased with a 2-cell smoothstep edge and normalized to [0, 1];
label masks threshold the filled shape.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .grid import DTYPE, GridSpec, ScalarField

ID_FAMILIES = ("circle", "blob")
OOD_FAMILIES = ("triangle", "envelope")
FAMILIES = ID_FAMILIES + OOD_FAMILIES
SPLITS = ("train", "val", "test", "ood")


@dataclass(frozen=True)
class LabeledImage:
    image: ScalarField
    labels: torch.Tensor  # integer mask, 0 = background

    def __post_init__(self):
        if tuple(self.labels.shape) != self.image.grid.dims:
            raise ValueError("label shape does not match image grid")


@dataclass(frozen=True)
class RegistrationPair:
    source: LabeledImage
    target: LabeledImage
    family: str

    @property
    def grid(self) -> GridSpec:
        return self.source.image.grid


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _node_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(n) / n
    return x[:, None], x[None, :]


def _render_inside(signed_dist: np.ndarray, cell: float, edge_cells: float = 2.0) -> np.ndarray:
    """Antialiased indicator from a signed distance (positive inside)."""
    return _smoothstep(signed_dist / (edge_cells * cell) + 0.5)


def _labeled(grid: GridSpec, intensity: np.ndarray) -> LabeledImage:
    img = ScalarField(grid, torch.tensor(intensity, dtype=DTYPE))
    labels = (img.values >= 0.5).long()
    return LabeledImage(img, labels)


def _circle(grid: GridSpec, rng: np.random.Generator) -> LabeledImage:
    n = grid.dims[0]
    cx, cy = 0.5 + rng.uniform(-0.1, 0.1, size=2)
    radius = rng.uniform(0.15, 0.35)
    x, y = _node_coords(n)
    dist = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
    return _labeled(grid, _render_inside(radius - dist, 1.0 / n))


def _blob(grid: GridSpec, rng: np.random.Generator) -> LabeledImage:
    """Star-convex blob: radius modulated by a few random angular harmonics."""
    n = grid.dims[0]
    cx, cy = 0.5 + rng.uniform(-0.08, 0.08, size=2)
    r0 = rng.uniform(0.16, 0.28)
    amps = rng.uniform(0.0, 0.25, size=3) * r0
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    x, y = _node_coords(n)
    theta = np.arctan2(y - cy, x - cx)
    boundary = r0 + sum(
        a * np.cos((k + 2) * theta + p) for k, (a, p) in enumerate(zip(amps, phases))
    )
    dist = np.sqrt((x - cx) ** 2 + (y - cy) ** 2)
    return _labeled(grid, _render_inside(boundary - dist, 1.0 / n))


def _segment_distance(px, py, ax, ay, bx, by):
    """Distance from points (px, py) to the segment (a, b)."""
    vx, vy = bx - ax, by - ay
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.sqrt((px - (ax + t * vx)) ** 2 + (py - (ay + t * vy)) ** 2)


def _triangle(grid: GridSpec, rng: np.random.Generator) -> LabeledImage:
    n = grid.dims[0]
    margin = 2.0 / n
    while True:
        verts = rng.uniform(margin + 0.08, 1.0 - margin - 0.08, size=(3, 2))
        area = 0.5 * abs(
            (verts[1, 0] - verts[0, 0]) * (verts[2, 1] - verts[0, 1])
            - (verts[2, 0] - verts[0, 0]) * (verts[1, 1] - verts[0, 1])
        )
        if area > 0.02:
            break
    x, y = _node_coords(n)
    px = np.broadcast_to(x, (n, n))
    py = np.broadcast_to(y, (n, n))
    inside = np.ones((n, n), dtype=bool)
    edge_dist = np.full((n, n), np.inf)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cx, cy = verts[(i + 2) % 3]
        side = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        ref = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        inside &= side * ref >= 0
        edge_dist = np.minimum(edge_dist, _segment_distance(px, py, ax, ay, bx, by))
    signed = np.where(inside, edge_dist, -edge_dist)
    return _labeled(grid, _render_inside(signed, 1.0 / n))


def _envelope(grid: GridSpec, rng: np.random.Generator) -> LabeledImage:
    """Envelope outline: a rectangle border plus the two flap diagonals."""
    n = grid.dims[0]
    x0, y0 = rng.uniform(0.12, 0.25, size=2)
    x1 = rng.uniform(0.7, 0.88)
    y1 = rng.uniform(0.75, 0.88)
    flap_y = rng.uniform(0.4, 0.6) * (x1 - x0) + x0
    x, y = _node_coords(n)
    px = np.broadcast_to(x, (n, n))
    py = np.broadcast_to(y, (n, n))
    segs = [
        (x0, y0, x0, y1), (x1, y0, x1, y1), (x0, y0, x1, y0), (x0, y1, x1, y1),
        (x0, y0, flap_y, (y0 + y1) / 2.0), (x1, y0, flap_y, (y0 + y1) / 2.0),
    ]
    dist = np.full((n, n), np.inf)
    for ax, ay, bx, by in segs:
        dist = np.minimum(dist, _segment_distance(px, py, ax, ay, bx, by))
    width = 1.2 / n
    return _labeled(grid, _render_inside(width - dist, 1.0 / n))


_GENERATORS = {
    "circle": _circle,
    "blob": _blob,
    "triangle": _triangle,
    "envelope": _envelope,
}


def _spawned_rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def gen_circles(n: int, dims, seed: int) -> list[RegistrationPair]:
    """n source/target circle pairs, each drawn independently."""
    return gen_shapes("circle", n, dims, seed)


def gen_shapes(family: str, n: int, dims, seed: int) -> list[RegistrationPair]:
    """n pairs from one shape family."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if isinstance(dims, int):
        dims = (dims, dims)
    if min(dims) < 16:
        raise ValueError(f"dims must be >= 16, got {dims}")
    grid = GridSpec.unit(dims)
    gen = _GENERATORS[family]
    pairs = []
    for rng in _spawned_rngs(seed, n):
        source = gen(grid, rng)
        target = gen(grid, rng)
        pairs.append(RegistrationPair(source, target, family))
    return pairs


def gen_mixed(families, n: int, dims, seed: int) -> list[RegistrationPair]:
    """n pairs cycling through the given families, seeded per sample."""
    families = list(families)
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown family {f!r}; expected one of {FAMILIES}")
    if isinstance(dims, int):
        dims = (dims, dims)
    if min(dims) < 16:
        raise ValueError(f"dims must be >= 16, got {dims}")
    grid = GridSpec.unit(dims)
    pairs = []
    for i, rng in enumerate(_spawned_rngs(seed, n)):
        family = families[i % len(families)]
        gen = _GENERATORS[family]
        pairs.append(RegistrationPair(gen(grid, rng), gen(grid, rng), family))
    return pairs


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a generated dataset: file paths plus provenance."""

    entries: list[dict]
    dims: tuple[int, ...]
    seed: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        families = {e["family"] for e in self.entries}
        if self.split == "ood" and not families.issubset(set(OOD_FAMILIES)):
            raise ValueError(f"ood split may only contain {OOD_FAMILIES}, got {families}")
        if self.split == "train" and not families.issubset(set(ID_FAMILIES)):
            raise ValueError(f"train split may only contain {ID_FAMILIES}, got {families}")


def write_dataset(pairs: list[RegistrationPair], out_dir, split: str, seed: int) -> Path:
    """Write GFLD files plus manifest.json; returns the manifest path."""
    from .fileio import write_field

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        names = {}
        for role in ("source", "target"):
            li: LabeledImage = getattr(pair, role)
            img_name = f"{i:05d}_{role}.gfld"
            lbl_name = f"{i:05d}_{role}_labels.gfld"
            write_field(out / img_name, li.image)
            write_field(out / lbl_name,
                        ScalarField(li.image.grid, li.labels.to(DTYPE)))
            names[role] = img_name
            names[role + "_labels"] = lbl_name
        entries.append({"family": pair.family, **names})
    grid = pairs[0].grid if pairs else None
    manifest = {
        "schema": "geoflow-manifest/1",
        "dims": list(grid.dims) if grid else [],
        "seed": seed,
        "split": split,
        "entries": entries,
    }
    DatasetManifest(entries, tuple(manifest["dims"]), seed, split)  # validate
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> tuple[DatasetManifest, list[RegistrationPair]]:
    """Load a manifest and every pair it references; missing files are errors."""
    from .fileio import read_field

    path = Path(path)
    raw = json.loads(path.read_text())
    if raw.get("schema") != "geoflow-manifest/1":
        raise ValueError(f"unsupported manifest schema {raw.get('schema')!r} in {path}")
    manifest = DatasetManifest(raw["entries"], tuple(raw["dims"]), raw["seed"], raw["split"])
    base = path.parent
    pairs = []
    for e in manifest.entries:
        sides = {}
        for role in ("source", "target"):
            img = read_field(base / e[role])
            lbl = read_field(base / e[role + "_labels"])
            sides[role] = LabeledImage(img, lbl.values.round().long())
        pairs.append(RegistrationPair(sides["source"], sides["target"], e["family"]))
    return manifest, pairs


def stack_batch(pairs: list[RegistrationPair]) -> torch.Tensor:
    """Stack pairs into a (N, 2, *dims) tensor of (source, target) channels."""
    return torch.stack([
        torch.stack([p.source.image.values, p.target.image.values]) for p in pairs
    ])
