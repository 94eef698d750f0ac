"""Procedural parted shapes, incompleteness protocols and point-cloud file I/O.

Shapes are unions of labelled cuboid/cylinder parts sampled on their
surfaces. Partial data comes from removing whole parts or from single-view
visibility culling (hidden point removal).
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateScan, FormatError, InvalidInput

CATEGORIES = ("table", "chair", "lamp")
HPR_RADIUS_FACTOR = 100.0
CAMERA_DISTANCE = 2.0
DENSE_FACTOR = 4


@dataclass
class PartedShape:
    parts: list  # [(label, (n_i, 3) array)]
    category: str

    def __post_init__(self):
        labels = [label for label, _ in self.parts]
        if len(labels) < 2:
            raise InvalidInput("a parted shape needs at least two parts")
        if len(set(labels)) != len(labels):
            raise InvalidInput(f"duplicate part labels: {labels}")

    @property
    def labels(self):
        return [label for label, _ in self.parts]

    @property
    def points(self):
        return np.concatenate([pts for _, pts in self.parts])

    @property
    def point_labels(self):
        return [label for label, pts in self.parts for _ in range(len(pts))]

    def __len__(self):
        return sum(len(pts) for _, pts in self.parts)

    def subsample(self, n, rng):
        """Same shape with ``n`` points, allocated to parts by their current share."""
        counts = _allocate(np.array([len(p) for _, p in self.parts], dtype=float), n)
        parts = [(label, resample(pts, c, rng)) for (label, pts), c in zip(self.parts, counts)]
        return PartedShape(parts, self.category)


@dataclass(frozen=True)
class ScanPose:
    view: tuple  # unit vector from the object centre towards the camera
    up: tuple

    def __post_init__(self):
        v, u = np.asarray(self.view, float), np.asarray(self.up, float)
        if abs(np.linalg.norm(v) - 1) > 1e-9 or abs(np.linalg.norm(u) - 1) > 1e-9:
            raise InvalidInput("scan pose vectors must be unit length")
        if abs(v @ u) > 1e-9:
            raise InvalidInput("scan pose up vector must be orthogonal to the view")

    @classmethod
    def from_view(cls, view, hint=None):
        v = np.asarray(view, float)
        v = v / np.linalg.norm(v)
        hint = np.array([0.0, 0.0, 1.0]) if hint is None else np.asarray(hint, float)
        if abs(v @ hint) > 0.9:
            hint = np.array([1.0, 0.0, 0.0])
        u = hint - (hint @ v) * v
        u /= np.linalg.norm(u)
        return cls(tuple(v.tolist()), tuple(u.tolist()))

    @classmethod
    def random(cls, rng):
        v = rng.normal(size=3)
        return cls.from_view(v, rng.normal(size=3))


# ---------------------------------------------------------------- primitives

def _allocate(weights, n):
    """Split ``n`` into integer counts proportional to ``weights`` (largest remainder, >= 1 each)."""
    k = len(weights)
    if n < k:
        raise InvalidInput(f"cannot give {k} parts at least one point out of {n}")
    share = weights / weights.sum() * (n - k)
    counts = np.floor(share).astype(int) + 1
    rem = n - counts.sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    counts[order[:rem]] += 1
    return counts


def _cuboid(center, size, skip=()):
    """Axis-aligned box; ``skip`` lists glued faces not sampled (0..5 = +x, -x, +y, -y, +z, -z)."""
    return ("cuboid", np.asarray(center, float), np.asarray(size, float), frozenset(skip))


def _cylinder(center, radius, height, skip=()):
    """Vertical (z-axis) cylinder; ``skip`` may contain "top" and/or "bottom" caps."""
    return ("cylinder", np.asarray(center, float), float(radius), float(height), frozenset(skip))


def _faces(prim):
    """Sampled face areas of a primitive, in a fixed face order."""
    if prim[0] == "cuboid":
        a, b, c = prim[2]
        areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        areas[list(prim[3])] = 0.0
        return areas
    _, _, r, h, skip = prim
    cap = np.pi * r * r
    return np.array([2 * np.pi * r * h, 0.0 if "top" in skip else cap, 0.0 if "bottom" in skip else cap])


def _area(prim):
    return float(_faces(prim).sum())


def _sample_surface(prim, n, rng):
    areas = _faces(prim)
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    if prim[0] == "cuboid":
        center, half = prim[1], prim[2] / 2
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts + center
    _, center, r, h, _ = prim
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(face == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(face == 0, rng.uniform(-h / 2, h / 2, size=n), np.where(face == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1) + center


def _table_parts(rng):
    w, d = rng.uniform(0.9, 1.5), rng.uniform(0.5, 1.0)
    t = rng.uniform(0.04, 0.1)
    height = rng.uniform(0.5, 1.0)
    leg = rng.uniform(0.04, 0.09)
    inset = rng.uniform(0.0, 0.15)
    round_legs = rng.uniform() < 0.5
    parts = [("top", _cuboid((0, 0, height - t / 2), (w, d, t)))]
    leg_h = height - t
    for i, (sx, sy) in enumerate([(1, 1), (-1, 1), (-1, -1), (1, -1)]):
        cx = sx * (w / 2 - leg - inset * w / 2)
        cy = sy * (d / 2 - leg - inset * d / 2)
        prim = (_cylinder((cx, cy, leg_h / 2), leg, leg_h, skip=("top",)) if round_legs
                else _cuboid((cx, cy, leg_h / 2), (2 * leg, 2 * leg, leg_h), skip=(4,)))
        parts.append((f"leg{i}", prim))
    return parts


def _chair_parts(rng):
    w, d = rng.uniform(0.45, 0.7), rng.uniform(0.45, 0.7)
    seat_h = rng.uniform(0.35, 0.55)
    t = rng.uniform(0.04, 0.08)
    back_h = rng.uniform(0.3, 0.8)
    back_t = rng.uniform(0.03, 0.08)
    leg = rng.uniform(0.025, 0.05)
    parts = [
        ("seat", _cuboid((0, 0, seat_h - t / 2), (w, d, t))),
        ("back", _cuboid((0, -d / 2 + back_t / 2, seat_h + back_h / 2), (w, back_t, back_h), skip=(5,))),
    ]
    leg_h = seat_h - t
    for i, (sx, sy) in enumerate([(1, 1), (-1, 1), (-1, -1), (1, -1)]):
        parts.append((f"leg{i}", _cuboid((sx * (w / 2 - leg), sy * (d / 2 - leg), leg_h / 2),
                                         (2 * leg, 2 * leg, leg_h), skip=(4,))))
    return parts


def _lamp_parts(rng):
    base_r, base_h = rng.uniform(0.15, 0.3), rng.uniform(0.03, 0.08)
    pole_r, pole_h = rng.uniform(0.015, 0.035), rng.uniform(0.6, 1.2)
    shade_r, shade_h = rng.uniform(0.15, 0.35), rng.uniform(0.15, 0.35)
    return [
        ("base", _cylinder((0, 0, base_h / 2), base_r, base_h)),
        ("pole", _cylinder((0, 0, base_h + pole_h / 2), pole_r, pole_h, skip=("top", "bottom"))),
        ("shade", _cylinder((0, 0, base_h + pole_h + shade_h / 2), shade_r, shade_h)),
    ]


_BUILDERS = {"table": _table_parts, "chair": _chair_parts, "lamp": _lamp_parts}


def normalize(points, center=None, scale=None):
    """Centre on the bounding-box centre and scale into the unit sphere.

    Returns ``(points, center, scale)`` so other clouds can share the transform.
    """
    points = np.asarray(points, dtype=np.float64)
    if center is None:
        center = (points.max(axis=0) + points.min(axis=0)) / 2
    shifted = points - center
    if scale is None:
        scale = float(np.sqrt((shifted ** 2).sum(axis=1).max())) or 1.0
    return shifted / scale, center, scale


def gen_shape(category, rng, n_points=256):
    """A random labelled shape of ``category`` with ``n_points`` surface samples."""
    if category not in _BUILDERS:
        raise InvalidInput(f"unknown category {category!r}; choose from {CATEGORIES}")
    prims = _BUILDERS[category](rng)
    counts = _allocate(np.array([_area(p) for _, p in prims]), n_points)
    clouds = [_sample_surface(p, c, rng) for (_, p), c in zip(prims, counts)]
    union, center, scale = normalize(np.concatenate(clouds))
    parts = [(label, (pts - center) / scale) for (label, _), pts in zip(prims, clouds)]
    return PartedShape(parts, category)


# ---------------------------------------------------------------- protocols

def resample(points, n, rng):
    """Exactly ``n`` points: a seeded subset, or all points plus random repeats when short."""
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if m == 0:
        raise InvalidInput("cannot resample an empty cloud")
    if m >= n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(m), rng.choice(m, size=n - m, replace=True)])
    return points[idx]


def duplicate_to_n(points, n):
    """Tile the points in order and truncate to ``n``."""
    points = np.asarray(points, dtype=np.float64)
    k = len(points)
    if k > n:
        raise InvalidInput(f"cannot duplicate {k} points down to {n}")
    reps = -(-n // k)
    return np.tile(points, (reps, 1))[:n]


def remove_parts(shape, rng, n_out=128, n_removed=None):
    """Delete ``j`` random parts (uniform in [1, k-1] unless given) and resample the rest to ``n_out``.

    Returns ``(partial, removed_labels)``.
    """
    k = len(shape.parts)
    if k < 2:
        raise InvalidInput("need at least two parts to remove one")
    j = int(rng.integers(1, k)) if n_removed is None else int(n_removed)
    if not 1 <= j <= k - 1:
        raise InvalidInput(f"number of removed parts must be in [1, {k - 1}], got {j}")
    removed = set(rng.choice(k, size=j, replace=False).tolist())
    kept = [pts for i, (_, pts) in enumerate(shape.parts) if i not in removed]
    labels = [shape.parts[i][0] for i in sorted(removed)]
    return resample(np.concatenate(kept), n_out, rng), labels


def hidden_point_removal(points, camera, radius_factor=HPR_RADIUS_FACTOR):
    """Boolean mask of points visible from ``camera`` (spherical flipping + convex hull).

    The flipping radius is ``radius_factor`` times the cloud's bounding radius.
    """
    points = np.asarray(points, dtype=np.float64)
    rel = points - np.asarray(camera, dtype=np.float64)
    norm = np.linalg.norm(rel, axis=1)
    if np.any(norm == 0):
        raise DegenerateScan("camera coincides with a point")
    if len(points) < 4:
        return np.ones(len(points), dtype=bool)
    bound = np.linalg.norm(points - points.mean(axis=0), axis=1).max()
    radius = max(radius_factor * bound, 2 * norm.max())
    # dividing by the radius keeps qhull well conditioned
    flipped = (rel + 2 * (radius - norm)[:, None] * rel / norm[:, None]) / radius
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros(3)]))
    except QhullError:
        # coplanar/collinear input: nothing can occlude
        return np.ones(len(points), dtype=bool)
    mask = np.zeros(len(points), dtype=bool)
    mask[hull.vertices[hull.vertices < len(points)]] = True
    return mask


def _points_of(source):
    return source.points if isinstance(source, PartedShape) else np.asarray(source, dtype=np.float64)


def virtual_scan(source, pose, n_out, rng, camera_distance=CAMERA_DISTANCE):
    """Points of ``source`` visible from a camera along ``pose.view``, resampled to ``n_out``."""
    pts = _points_of(source)
    if len(pts) == 0:
        raise InvalidInput("cannot scan an empty cloud")
    camera = np.asarray(pose.view) * camera_distance
    mask = hidden_point_removal(pts, camera)
    if not mask.any():
        raise DegenerateScan("no point visible from this pose")
    return resample(pts[mask], n_out, rng)


def uniform_views(count):
    """``count`` view directions: the six axis directions when count == 6, else a Fibonacci sphere."""
    if count == 6:
        eye = np.eye(3)
        return np.concatenate([eye, -eye])
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def complete_scan(source, n_out, rng, n_views=6, camera_distance=CAMERA_DISTANCE):
    """Union of the points visible from a uniform view set, resampled to ``n_out``."""
    pts = _points_of(source)
    visible = np.zeros(len(pts), dtype=bool)
    for v in uniform_views(n_views):
        visible |= hidden_point_removal(pts, v * camera_distance)
    return resample(pts[visible], n_out, rng)


# ---------------------------------------------------------------- file formats

def write_cloud(path, points, labels=None, header=None):
    """XYZ text: one ``x y z [label]`` line per point, ``#`` comment lines allowed."""
    points = np.asarray(points, dtype=np.float64)
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header)
    for i, (x, y, z) in enumerate(points):
        row = f"{x:.9g} {y:.9g} {z:.9g}"
        if labels is not None:
            row += f" {labels[i]}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path, with_labels=False):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc}", path=path) from exc
    pts, labels, comments = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            comments.append(s[1:].strip())
            continue
        fields = s.split()
        if len(fields) not in (3, 4):
            raise FormatError(f"expected 'x y z [label]', got {len(fields)} fields", lineno, path)
        try:
            xyz = [float(v) for v in fields[:3]]
        except ValueError:
            raise FormatError("non-numeric coordinate", lineno, path) from None
        if not all(np.isfinite(xyz)):
            raise FormatError("non-finite coordinate", lineno, path)
        pts.append(xyz)
        labels.append(fields[3] if len(fields) == 4 else None)
    if not pts:
        raise FormatError("no points in file", path=path)
    arr = np.array(pts, dtype=np.float64)
    if with_labels:
        return arr, labels, comments
    return arr


def write_shape(path, shape):
    write_cloud(path, shape.points, shape.point_labels, header=[f"category: {shape.category}"])


def read_shape(path):
    pts, labels, comments = read_cloud(path, with_labels=True)
    if any(label is None for label in labels):
        raise FormatError("every point of a parted shape needs a label", path=path)
    category = next((c.split(":", 1)[1].strip() for c in comments if c.startswith("category:")), None)
    if category is None:
        raise FormatError("missing '# category:' header", path=path)
    order = list(dict.fromkeys(labels))
    labels = np.array(labels)
    return PartedShape([(lab, pts[labels == lab]) for lab in order], category)


@dataclass
class DatasetManifest:
    """Index of a generated dataset; file paths are relative to the manifest's directory."""

    entries: list
    seed: int
    preset: str
    root: Path = field(default=Path("."), compare=False)

    def to_json(self):
        return json.dumps({"version": 1, "seed": self.seed, "preset": self.preset,
                           "entries": self.entries}, indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path, validate=True):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot parse manifest: {exc}", path=path) from exc
        for key in ("seed", "preset", "entries"):
            if key not in raw:
                raise FormatError(f"manifest lacks '{key}'", path=path)
        m = cls(raw["entries"], raw["seed"], raw["preset"], root=path.parent)
        if validate:
            m.validate()
        return m

    def files(self, entry):
        out = [entry["complete"]]
        if "complete_scan" in entry:
            out.append(entry["complete_scan"])
        out.extend(p["file"] for p in entry.get("partials", []))
        return out

    def validate(self):
        seen = set()
        for entry in self.entries:
            eid = entry.get("id")
            if eid in seen:
                raise FormatError(f"duplicate entry id {eid!r}")
            seen.add(eid)
            for rel in self.files(entry):
                f = self.root / rel
                if not f.is_file():
                    raise FormatError(f"entry {eid!r}: missing file {rel}")
                try:
                    read_cloud(f)
                except FormatError as exc:
                    raise FormatError(f"entry {eid!r}: {exc}") from exc

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]

    def load_complete(self, entry, scan=False):
        return read_cloud(self.root / entry["complete_scan" if scan else "complete"])

    def load_partials(self, entry, protocol=None):
        return [(p, read_cloud(self.root / p["file"])) for p in entry.get("partials", [])
                if protocol is None or p["protocol"] == protocol]


def split_of(entry_id, test_fraction=0.2):
    """Deterministic train/test assignment from a hash of the id."""
    h = int(hashlib.sha256(entry_id.encode()).hexdigest()[:8], 16)
    return "test" if h / 0xFFFFFFFF < test_fraction else "train"


def make_entry(out_dir, entry_id, category, seed, index, n_points, n_partial, protocol,
               n_views=6, scans_per_partial=1):
    """Generate one shape and its partial clouds, write them, and return the manifest entry."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng([seed, index])
    dense = gen_shape(category, rng, DENSE_FACTOR * n_points)
    shape = dense.subsample(n_points, rng)
    entry = {"id": entry_id, "category": category, "split": split_of(entry_id),
             "complete": f"complete/{entry_id}.xyz", "parts": shape.labels, "partials": []}
    (out_dir / "complete").mkdir(parents=True, exist_ok=True)
    (out_dir / "partial").mkdir(parents=True, exist_ok=True)
    write_shape(out_dir / entry["complete"], shape)
    if protocol in ("parts", "both"):
        partial, removed = remove_parts(shape, rng, n_partial)
        rel = f"partial/{entry_id}_parts.xyz"
        write_cloud(out_dir / rel, partial)
        entry["partials"].append({"file": rel, "protocol": "parts", "removed": removed})
    if protocol in ("scan", "both"):
        rel = f"complete/{entry_id}_scan.xyz"
        write_cloud(out_dir / rel, complete_scan(dense, n_points, rng, n_views))
        entry["complete_scan"] = rel
        k = len(dense.parts)
        j = int(rng.integers(1, k))
        removed_idx = set(rng.choice(k, size=j, replace=False).tolist())
        kept = np.concatenate([p for i, (_, p) in enumerate(dense.parts) if i not in removed_idx])
        removed = [dense.parts[i][0] for i in sorted(removed_idx)]
        for s in range(scans_per_partial):
            pose = ScanPose.random(rng)
            for _ in range(16):
                try:
                    cloud = virtual_scan(kept, pose, n_partial, rng)
                    break
                except DegenerateScan:
                    pose = ScanPose.random(rng)
            rel = f"partial/{entry_id}_scan{s}.xyz"
            write_cloud(out_dir / rel, cloud)
            entry["partials"].append({"file": rel, "protocol": "scan", "removed": removed,
                                      "view": list(pose.view), "up": list(pose.up)})
    return entry


def generate_dataset(out_dir, category, count, seed, protocol="parts", n_points=256, n_partial=128,
                     preset="desk", n_views=6, scans_per_partial=1, categories=None):
    """Write ``count`` shapes plus partials under ``out_dir`` and return the manifest."""
    if protocol not in ("parts", "scan", "both"):
        raise InvalidInput(f"unknown protocol {protocol!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cats = categories or [category]
    entries = []
    for i in range(count):
        cat = cats[i % len(cats)]
        entries.append(make_entry(out_dir, f"{cat}_{i:05d}", cat, seed, i, n_points, n_partial,
                                  protocol, n_views, scans_per_partial))
    manifest = DatasetManifest(entries, seed, preset, root=out_dir)
    manifest.write(out_dir / "manifest.json")
    return manifest
