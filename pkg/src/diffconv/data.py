"""Mesh ingestion, surface sampling, augmentation and dataset splits.

File formats handled here:

* OFF meshes (read and write). The ``OFF`` keyword may be fused with the
  counts line (``OFF490 1234 0``), as in some ModelNet files. Polygons with
  more than three vertices are fan-triangulated.
* ``PCD-TXT v1 N d``: a header line followed by ``N`` rows of three
  coordinates and ``d`` feature values.
* Label manifests: CSV with ``path,label`` columns, paths relative to the
  manifest.
"""

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .core import InvalidInputError, as_cloud

DATA_ROOT_ENV = "DIFFCONV_DATA_ROOT"
SYNTHETIC_CLASSES = ("sphere", "cube", "torus")


class OffParseError(ValueError):
    def __init__(self, message, lineno=None, source=None):
        self.lineno = lineno
        self.source = source
        where = f"{source}:" if source else ""
        where += f"{lineno}: " if lineno is not None else " " if where else ""
        super().__init__(f"{where}{message}")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------- OFF

def _tokens(text):
    """Yield ``(lineno, tokens)`` for non-blank lines with comments stripped."""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_off(stream, source=None) -> TriangleMesh:
    """Parse OFF text (a string or a text stream) into a triangle mesh."""
    text = stream if isinstance(stream, str) else stream.read()
    lines = _tokens(text)
    last = 0

    def next_line(what):
        nonlocal last
        try:
            last, toks = next(lines)
        except StopIteration:
            raise OffParseError(f"unexpected end of file while reading {what}",
                                last + 1, source) from None
        return last, toks

    lineno, toks = next_line("header")
    head = toks[0]
    if head.upper().startswith("OFF"):
        rest = head[3:]
        toks = ([rest] if rest else []) + toks[1:]
        if not toks:
            lineno, toks = next_line("counts")
    elif not head.lstrip("+-").isdigit():
        raise OffParseError(f"expected OFF header, got {head!r}", lineno, source)
    if len(toks) < 2:
        raise OffParseError("counts line needs vertex and face counts", lineno, source)
    try:
        n_vert, n_face = int(toks[0]), int(toks[1])
    except ValueError:
        raise OffParseError(f"bad counts {' '.join(toks)!r}", lineno, source) from None
    if n_vert < 0 or n_face < 0:
        raise OffParseError("negative element count", lineno, source)

    # grown line by line so an inflated count cannot force a huge allocation
    verts = []
    for i in range(n_vert):
        lineno, toks = next_line(f"vertex {i}")
        if len(toks) < 3:
            raise OffParseError(f"vertex {i} needs 3 coordinates", lineno, source)
        try:
            v = [float(t) for t in toks[:3]]
        except ValueError:
            raise OffParseError(f"bad vertex coordinates {toks[:3]}", lineno, source) from None
        if not all(np.isfinite(v)):
            raise OffParseError(f"non-finite vertex {i}", lineno, source)
        verts.append(v)
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)

    tris = []
    for i in range(n_face):
        lineno, toks = next_line(f"face {i}")
        try:
            k = int(toks[0])
            idx = [int(t) for t in toks[1:1 + k]]
        except ValueError:
            raise OffParseError(f"bad face entry {' '.join(toks)!r}", lineno, source) from None
        if k < 3 or len(idx) != k:
            raise OffParseError(f"face {i} declares {k} vertices but lists {len(idx)}",
                                lineno, source)
        if min(idx) < 0 or max(idx) >= n_vert:
            raise OffParseError(f"face {i} references a vertex outside [0, {n_vert})",
                                lineno, source)
        tris.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1))
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def read_off(path) -> TriangleMesh:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        return parse_off(fh, source=str(path))


def format_off(mesh: TriangleMesh) -> str:
    out = io.StringIO()
    out.write("OFF\n")
    out.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        out.write(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        out.write("3 " + " ".join(str(int(i)) for i in f) + "\n")
    return out.getvalue()


def write_off(mesh: TriangleMesh, path):
    Path(path).write_text(format_off(mesh), encoding="utf-8")


# ---------------------------------------------------------------- sampling

def sample_surface(mesh: TriangleMesh, n: int, seed=None, return_faces=False):
    """Draw ``n`` points uniformly over the mesh area.

    Faces are chosen with probability proportional to area; inside a face
    the barycentric weights are ``(1 - sqrt(r1), sqrt(r1)(1 - r2), sqrt(r1) r2)``.
    """
    if len(mesh.faces) == 0:
        raise InvalidInputError("mesh has no faces")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise InvalidInputError("mesh has zero surface area")
    rng = _rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.vertices[mesh.faces[face]]
    pts = ((1.0 - r1)[:, None] * tri[:, 0]
           + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return (pts, face) if return_faces else pts


def normalize_unit_sphere(cloud) -> np.ndarray:
    """Centre on the centroid and scale the farthest point to distance 1."""
    pts = as_cloud(cloud)
    centred = pts - pts.mean(axis=0)
    radius = np.sqrt((centred * centred).sum(axis=1).max())
    if not radius > 0:
        raise InvalidInputError("cannot normalise a cloud of coincident points")
    return centred / radius


def augment(cloud, seed=None, translate=0.2) -> np.ndarray:
    """Random translation in ``[-translate, translate]^3`` and a random point order."""
    pts = as_cloud(cloud)
    rng = _rng(seed)
    shift = rng.uniform(-translate, translate, 3) if translate > 0 else np.zeros(3)
    return pts[rng.permutation(len(pts))] + shift


def inject_noise(cloud, m: int, seed=None) -> np.ndarray:
    """Append ``m`` points drawn uniformly from ``[-1, 1]^3``."""
    pts = as_cloud(cloud)
    if m < 0:
        raise InvalidInputError("noise count must be non-negative")
    if m == 0:
        return pts.copy()
    return np.vstack([pts, _rng(seed).uniform(-1.0, 1.0, (m, 3))])


# ---------------------------------------------------------------- synthetic shapes

def cube_mesh() -> TriangleMesh:
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [(q[0], q[i], q[i + 1]) for q in quads for i in (1, 2)]
    return TriangleMesh(v, faces)


def sample_sphere(n, rng):
    p = rng.normal(size=(n, 3))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def sample_torus(n, rng, major=1.0, minor=0.4):
    """Area-uniform torus samples by rejection on the tube angle."""
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])])
    return out[:n]


def sample_shape(name, n, rng):
    if name == "sphere":
        return sample_sphere(n, rng)
    if name == "cube":
        return sample_surface(cube_mesh(), n, rng)
    if name == "torus":
        return sample_torus(n, rng)
    raise InvalidInputError(f"unknown synthetic shape {name!r}")


# ---------------------------------------------------------------- splits

@dataclass
class Item:
    source: Union[np.ndarray, str]
    label: int

    def points(self, num_points=None, seed=None) -> np.ndarray:
        if isinstance(self.source, np.ndarray):
            return self.source
        return load_cloud(self.source, num_points, seed)


@dataclass
class DatasetSplit:
    class_names: List[str]
    train: List[Item] = field(default_factory=list)
    val: List[Item] = field(default_factory=list)
    test: List[Item] = field(default_factory=list)
    kind: str = "official"
    seed: Optional[int] = None

    @property
    def num_classes(self):
        return len(self.class_names)

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def validate(self):
        ids = {name: {id(it) for it in items} for name, items in self.parts().items()}
        if ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"]:
            raise InvalidInputError("splits overlap")
        paths = {name: {it.source for it in items if isinstance(it.source, str)}
                 for name, items in self.parts().items()}
        if paths["train"] & paths["val"] or paths["train"] & paths["test"] or \
                paths["val"] & paths["test"]:
            raise InvalidInputError("splits share files")
        for items in self.parts().values():
            for it in items:
                if not 0 <= it.label < self.num_classes:
                    raise InvalidInputError(f"label {it.label} out of range")
        return self


def split_indices(labels, fractions=(0.7, 0.15, 0.15), seed=0, stratified=False):
    """Random train/val/test index split with the given proportions."""
    labels = np.asarray(labels)
    frac = np.asarray(fractions, dtype=float)
    if frac.shape != (3,) or np.any(frac < 0) or not np.isclose(frac.sum(), 1.0):
        raise InvalidInputError("fractions must be three non-negative numbers summing to 1")
    rng = _rng(seed)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if stratified \
        else [np.arange(len(labels))]
    out = ([], [], [])
    for g in groups:
        g = g[rng.permutation(len(g))]
        n_train = int(round(frac[0] * len(g)))
        n_val = int(round(frac[1] * len(g)))
        n_val = min(n_val, len(g) - n_train)
        out[0].append(g[:n_train])
        out[1].append(g[n_train:n_train + n_val])
        out[2].append(g[n_train + n_val:])
    return tuple(np.sort(np.concatenate(o)) for o in out)


def resample_split(split: DatasetSplit, seed=0, fractions=(0.7, 0.15, 0.15)) -> DatasetSplit:
    """Pool every item and redraw train/val/test with the given proportions."""
    items = split.train + split.val + split.test
    tr, va, te = split_indices([it.label for it in items], fractions, seed)
    return DatasetSplit(list(split.class_names), [items[i] for i in tr], [items[i] for i in va],
                        [items[i] for i in te], kind="resampled", seed=seed).validate()


def synthetic_dataset(classes: Sequence[str] = SYNTHETIC_CLASSES, n_per_class=100,
                      points_per_cloud=256, seed=0, fractions=(0.7, 0.15, 0.15),
                      jitter=0.1) -> DatasetSplit:
    """Surface samples of simple solids with random rotation and per-axis scale jitter.

    Every cloud is normalised to the unit sphere. Splits are stratified so each
    part keeps the class balance.
    """
    if points_per_cloud < 16:
        raise InvalidInputError("points_per_cloud must be at least 16")
    rng = np.random.default_rng(seed)
    items = []
    for label, name in enumerate(classes):
        for _ in range(n_per_class):
            pts = sample_shape(name, points_per_cloud, rng)
            pts = pts * rng.uniform(1.0 - jitter, 1.0 + jitter, 3)
            pts = Rotation.random(random_state=rng).apply(pts)
            items.append(Item(normalize_unit_sphere(pts), label))
    tr, va, te = split_indices([it.label for it in items], fractions, rng, stratified=True)
    return DatasetSplit(list(classes), [items[i] for i in tr], [items[i] for i in va],
                        [items[i] for i in te], kind="synthetic", seed=seed).validate()


# ---------------------------------------------------------------- point-cloud text files

def write_pcd_txt(path_or_stream, points, features=None):
    pts = as_cloud(points)
    feats = np.zeros((len(pts), 0)) if features is None else np.asarray(features, dtype=float)
    if feats.ndim != 2 or len(feats) != len(pts):
        raise InvalidInputError("features must have one row per point")
    lines = [f"PCD-TXT v1 {len(pts)} {feats.shape[1]}"]
    for p, f in zip(pts, feats):
        lines.append(" ".join(repr(float(v)) for v in np.concatenate([p, f])))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_stream, "write"):
        path_or_stream.write(text)
    else:
        Path(path_or_stream).write_text(text, encoding="utf-8")


def read_pcd_txt(path_or_stream, source=None) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(points, features)`` from a PCD-TXT file."""
    if hasattr(path_or_stream, "read"):
        text = path_or_stream.read()
    else:
        source = source or str(path_or_stream)
        text = Path(path_or_stream).read_text(encoding="utf-8")
    rows = [(n, line.split()) for n, line in enumerate(text.splitlines(), 1) if line.strip()]
    if not rows:
        raise OffParseError("empty point-cloud file", 1, source)
    lineno, head = rows[0]
    if len(head) != 4 or head[0] != "PCD-TXT" or head[1] != "v1":
        raise OffParseError("expected header 'PCD-TXT v1 N d'", lineno, source)
    try:
        n, d = int(head[2]), int(head[3])
    except ValueError:
        raise OffParseError("bad counts in header", lineno, source) from None
    if len(rows) - 1 != n:
        raise OffParseError(f"header declares {n} points, found {len(rows) - 1}",
                            rows[-1][0], source)
    data = np.empty((n, 3 + d))
    for i, (lineno, toks) in enumerate(rows[1:]):
        if len(toks) != 3 + d:
            raise OffParseError(f"expected {3 + d} values, got {len(toks)}", lineno, source)
        try:
            data[i] = [float(t) for t in toks]
        except ValueError:
            raise OffParseError("non-numeric value", lineno, source) from None
    return data[:, :3].copy(), data[:, 3:].copy()


def load_cloud(path, num_points=None, seed=None) -> np.ndarray:
    """Load a point cloud from ``.off`` (surface-sampled) or PCD-TXT, normalised."""
    path = str(path)
    if path.lower().endswith(".off"):
        if num_points is None:
            raise InvalidInputError("num_points is required to sample a mesh")
        pts = sample_surface(read_off(path), num_points, seed)
    else:
        pts, _ = read_pcd_txt(path)
    return normalize_unit_sphere(pts)


# ---------------------------------------------------------------- manifests and ModelNet

def read_manifest(path) -> List[Tuple[str, str]]:
    base = Path(path).parent
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append((str(base / row["path"]), row["label"]))
    return out


def write_manifest(path, entries):
    base = Path(path).parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        for p, label in entries:
            w.writerow([os.path.relpath(p, base), label])


def split_from_manifests(train_manifest, test_manifest, val_manifest=None) -> DatasetSplit:
    parts = {"train": read_manifest(train_manifest), "test": read_manifest(test_manifest),
             "val": read_manifest(val_manifest) if val_manifest else []}
    names = sorted({label for entries in parts.values() for _, label in entries})
    index = {n: i for i, n in enumerate(names)}
    mk = {k: [Item(p, index[lab]) for p, lab in v] for k, v in parts.items()}
    return DatasetSplit(names, mk["train"], mk["val"], mk["test"], kind="official").validate()


def modelnet_split(root=None) -> DatasetSplit:
    """Official split from a ``<root>/<class>/{train,test}/*.off`` tree.

    ``root`` defaults to ``$DIFFCONV_DATA_ROOT``. Nothing is downloaded.
    """
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root or not Path(root).is_dir():
        raise FileNotFoundError(
            f"ModelNet directory not found; pass a path or set {DATA_ROOT_ENV}")
    classes = sorted(p.name for p in Path(root).iterdir() if p.is_dir())
    split = DatasetSplit(classes, kind="official")
    for label, name in enumerate(classes):
        for part in ("train", "test"):
            for f in sorted((Path(root) / name / part).glob("*.off")):
                getattr(split, part).append(Item(str(f), label))
    return split.validate()
