"""Point-cloud ingestion, procedural shapes, normalization and resampling.

Point clouds are plain ``(N, 3)`` float64 arrays. Meshes are a small
dataclass around vertex and triangle arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import derive_seed, make_rng


class ParseError(ValueError):
    """Malformed input file. ``line`` is 1-based, or None for whole-file errors."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedFormatError(ParseError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)


def _text(data: bytes | str) -> str:
    if isinstance(data, bytes):
        return data.decode("utf-8", errors="strict")
    return data


def _content_lines(text: str):
    """Yield (lineno, tokens) for non-blank, non-comment lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _floats(tokens, lineno):
    try:
        return [float(tok) for tok in tokens]
    except ValueError:
        raise ParseError(f"non-numeric token in {' '.join(tokens)!r}", lineno) from None


def _ints(tokens, lineno):
    try:
        return [int(tok) for tok in tokens]
    except ValueError:
        raise ParseError(f"non-integer token in {' '.join(tokens)!r}", lineno) from None


def parse_off(data: bytes | str) -> TriangleMesh:
    """Parse an OFF mesh. Polygons with more than three vertices are fan-triangulated."""
    lines = _content_lines(_text(data))
    try:
        lineno, tokens = next(lines)
    except StopIteration:
        raise ParseError("empty file, expected OFF header", 1) from None
    if tokens[0] != "OFF":
        raise ParseError(f"expected 'OFF' header, got {tokens[0]!r}", lineno)
    # some writers put the counts on the header line
    counts = tokens[1:]
    if not counts:
        try:
            lineno, counts = next(lines)
        except StopIteration:
            raise ParseError("missing counts line", lineno + 1) from None
    counts = _ints(counts, lineno)
    if len(counts) < 2:
        raise ParseError("counts line needs vertex and face counts", lineno)
    n_vert, n_face = counts[0], counts[1]
    if n_vert < 0 or n_face < 0:
        raise ParseError("negative element count", lineno)

    vertices = np.empty((n_vert, 3))
    for i in range(n_vert):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError(f"declared {n_vert} vertices, found {i}", lineno + 1) from None
        if len(tokens) < 3:
            raise ParseError("vertex line needs 3 coordinates", lineno)
        vertices[i] = _floats(tokens[:3], lineno)

    triangles = []
    for i in range(n_face):
        try:
            lineno, tokens = next(lines)
        except StopIteration:
            raise ParseError(f"declared {n_face} faces, found {i}", lineno + 1) from None
        k = _ints(tokens[:1], lineno)[0]
        if k < 3:
            raise ParseError(f"face with {k} vertices", lineno)
        if len(tokens) < k + 1:
            raise ParseError(f"face declares {k} indices, found {len(tokens) - 1}", lineno)
        idx = _ints(tokens[1 : k + 1], lineno)
        for j in idx:
            if not 0 <= j < n_vert:
                raise ParseError(f"vertex index {j} out of range [0, {n_vert})", lineno)
        for j in range(1, k - 1):
            triangles.append((idx[0], idx[j], idx[j + 1]))

    extra = next(lines, None)
    if extra is not None:
        raise ParseError("content after the declared vertex and face counts", extra[0])
    return TriangleMesh(vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: TriangleMesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(f"{c:.9g}" for c in v) for v in mesh.vertices]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    return "\n".join(out) + "\n"


def parse_ply_ascii(data: bytes | str) -> np.ndarray:
    """Read the vertex element of an ASCII PLY file as an (N, 3) array.

    Other elements are skipped; only one record per line is assumed, which
    holds for ASCII PLY.
    """
    if isinstance(data, bytes):
        head, sep, _ = data.partition(b"end_header")
        if sep and b"format ascii" not in head:
            fmt = next((ln for ln in head.decode("latin-1").splitlines() if ln.startswith("format")), "")
            raise UnsupportedFormatError(f"unsupported PLY format {fmt.strip()!r}; only ascii is read")
        data = data.decode("utf-8")
    raw = data.splitlines()
    if not raw or raw[0].strip() != "ply":
        raise ParseError("expected 'ply' magic", 1)

    elements: list[tuple[str, int, list[str]]] = []
    body_start = None
    for lineno, line in enumerate(raw[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise UnsupportedFormatError(f"unsupported PLY format {line.strip()!r}; only ascii is read", lineno)
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError("malformed element line", lineno)
            elements.append((tokens[1], _ints(tokens[2:], lineno)[0], []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError("property before any element", lineno)
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(f"unknown header keyword {tokens[0]!r}", lineno)
    if body_start is None:
        raise ParseError("missing end_header")

    body = [(i, ln.split()) for i, ln in enumerate(raw[body_start:], start=body_start + 1) if ln.strip()]
    pos = 0
    points = None
    for name, count, props in elements:
        records = body[pos : pos + count]
        if len(records) < count:
            raise ParseError(f"element {name!r} declares {count} records, found {len(records)}")
        pos += count
        if name != "vertex":
            continue
        try:
            cols = [props.index(axis) for axis in "xyz"]
        except ValueError:
            raise ParseError("vertex element lacks x, y, z properties") from None
        points = np.empty((count, 3))
        for k, (lineno, tokens) in enumerate(records):
            if len(tokens) < len(props):
                raise ParseError(f"vertex record has {len(tokens)} values, expected {len(props)}", lineno)
            points[k] = _floats([tokens[c] for c in cols], lineno)
    if pos < len(body):
        raise ParseError("more records than declared", body[pos][0])
    if points is None:
        raise ParseError("no vertex element")
    return points


def write_ply_ascii(points: np.ndarray) -> str:
    out = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    out += ["property float x", "property float y", "property float z", "end_header"]
    out += [" ".join(f"{c:.9g}" for c in p) for p in points]
    return "\n".join(out) + "\n"


def parse_xyz(data: bytes | str) -> np.ndarray:
    """Whitespace-separated ``x y z`` per line; extra columns are ignored."""
    rows = []
    for lineno, tokens in _content_lines(_text(data)):
        if len(tokens) < 3:
            raise ParseError("expected at least 3 columns", lineno)
        rows.append(_floats(tokens[:3], lineno))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_xyz(points: np.ndarray) -> str:
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in np.asarray(points))


def load_points(path) -> np.ndarray:
    """Load a point set from .xyz / .ply; .off meshes return their vertices."""
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return parse_xyz(data)
    if suffix == ".ply":
        return parse_ply_ascii(data)
    if suffix == ".off":
        return parse_off(data).vertices
    raise UnsupportedFormatError(f"{path}: unrecognized extension {suffix!r}")


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriangleMesh, n: int, seed: int, return_faces: bool = False):
    """Draw ``n`` points uniformly over the mesh surface.

    Faces are chosen with probability proportional to area, then a point is
    placed uniformly inside the triangle with the square-root barycentric map.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero total surface area")
    rng = make_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random((n, 1)))
    r2 = rng.random((n, 1))
    a, b, c = (mesh.vertices[mesh.faces[face_idx, k]] for k in range(3))
    points = (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c
    if return_faces:
        return points, face_idx
    return points


def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    if np.all(points == points[0]):
        return points - points[0]
    out = points
    # a second pass removes the rounding left by the first when the spread is tiny
    for _ in range(2):
        out = out - out.mean(axis=0)
        # bring coordinates to order 1 first so squaring inside the norm cannot underflow
        out = out / np.abs(out).max()
        out = out / np.linalg.norm(out, axis=1).max()
    # division can leave the max norm one ulp above 1
    top = np.linalg.norm(out, axis=1).max()
    if top > 1:
        out /= np.nextafter(top, np.inf)
    return out


def farthest_point_sample(points: np.ndarray, k: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy farthest point sampling, returned in visitation order.

    The first index comes from the seeded stream unless ``start`` is given.
    Ties go to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    first = int(make_rng(seed).integers(n)) if start is None else int(start)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    mind = np.linalg.norm(points - points[first], axis=1)
    mind[first] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, np.linalg.norm(points - points[nxt], axis=1), out=mind)
        mind[chosen[: i + 1]] = -1.0
    return points[chosen]


# Procedural shape families. Ranges are (low, high) for uniform jitter.
SLAB_WIDTH = (1.6, 2.2)
SLAB_DEPTH = (0.8, 1.1)
SLAB_HEIGHT = (0.25, 0.4)
# normalized |z| of any slab sample stays below this
SLAB_Z_BOUND = SLAB_HEIGHT[1] / SLAB_WIDTH[0]

CHAIR_SEAT = (0.8, 1.0)
CHAIR_SEAT_THICK = (0.08, 0.12)
CHAIR_LEG_HEIGHT = (0.7, 1.0)
CHAIR_LEG_WIDTH = (0.06, 0.1)
CHAIR_BACK_HEIGHT = (0.7, 1.1)

PLANE_LENGTH = (2.0, 2.6)
PLANE_BODY = (0.22, 0.32)
PLANE_SPAN = (1.8, 2.4)
PLANE_CHORD = (0.35, 0.55)
PLANE_WING_THICK = (0.05, 0.08)
PLANE_WING_OFFSET = (-0.15, 0.15)

CLASS_NAMES = {0: "slab", 1: "chair", 2: "cross"}


def box_mesh(lo, hi) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # corner i has bit k set when coordinate k is at hi
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = [(q[0], q[1], q[2]) for q in quads] + [(q[0], q[2], q[3]) for q in quads]
    return TriangleMesh(corners, np.array(faces))


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


def _centered_box(center, size) -> TriangleMesh:
    center, half = np.asarray(center, float), np.asarray(size, float) / 2
    return box_mesh(center - half, center + half)


def shape_mesh(label: int, rng: np.random.Generator) -> TriangleMesh:
    u = lambda r: rng.uniform(*r)  # noqa: E731
    if label == 0:
        return _centered_box((0, 0, 0), (u(SLAB_WIDTH), u(SLAB_DEPTH), u(SLAB_HEIGHT)))
    if label == 1:
        seat_x, seat_y = u(CHAIR_SEAT), u(CHAIR_SEAT)
        thick, leg_h, leg_w, back_h = u(CHAIR_SEAT_THICK), u(CHAIR_LEG_HEIGHT), u(CHAIR_LEG_WIDTH), u(CHAIR_BACK_HEIGHT)
        parts = [_centered_box((0, 0, leg_h + thick / 2), (seat_x, seat_y, thick))]
        parts.append(_centered_box((0, -seat_y / 2 + thick / 2, leg_h + thick + back_h / 2), (seat_x, thick, back_h)))
        for sx in (-1, 1):
            for sy in (-1, 1):
                c = (sx * (seat_x - leg_w) / 2, sy * (seat_y - leg_w) / 2, leg_h / 2)
                parts.append(_centered_box(c, (leg_w, leg_w, leg_h)))
        return merge_meshes(parts)
    if label == 2:
        body = u(PLANE_BODY)
        fuselage = _centered_box((0, 0, 0), (u(PLANE_LENGTH), body, body))
        wing = _centered_box((u(PLANE_WING_OFFSET), 0, 0), (u(PLANE_CHORD), u(PLANE_SPAN), u(PLANE_WING_THICK)))
        return merge_meshes([fuselage, wing])
    raise ValueError(f"unknown shape label {label!r}; known labels are {sorted(CLASS_NAMES)}")


def gen_shape(label: int, seed: int, n: int = 2048) -> np.ndarray:
    """Sample a normalized ``n``-point cloud from procedural family ``label``.

    0 is a flat wide box, 1 a seat on four legs with a backrest, 2 a long
    fuselage crossed by a wing. Proportions are jittered per seed.
    """
    if label not in CLASS_NAMES:
        raise ValueError(f"unknown shape label {label!r}; known labels are {sorted(CLASS_NAMES)}")
    mesh = shape_mesh(label, make_rng(seed, "shape", label))
    return normalize(sample_surface(mesh, n, derive_seed(seed, "surface", label)))
