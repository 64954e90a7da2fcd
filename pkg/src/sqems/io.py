"""Point-cloud files and JSON result documents.

Clouds are read from whitespace-separated XYZ text or ASCII PLY. Result
documents are JSON; floats are written with ``repr`` precision, so a document
read back holds exactly the values that were written.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Superquadric, as_cloud

SCHEMA_VERSION = 1
CLOUD_FORMATS = ("xyz", "ply")
_PLY_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_PLY_SCALAR_TYPES = _PLY_FLOAT_TYPES | {
    "char", "uchar", "short", "ushort", "int", "uint",
    "int8", "uint8", "int16", "uint16", "int32", "uint32",
}


class CloudParseError(ValueError):
    """Malformed cloud file; the message names the offending line."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


class DocumentError(ValueError):
    """A result document that does not match the schema."""


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------


def guess_format(path) -> str:
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def _point(parts, path, lineno):
    try:
        xyz = (float(parts[0]), float(parts[1]), float(parts[2]))
    except ValueError:
        raise CloudParseError(path, lineno, f"cannot parse coordinates {' '.join(parts[:3])!r}") from None
    if not all(math.isfinite(v) for v in xyz):
        raise CloudParseError(path, lineno, "non-finite coordinate")
    return xyz


def parse_xyz(lines, path="<xyz>") -> np.ndarray:
    """One point per line; extra columns, blank lines and ``#`` comments are skipped."""
    pts = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) < 3:
            raise CloudParseError(path, lineno, f"expected 3 coordinates, found {len(parts)}")
        pts.append(_point(parts, path, lineno))
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def parse_ply(lines, path="<ply>") -> np.ndarray:
    """ASCII PLY with scalar ``x``, ``y``, ``z`` float vertex properties.

    Other scalar vertex properties are ignored, as are the bodies of any other
    elements.
    """
    it = iter(enumerate(lines, 1))
    lineno, first = next(it, (1, ""))
    if first.strip() != "ply":
        raise CloudParseError(path, lineno, "missing 'ply' magic")
    elements = []  # [name, count, [(type, name)]]
    fmt_seen = False
    for lineno, line in it:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3 or parts[1] != "ascii":
                raise CloudParseError(path, lineno, "only 'format ascii 1.0' is supported")
            fmt_seen = True
        elif key == "element":
            if len(parts) != 3:
                raise CloudParseError(path, lineno, "malformed element line")
            try:
                count = int(parts[2])
            except ValueError:
                raise CloudParseError(path, lineno, f"bad element count {parts[2]!r}") from None
            if count < 0:
                raise CloudParseError(path, lineno, "negative element count")
            elements.append([parts[1], count, []])
        elif key == "property":
            if not elements:
                raise CloudParseError(path, lineno, "property before any element")
            if len(parts) >= 2 and parts[1] == "list":
                if elements[-1][0] == "vertex":
                    raise CloudParseError(path, lineno, "list properties on vertices are not supported")
                elements[-1][2].append(("list", parts[-1]))
            elif len(parts) == 3 and parts[1] in _PLY_SCALAR_TYPES:
                elements[-1][2].append((parts[1], parts[2]))
            else:
                raise CloudParseError(path, lineno, "malformed property line")
        elif key == "end_header":
            break
        else:
            raise CloudParseError(path, lineno, f"unexpected header keyword {key!r}")
    else:
        raise CloudParseError(path, None, "missing end_header")
    if not fmt_seen:
        raise CloudParseError(path, lineno, "missing format line")

    names = {e[0]: e for e in elements}
    if "vertex" not in names:
        raise CloudParseError(path, lineno, "no vertex element")
    props = names["vertex"][2]
    cols = []
    for axis in ("x", "y", "z"):
        found = [k for k, (typ, name) in enumerate(props) if name == axis]
        if not found:
            raise CloudParseError(path, lineno, f"vertex has no {axis!r} property")
        if props[found[0]][0] not in _PLY_FLOAT_TYPES:
            raise CloudParseError(path, lineno, f"vertex property {axis!r} is not a float type")
        cols.append(found[0])
    width = len(props)

    pts = []
    for name, count, _ in elements:
        remaining = count
        while remaining:
            item = next(it, None)
            if item is None:
                raise CloudParseError(path, None, f"file ends inside element {name!r}")
            lineno, line = item
            parts = line.split()
            if not parts:
                continue
            remaining -= 1
            if name != "vertex":
                continue
            if len(parts) != width:
                raise CloudParseError(path, lineno, f"expected {width} vertex values, found {len(parts)}")
            pts.append(_point([parts[c] for c in cols], path, lineno))
        if name == "vertex":
            break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def read_cloud(path, fmt: str | None = None) -> np.ndarray:
    """Read an ``(N, 3)`` cloud; the format defaults to the file suffix."""
    fmt = fmt or guess_format(path)
    if fmt not in CLOUD_FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}")
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_ply(fh, path) if fmt == "ply" else parse_xyz(fh, path)


def format_cloud(points, fmt: str = "xyz") -> str:
    pts = as_cloud(points)
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    if fmt == "xyz":
        return body
    if fmt == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\n"
            "property double x\nproperty double y\nproperty double z\nend_header\n"
        )
        return header + body
    raise ValueError(f"unknown cloud format {fmt!r}")


def write_cloud(path, points, fmt: str | None = None) -> None:
    fmt = fmt or guess_format(path)
    _write_text(path, format_cloud(points, fmt))


def _write_text(path, text: str) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# documents
# ---------------------------------------------------------------------------


def _floats(values, n: int, what: str) -> tuple:
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError):
        raise DocumentError(f"{what} must be a list of {n} numbers") from None
    if len(out) != n:
        raise DocumentError(f"{what} must have {n} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class SuperquadricRecord:
    """Serialised superquadric; the rotation is a unit quaternion ``(w, x, y, z)``."""

    eps1: float
    eps2: float
    ax: float
    ay: float
    az: float
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def from_superquadric(cls, sq: Superquadric) -> "SuperquadricRecord":
        return cls(
            sq.eps1, sq.eps2, sq.ax, sq.ay, sq.az,
            tuple(float(v) for v in sq.pose.rotation),
            tuple(float(v) for v in sq.translation),
        )

    def to_superquadric(self) -> Superquadric:
        return Superquadric(self.eps1, self.eps2, self.ax, self.ay, self.az, pose=Pose(self.rotation, self.translation))

    def to_dict(self) -> dict:
        return {
            "eps1": self.eps1, "eps2": self.eps2,
            "ax": self.ax, "ay": self.ay, "az": self.az,
            "rotation": list(self.rotation), "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, d) -> "SuperquadricRecord":
        try:
            shape = _floats([d[k] for k in ("eps1", "eps2", "ax", "ay", "az")], 5, "shape")
            rec = cls(
                *shape,
                rotation=_floats(d["rotation"], 4, "rotation"),
                translation=_floats(d["translation"], 3, "translation"),
            )
        except (KeyError, TypeError) as exc:
            raise DocumentError(f"malformed superquadric: missing {exc}") from None
        try:
            rec.to_superquadric()
        except ValueError as exc:
            raise DocumentError(f"invalid superquadric: {exc}") from None
        return rec


@dataclass(frozen=True, eq=False)
class ResultDocument:
    superquadric: SuperquadricRecord
    sigma2: float
    nll: float
    iterations: int
    switches: int
    inlier_probabilities: np.ndarray | None = None

    @classmethod
    def from_fit(cls, result, with_inliers: bool = False) -> "ResultDocument":
        return cls(
            SuperquadricRecord.from_superquadric(result.superquadric),
            float(result.sigma2),
            float(result.final_nll),
            int(result.iterations),
            int(result.switches),
            np.asarray(result.z_hat, dtype=np.float64) if with_inliers else None,
        )

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": "fit",
            "superquadric": self.superquadric.to_dict(),
            "sigma2": self.sigma2,
            "nll": self.nll,
            "iterations": self.iterations,
            "switches": self.switches,
        }
        if self.inlier_probabilities is not None:
            d["inlier_probabilities"] = self.inlier_probabilities.tolist()
        return d

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultDocument):
            return NotImplemented
        return _dicts_equal(self.to_dict(), other.to_dict())


@dataclass(frozen=True)
class NodeRecord:
    superquadric: SuperquadricRecord
    layer: int
    cluster: int
    parent: int | None
    point_count: int
    sigma2: float
    nll: float
    iterations: int
    switches: int

    def to_dict(self) -> dict:
        return {
            "superquadric": self.superquadric.to_dict(),
            "layer": self.layer, "cluster": self.cluster, "parent": self.parent,
            "point_count": self.point_count, "sigma2": self.sigma2, "nll": self.nll,
            "iterations": self.iterations, "switches": self.switches,
        }

    @classmethod
    def from_dict(cls, d) -> "NodeRecord":
        try:
            parent = d["parent"]
            return cls(
                SuperquadricRecord.from_dict(d["superquadric"]),
                int(d["layer"]), int(d["cluster"]),
                None if parent is None else int(parent),
                int(d["point_count"]), float(d["sigma2"]), float(d["nll"]),
                int(d["iterations"]), int(d["switches"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DocumentError(f"malformed node: {exc}") from None


@dataclass(frozen=True, eq=False)
class HierarchyDocument:
    """Structure graph with per-point labels.

    ``labels`` holds the node that owns each point as an inlier, or -1 for
    unassigned points; ``segments`` holds the radially nearest node.
    """

    nodes: tuple
    edges: tuple
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    segments: np.ndarray | None = None

    @classmethod
    def from_graph(cls, graph, n_points: int, segments=None) -> "HierarchyDocument":
        from .hier import membership_labels  # local import avoids a cycle at load time

        parents = {c: p for p, c in graph.edges}
        nodes = []
        for i, node in enumerate(graph.nodes):
            fit = node.fit
            nodes.append(NodeRecord(
                SuperquadricRecord.from_superquadric(node.superquadric),
                int(node.layer), int(node.cluster), parents.get(i), int(len(node.indices)),
                float(fit.sigma2) if fit else math.nan,
                float(fit.final_nll) if fit else math.nan,
                int(fit.iterations) if fit else 0,
                int(fit.switches) if fit else 0,
            ))
        edges = tuple((int(p), int(c)) for p, c in graph.edges)
        seg = None if segments is None else np.asarray(segments, dtype=np.int64)
        return cls(tuple(nodes), edges, membership_labels(graph, n_points), seg)

    def superquadrics(self) -> list:
        return [n.superquadric.to_superquadric() for n in self.nodes]

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "kind": "hierarchy",
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "labels": np.asarray(self.labels).tolist(),
        }
        if self.segments is not None:
            d["segments"] = np.asarray(self.segments).tolist()
        return d

    def __eq__(self, other) -> bool:
        if not isinstance(other, HierarchyDocument):
            return NotImplemented
        return _dicts_equal(self.to_dict(), other.to_dict())


@dataclass(frozen=True)
class GroundTruthDocument:
    """Generating parameters of a synthetic cloud."""

    superquadric: SuperquadricRecord
    seed: int
    corruption: str = "clean"
    level: float = 0.0
    spacing: float = 0.2

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "ground_truth",
            "superquadric": self.superquadric.to_dict(),
            "seed": self.seed,
            "corruption": self.corruption,
            "level": self.level,
            "spacing": self.spacing,
        }


def _dicts_equal(a, b) -> bool:
    # NaN-aware structural equality
    return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def dumps_document(doc) -> str:
    return json.dumps(doc.to_dict(), indent=2) + "\n"


def loads_document(text: str):
    """Parse a fit, hierarchy or ground-truth document."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(d, dict):
        raise DocumentError("document must be a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DocumentError(f"unsupported schema_version {version!r}")
    kind = d.get("kind")
    try:
        if kind == "fit":
            z = d.get("inlier_probabilities")
            return ResultDocument(
                SuperquadricRecord.from_dict(d["superquadric"]),
                float(d["sigma2"]), float(d["nll"]), int(d["iterations"]), int(d["switches"]),
                None if z is None else np.asarray(z, dtype=np.float64),
            )
        if kind == "hierarchy":
            seg = d.get("segments")
            return HierarchyDocument(
                tuple(NodeRecord.from_dict(n) for n in d["nodes"]),
                tuple((int(p), int(c)) for p, c in d["edges"]),
                np.asarray(d["labels"], dtype=np.int64),
                None if seg is None else np.asarray(seg, dtype=np.int64),
            )
        if kind == "ground_truth":
            return GroundTruthDocument(
                SuperquadricRecord.from_dict(d["superquadric"]),
                int(d["seed"]), str(d["corruption"]), float(d["level"]), float(d["spacing"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DocumentError):
            raise
        raise DocumentError(f"malformed {kind} document: {exc}") from None
    raise DocumentError(f"unknown document kind {kind!r}")


def read_document(path):
    with open(path, encoding="utf-8") as fh:
        return loads_document(fh.read())


def write_document(path, doc) -> None:
    _write_text(path, dumps_document(doc))


def write_column(path, values) -> None:
    """One value per line, at full precision (sidecar files)."""
    _write_text(path, "".join(f"{v!r}\n" for v in np.asarray(values).tolist()))


def read_column(path, dtype=float) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        out = []
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                out.append(dtype(s))
            except ValueError:
                raise CloudParseError(path, lineno, f"cannot parse {s!r}") from None
    return np.asarray(out, dtype=np.float64 if dtype is float else np.int64)


__all__ = [
    "CLOUD_FORMATS",
    "SCHEMA_VERSION",
    "CloudParseError",
    "DocumentError",
    "GroundTruthDocument",
    "HierarchyDocument",
    "NodeRecord",
    "ResultDocument",
    "SuperquadricRecord",
    "dumps_document",
    "format_cloud",
    "guess_format",
    "loads_document",
    "parse_ply",
    "parse_xyz",
    "read_cloud",
    "read_column",
    "read_document",
    "write_cloud",
    "write_column",
    "write_document",
]
