"""Plain-text / raw-block readers and writers for all artifact types.

Volumes and fields use a small ASCII header followed by a little-endian
float32 raw block, x varying fastest.  Everything else (points, meshes,
rigid transforms, key=value configs and reports) is line-oriented ASCII.
"""

import numpy as np

from .grid import DisplacementField, PointSet, ScalarVolume, SurfaceMesh

_HEADER_END = b"end_header\n"


def _format_floats(vals):
    return " ".join(repr(float(v)) for v in vals)


def _write_block(path, header_lines, raw):
    with open(path, "wb") as f:
        for line in header_lines:
            f.write(line.encode("ascii") + b"\n")
        f.write(_HEADER_END)
        f.write(raw)


def _read_block(path):
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(_HEADER_END)
    if end < 0:
        raise ValueError(f"{path}: missing end_header marker")
    header = {}
    for line in blob[:end].decode("ascii").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed header line {line!r}")
        key, val = line.split("=", 1)
        header[key.strip()] = val.strip()
    return header, blob[end + len(_HEADER_END):]


def _require(header, key, path):
    if key not in header:
        raise ValueError(f"{path}: header missing '{key}'")
    return header[key]


def _grid_header(shape, spacing, origin, components):
    return [
        f"dims={shape[0]} {shape[1]} {shape[2]}",
        f"spacing={_format_floats(spacing)}",
        f"origin={_format_floats(origin)}",
        "element=float32",
        f"components={components}",
    ]


def _parse_grid_header(header, path):
    dims = tuple(int(t) for t in _require(header, "dims", path).split())
    spacing = np.array([float(t) for t in
                        _require(header, "spacing", path).split()])
    origin = np.array([float(t) for t in
                       _require(header, "origin", path).split()])
    if len(dims) != 3 or spacing.size != 3 or origin.size != 3:
        raise ValueError(f"{path}: dims/spacing/origin must have 3 entries")
    elem = _require(header, "element", path)
    if elem != "float32":
        raise ValueError(f"{path}: unsupported element type {elem!r}")
    comps = int(_require(header, "components", path))
    return dims, spacing, origin, comps


def write_volume(path, volume):
    raw = np.ascontiguousarray(
        volume.data.transpose(2, 1, 0), dtype="<f4").tobytes()
    hdr = _grid_header(volume.shape, volume.spacing, volume.origin, 1)
    hdr.append(f"background={volume.background!r}")
    _write_block(path, hdr, raw)


def read_volume(path):
    header, raw = _read_block(path)
    dims, spacing, origin, comps = _parse_grid_header(header, path)
    if comps != 1:
        raise ValueError(f"{path}: expected 1 component, got {comps}")
    n = dims[0] * dims[1] * dims[2]
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size < n:
        raise ValueError(f"{path}: raw block truncated")
    data = flat[:n].reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    bg = float(header.get("background", 0.0))
    return ScalarVolume(np.asarray(data, dtype=np.float64), spacing, origin,
                        background=bg)


def write_field(path, fld):
    raw = np.ascontiguousarray(
        fld.data.transpose(2, 1, 0, 3), dtype="<f4").tobytes()
    _write_block(path, _grid_header(fld.shape, fld.spacing, fld.origin, 3),
                 raw)


def read_field(path):
    header, raw = _read_block(path)
    dims, spacing, origin, comps = _parse_grid_header(header, path)
    if comps != 3:
        raise ValueError(f"{path}: expected 3 components, got {comps}")
    n = dims[0] * dims[1] * dims[2] * 3
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size < n:
        raise ValueError(f"{path}: raw block truncated")
    data = flat[:n].reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
    return DisplacementField(np.asarray(data, dtype=np.float64),
                             spacing, origin)


def write_points(path, pts):
    points = pts.points if isinstance(pts, PointSet) else np.asarray(pts)
    with open(path, "w") as f:
        for p in points:
            f.write(_format_floats(p) + "\n")


def read_points(path):
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'x y z'")
            rows.append([float(t) for t in parts])
    return PointSet(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_mesh(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v " + _format_floats(v) + "\n")
        for face in mesh.faces:
            f.write(f"f {face[0]} {face[1]} {face[2]}\n")


def read_mesh(path):
    verts, faces = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(t) for t in parts[1:]])
            elif parts[0] == "f" and len(parts) == 4:
                faces.append([int(t) for t in parts[1:]])
            else:
                raise ValueError(f"{path}:{ln}: expected 'v x y z' or 'f i j k'")
    return SurfaceMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_rigid(path, rigid):
    vals = list(rigid.rotation) + list(rigid.translation) + list(rigid.center)
    with open(path, "w") as f:
        f.write(_format_floats(vals) + "\n")


def read_rigid(path):
    from .preprocess import RigidTransform
    with open(path) as f:
        tokens = f.read().split()
    if len(tokens) != 9:
        raise ValueError(f"{path}: expected 9 reals (angles, translation, "
                         f"center), got {len(tokens)}")
    vals = np.array([float(t) for t in tokens])
    return RigidTransform(rotation=vals[0:3], translation=vals[3:6],
                          center=vals[6:9])


def write_keyvalues(path, mapping):
    with open(path, "w") as f:
        for key, val in mapping.items():
            f.write(f"{key}={val}\n")


def read_keyvalues(path):
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def write_matrix(path, matrix):
    """Dense matrix as ASCII: 'rows=.. cols=..' header, one row per line."""
    arr = np.asarray(getattr(matrix, "w", getattr(matrix, "pi", matrix)),
                     dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    with open(path, "w") as f:
        f.write(f"rows={arr.shape[0]} cols={arr.shape[1]}\n")
        for row in arr:
            f.write(_format_floats(row) + "\n")


def read_matrix(path):
    with open(path) as f:
        head = f.readline().split()
        try:
            rows = int(head[0].split("=", 1)[1])
            cols = int(head[1].split("=", 1)[1])
        except (IndexError, ValueError):
            raise ValueError(f"{path}: expected 'rows=R cols=C' header")
        out = np.empty((rows, cols))
        for r in range(rows):
            parts = f.readline().split()
            if len(parts) != cols:
                raise ValueError(f"{path}: row {r} has {len(parts)} "
                                 f"entries, expected {cols}")
            out[r] = [float(t) for t in parts]
    return out


def write_shape_model(path, model):
    """Shape model: ASCII header + float64 raw (mean then mode columns)."""
    mean = model.mean_shape.points
    hdr = [
        f"points={len(mean)}",
        f"modes={model.n_modes}",
        f"training={model.n_training}",
        f"lambdas={_format_floats(model.eigenvalues)}".rstrip(),
        "element=float64",
    ]
    raw = mean.astype("<f8").tobytes() + \
        np.ascontiguousarray(model.modes, dtype="<f8").tobytes()
    _write_block(path, hdr, raw)


def read_shape_model(path):
    from .shape import ShapeModel
    header, raw = _read_block(path)
    n = int(_require(header, "points", path))
    k = int(_require(header, "modes", path))
    training = int(_require(header, "training", path))
    lam_text = header.get("lambdas", "").split()
    lam = np.array([float(t) for t in lam_text], dtype=np.float64)
    if lam.size != k:
        raise ValueError(f"{path}: expected {k} eigenvalues")
    flat = np.frombuffer(raw, dtype="<f8")
    need = 3 * n + 3 * n * k
    if flat.size < need:
        raise ValueError(f"{path}: raw block truncated")
    mean = flat[:3 * n].reshape(n, 3).copy()
    modes = flat[3 * n:need].reshape(3 * n, k).copy()
    return ShapeModel(mean_shape=PointSet(mean), modes=modes,
                      eigenvalues=lam, n_training=training)


def write_spline(path, spline):
    """Serialize a lattice transform: header + raw float32 coefficients."""
    hdr = _grid_header(spline.coefficients.shape[:3], spline.spacing,
                       spline.origin, 3)
    hdr.append(f"degree={spline.degree}")
    raw = np.ascontiguousarray(
        spline.coefficients.transpose(2, 1, 0, 3), dtype="<f4").tobytes()
    _write_block(path, hdr, raw)


def read_spline(path):
    from .bspline import SplineTransform
    header, raw = _read_block(path)
    dims, spacing, origin, comps = _parse_grid_header(header, path)
    if comps != 3:
        raise ValueError(f"{path}: expected 3 components, got {comps}")
    degree = int(_require(header, "degree", path))
    n = dims[0] * dims[1] * dims[2] * 3
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size < n:
        raise ValueError(f"{path}: raw block truncated")
    coeff = flat[:n].reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
    return SplineTransform(np.asarray(coeff, dtype=np.float64),
                           spacing, origin, degree)
