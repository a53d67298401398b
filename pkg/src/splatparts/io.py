"""On-disk formats.

* splat file: binary little-endian PLY in the usual Gaussian-splatting vertex
  layout (x, y, z, nx, ny, nz, f_dc_0..2, f_rest_0..44, opacity, scale_0..2,
  rot_0..3) with opacity stored as a logit and scales as logs;
* binding sidecar: text, one triangle index per Gaussian plus the mesh
  reference and the coordinate space;
* mesh: Wavefront OBJ (``v`` and ``f`` records only);
* labels / segmentation: small CSV tables with a ``#`` header;
* segment archive: splat PLY with an extra ``binding`` property and the
  provenance metadata as JSON in a header comment;
* checkpoint: ``.npz`` holding the config as JSON and every tensor.

Every format carries a ``splatparts-<kind> <version>`` tag and readers refuse
versions they do not know.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import plyfile

from .avatar import SH_COEFFS, Avatar, Gaussians, Mesh
from .clustering import NOISE, Segmentation
from .errors import FormatError
from .faceswap import SegmentArchive
from .hashgrid import HashGridState
from .network import DisentangleModel, NetConfig

FORMAT_VERSIONS = {
    "splat": 1,
    "binding": 1,
    "mesh": 1,
    "labels": 1,
    "segmentation": 1,
    "segment": 1,
    "checkpoint": 1,
}
OPACITY_EPS = 1e-12  # opacities are clamped to [eps, 1 - eps] before taking the logit
QUAT_TOL = 1e-6  # float32 storage tolerance on quaternion norms

SPLAT_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(3 * (SH_COEFFS - 1))]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
REQUIRED_PROPERTIES = [p for p in SPLAT_PROPERTIES if p not in ("nx", "ny", "nz")]


def _tag(kind: str) -> str:
    return f"splatparts-{kind} {FORMAT_VERSIONS[kind]}"


def _check_tag(line: str, kind: str, path) -> None:
    """Validate a ``splatparts-<kind> <version>`` tag."""
    parts = line.strip().lstrip("#").split()
    if len(parts) < 2 or parts[0] != f"splatparts-{kind}":
        raise FormatError(f"{path}: missing 'splatparts-{kind}' format tag")
    try:
        version = int(parts[1])
    except ValueError:
        raise FormatError(f"{path}: malformed format version {parts[1]!r}") from None
    if version != FORMAT_VERSIONS[kind]:
        raise FormatError(f"{path}: unsupported {kind} format version {version} "
                          f"(this build reads version {FORMAT_VERSIONS[kind]})")


def _logit(p):
    p = np.clip(p, OPACITY_EPS, 1 - OPACITY_EPS)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# splat PLY

def _gaussians_to_vertex(g: Gaussians, with_binding: bool = False) -> np.ndarray:
    names = SPLAT_PROPERTIES + (["binding"] if with_binding else [])
    dtype = [(n, "<f4") for n in SPLAT_PROPERTIES] + ([("binding", "<i4")] if with_binding else [])
    out = np.zeros(len(g), dtype=dtype)
    sh = g.sh.reshape(-1, SH_COEFFS, 3)
    rest = sh[:, 1:, :].transpose(0, 2, 1).reshape(len(g), -1)  # channel-major
    cols = {"x": g.mu[:, 0], "y": g.mu[:, 1], "z": g.mu[:, 2],
            "opacity": _logit(g.opacity)}
    for i in range(3):
        cols[f"f_dc_{i}"] = sh[:, 0, i]
        cols[f"scale_{i}"] = np.log(g.scale[:, i])
    for i in range(rest.shape[1]):
        cols[f"f_rest_{i}"] = rest[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = g.rot[:, i]
    if with_binding:
        cols["binding"] = g.binding
    for name in names:
        if name in cols:
            out[name] = cols[name]
    return out


def _vertex_to_gaussians(data: np.ndarray, binding, path) -> Gaussians:
    names = data.dtype.names or ()
    missing = [p for p in REQUIRED_PROPERTIES if p not in names]
    if missing:
        raise FormatError(f"{path}: vertex element lacks propert{'y' if len(missing) == 1 else 'ies'} "
                          f"{', '.join(missing[:8])}{' ...' if len(missing) > 8 else ''}")
    n = len(data)

    def col(name):
        return np.asarray(data[name], dtype=np.float64)

    sh = np.empty((n, SH_COEFFS, 3))
    for i in range(3):
        sh[:, 0, i] = col(f"f_dc_{i}")
    rest = np.stack([col(f"f_rest_{i}") for i in range(3 * (SH_COEFFS - 1))], axis=1)
    sh[:, 1:, :] = rest.reshape(n, 3, SH_COEFFS - 1).transpose(0, 2, 1)
    raw = {"xyz": np.stack([col("x"), col("y"), col("z")], 1),
           "scale": np.stack([col(f"scale_{i}") for i in range(3)], 1),
           "rot": np.stack([col(f"rot_{i}") for i in range(4)], 1),
           "opacity": col("opacity"), "sh": sh}
    for key, arr in raw.items():
        bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
        if bad.any():
            raise FormatError(f"{path}: non-finite {key} value in vertex row {int(np.argmax(bad))}")
    rot = raw["rot"]
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError(f"{path}: zero quaternion in vertex row {int(np.argmax(norms[:, 0] == 0))}")
    # rows already unit-norm at float32 precision are kept as stored so that
    # read -> write reproduces the file byte for byte
    rot = np.where(np.abs(norms - 1.0) > QUAT_TOL, rot / norms, rot)
    return Gaussians(raw["xyz"], rot, np.exp(raw["scale"]), _sigmoid(raw["opacity"]),
                     sh.reshape(n, -1), binding)


def _read_ply(path) -> plyfile.PlyData:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return plyfile.PlyData.read(fh, mmap=False)
    except plyfile.PlyElementParseError as exc:
        offset = ""
        if exc.element is not None:
            raw = path.read_bytes()
            header = raw.find(b"end_header") + len(b"end_header\n")
            dtype = exc.element.dtype()
            avail = len(raw) - header
            row, within = divmod(avail, dtype.itemsize)
            # first property that is not fully present in the truncated row
            fields = sorted(dtype.fields.items(), key=lambda kv: kv[1][1])
            prop = next(name for name, (dt, off) in fields if off + dt.itemsize > within)
            offset = (f"; file ends at byte {len(raw)}, row {row} of {exc.element.count} is missing "
                      f"property {prop!r} (expected at byte {header + row * dtype.itemsize + dtype.fields[prop][1]})")
        raise FormatError(f"{path}: {exc}{offset}") from exc
    except (plyfile.PlyParseError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed PLY header: {exc}") from exc


def _ply_comments(ply: plyfile.PlyData):
    return [c for c in ply.comments] + [c for c in getattr(ply, "obj_info", [])]


def write_splat(path, gaussians: Gaussians, comments=()) -> None:
    vertex = plyfile.PlyElement.describe(_gaussians_to_vertex(gaussians), "vertex")
    plyfile.PlyData([vertex], text=False, byte_order="<", comments=[_tag("splat"), *comments]).write(str(path))


def read_splat(path, binding=None) -> Gaussians:
    ply = _read_ply(path)
    for c in _ply_comments(ply):
        if c.startswith("splatparts-splat"):
            _check_tag(c, "splat", path)
    if "vertex" not in ply:
        raise FormatError(f"{path}: no vertex element")
    data = ply["vertex"].data
    if binding is None:
        binding = np.zeros(len(data), dtype=np.int64)
    if len(binding) != len(data):
        raise FormatError(f"{path}: {len(data)} splats but {len(binding)} binding rows")
    return _vertex_to_gaussians(data, binding, path)


# ---------------------------------------------------------------------------
# mesh (OBJ)

def write_mesh(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {_tag('mesh')}\n")
        for v in mesh.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def read_mesh(path) -> Mesh:
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("# splatparts-mesh"):
                _check_tag(line, "mesh", path)
                continue
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise FormatError(f"{path}:{lineno}: only triangular faces are supported")
                    tris.append([i - 1 for i in idx])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    try:
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# binding sidecar

def _read_header(fh, path, kind):
    """Parse leading ``# key: value`` lines; returns (meta, first data line)."""
    first = fh.readline()
    _check_tag(first, kind, path)
    meta = {}
    line = fh.readline()
    while line.startswith("#"):
        key, _, value = line[1:].partition(":")
        meta[key.strip()] = value.strip()
        line = fh.readline()
    return meta, line


def write_binding(path, binding, mesh_ref: str, space: str, name: str = "") -> None:
    binding = np.asarray(binding, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write(f"# {_tag('binding')}\n# mesh: {mesh_ref}\n# space: {space}\n"
                 f"# name: {name}\n# count: {len(binding)}\n")
        fh.write("triangle\n")
        np.savetxt(fh, binding, fmt="%d")


def read_binding(path):
    """Returns ``(binding, meta)``; ``meta`` has mesh, space, name, count."""
    with open(path) as fh:
        meta, header = _read_header(fh, path, "binding")
        if header.strip() != "triangle":
            raise FormatError(f"{path}: expected column header 'triangle'")
        rows = [line for line in fh if line.strip()]
    try:
        binding = np.array([int(r) for r in rows], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if "count" in meta and int(meta["count"]) != len(binding):
        raise FormatError(f"{path}: header announces {meta['count']} rows, found {len(binding)}")
    if meta.get("space") not in ("local", "global"):
        raise FormatError(f"{path}: coordinate space must be 'local' or 'global'")
    return binding, meta


# ---------------------------------------------------------------------------
# avatars

def avatar_paths(splat_path):
    """Default (binding, mesh) sidecar paths next to a splat file."""
    p = Path(splat_path)
    return p.with_suffix(".binding.txt"), p.with_suffix(".obj")


def write_avatar(avatar: Avatar, splat_path, binding_path=None, mesh_path=None) -> None:
    dflt_binding, dflt_mesh = avatar_paths(splat_path)
    binding_path = Path(binding_path or dflt_binding)
    mesh_path = Path(mesh_path or dflt_mesh)
    write_splat(splat_path, avatar.gaussians)
    write_mesh(mesh_path, avatar.mesh)
    mesh_ref = os.path.relpath(mesh_path, binding_path.parent)
    write_binding(binding_path, avatar.gaussians.binding, mesh_ref, avatar.space, avatar.name)


def read_avatar(splat_path, binding_path=None, mesh_path=None) -> Avatar:
    dflt_binding, _ = avatar_paths(splat_path)
    binding_path = Path(binding_path or dflt_binding)
    binding, meta = read_binding(binding_path)
    if mesh_path is None:
        if not meta.get("mesh"):
            raise FormatError(f"{binding_path}: no mesh reference")
        mesh_path = binding_path.parent / meta["mesh"]
    mesh = read_mesh(mesh_path)
    gaussians = read_splat(splat_path, binding)
    try:
        return Avatar(mesh, gaussians, meta["space"], meta.get("name") or Path(splat_path).stem)
    except ValueError as exc:
        raise FormatError(f"{splat_path}: {exc}") from exc


# ---------------------------------------------------------------------------
# labels and segmentations

def write_labels(path, labels, name: str = "") -> None:
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write(f"# {_tag('labels')}\n# avatar: {name}\n")
        fh.write("index,label\n")
        np.savetxt(fh, np.stack([np.arange(len(labels)), labels], 1), fmt="%d", delimiter=",")


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        _, header = _read_header(fh, path, "labels")
        if header.strip() != "index,label":
            raise FormatError(f"{path}: expected column header 'index,label'")
        rows = [line.split(",") for line in fh if line.strip()]
    try:
        table = np.array([[int(a), int(b)] for a, b in rows], dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not np.array_equal(table[:, 0], np.arange(len(table))):
        raise FormatError(f"{path}: index column must run 0..n-1")
    return table[:, 1]


def write_segmentation(path, seg: Segmentation) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {_tag('segmentation')}\n# avatar: {seg.avatar_id}\n")
        fh.write("index,channel,cluster\n")
        for i, (ch, cl) in enumerate(zip(seg.channel, seg.cluster)):
            fh.write(f"{i},{ch},{'noise' if cl == NOISE else cl}\n")


def read_segmentation(path) -> Segmentation:
    with open(path) as fh:
        meta, header = _read_header(fh, path, "segmentation")
        if header.strip() != "index,channel,cluster":
            raise FormatError(f"{path}: expected column header 'index,channel,cluster'")
        channel, cluster = [], []
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                idx, ch, cl = line.strip().split(",")
                if int(idx) != len(channel):
                    raise ValueError(f"row index {idx} out of order")
                channel.append(int(ch))
                cluster.append(NOISE if cl == "noise" else int(cl))
            except ValueError as exc:
                raise FormatError(f"{path}: data row {lineno}: {exc}") from exc
    return Segmentation(np.array(channel, dtype=np.int64), np.array(cluster, dtype=np.int64), meta.get("avatar", ""))


def sniff_kind(path) -> str:
    """Format kind from the tag on the first line of a text file."""
    with open(path) as fh:
        first = fh.readline().strip().lstrip("#").split()
    if not first or not first[0].startswith("splatparts-"):
        raise FormatError(f"{path}: not a splatparts text file")
    return first[0][len("splatparts-"):]


# ---------------------------------------------------------------------------
# segment archives

def write_segment(path, part: SegmentArchive) -> None:
    meta = {"source_id": part.source_id, "tag": part.tag, "n_triangles": part.n_triangles,
            "topology": part.topology, "space": part.space, "triangles": part.triangles.tolist(),
            "params": part.params}
    vertex = plyfile.PlyElement.describe(_gaussians_to_vertex(part.gaussians, with_binding=True), "vertex")
    plyfile.PlyData([vertex], text=False, byte_order="<",
                    comments=[_tag("segment"), "meta " + json.dumps(meta, sort_keys=True)]).write(str(path))


def read_segment(path) -> SegmentArchive:
    ply = _read_ply(path)
    comments = _ply_comments(ply)
    tags = [c for c in comments if c.startswith("splatparts-")]
    if not tags:
        raise FormatError(f"{path}: missing 'splatparts-segment' format tag")
    _check_tag(tags[0], "segment", path)
    metas = [c[5:] for c in comments if c.startswith("meta ")]
    if not metas:
        raise FormatError(f"{path}: segment archive has no metadata header")
    try:
        meta = json.loads(metas[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed metadata: {exc}") from exc
    data = ply["vertex"].data
    if "binding" not in (data.dtype.names or ()):
        raise FormatError(f"{path}: vertex element lacks property binding")
    g = _vertex_to_gaussians(data, np.asarray(data["binding"], dtype=np.int64), path)
    try:
        return SegmentArchive(g, np.asarray(meta["triangles"], dtype=np.int64), meta["source_id"], meta["tag"],
                              int(meta["n_triangles"]), meta.get("topology", ""), meta.get("params", {}),
                              meta.get("space", "local"))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent segment archive: {exc}") from exc


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: DisentangleModel) -> None:
    arrays = {f"param_{k}": v for k, v in model.params.items()}
    if model.hash_state is not None:
        arrays["embeddings"] = model.hash_state.embeddings
    with open(path, "wb") as fh:
        np.savez(fh, format=np.array(_tag("checkpoint")),
                 config=np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
                 norm_lo=model.norm_lo, norm_extent=model.norm_extent, **arrays)


def load_checkpoint(path) -> DisentangleModel:
    try:
        with np.load(path, allow_pickle=False) as z:
            if "format" not in z:
                raise FormatError(f"{path}: missing 'splatparts-checkpoint' format tag")
            _check_tag(str(z["format"]), "checkpoint", path)
            config = NetConfig.from_dict(json.loads(str(z["config"])))
            params = {k[len("param_"):]: z[k] for k in z.files if k.startswith("param_")}
            hash_state = HashGridState(z["embeddings"], config.hash) if "embeddings" in z else None
            model = DisentangleModel(config, params, hash_state, z["norm_lo"], z["norm_extent"])
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: cannot read checkpoint: {exc}") from exc
    try:
        model.check()
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model
