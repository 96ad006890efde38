"""On-disk formats: PLY meshes and clouds, PPM/PGM frames, pose and keypoint files, reports.

Sequence layout::

    manifest.json            intrinsics, frame count, tags
    frames/NNNN.img          binary PPM (P6, 8 bit)
    frames/NNNN.mask         binary PGM (P5, 0 or 255)
    frames/NNNN.cloud        binary little-endian PLY: x y z nx ny nz (double),
                             red green blue (uchar), px py (int)
    poses/<name>.txt         pose file
    keypoints.txt            hand keypoint file
    gt/mesh.ply              ground-truth mesh

Pose file: a ``# camera_from_world`` header, then one line per frame
``index valid qw qx qy qz tx ty tz`` with ``valid`` 0 or 1 and floats in
round-trip precision.

Keypoint file: a ``# hand_keypoints`` header, then one line per frame
``index valid`` followed by 21 groups of ``u v X Y Z confidence``.

Report file: tab-separated ``metric threshold group value`` lines after a
header line; the JSON summary holds the full report records.
"""
import json
import os
import re
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .geom import CameraIntrinsics, ColoredPointCloud, PoseSequence, RigidTransform, Rotation, TriangleMesh

POSE_HEADER = "# camera_from_world"
KEYPOINT_HEADER = "# hand_keypoints"
REPORT_HEADER = "metric\tthreshold\tgroup\tvalue"

# ------------------------------------------------------------------ PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(f):
    if f.readline().strip() != b"ply":
        raise DataError("not a PLY file")
    fmt, elements = None, []
    while True:
        line = f.readline()
        if not line:
            raise DataError("PLY header has no end_header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise DataError("PLY property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise DataError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(buf, pos, count, props):
    if all(not isinstance(t, tuple) for _, t in props):
        dt = np.dtype([(n, "<" + t) for n, t in props])
        arr = np.frombuffer(buf, dt, count, pos)
        return {n: arr[n] for n, _ in props}, pos + count * dt.itemsize
    if len(props) == 1:
        name, (_, ct, it) = props[0]
        # fast path: every list has the same length as the first
        first = int(np.frombuffer(buf, "<" + ct, 1, pos)[0]) if count else 0
        dt = np.dtype([("n", "<" + ct), ("v", "<" + it, (first,))])
        arr = np.frombuffer(buf, dt, count, pos)
        if count and np.any(arr["n"] != first):
            raise DataError("PLY faces must all have the same vertex count")
        return {name: arr["v"]}, pos + count * dt.itemsize
    raise DataError("unsupported PLY element layout")


def read_ply(path) -> Dict[str, Dict[str, np.ndarray]]:
    """Elements of a PLY file as ``{element: {property: array}}``."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        body = f.read()
    out = {}
    if fmt == "binary_little_endian":
        pos = 0
        for name, count, props in elements:
            out[name], pos = _read_binary_element(body, pos, count, props)
        return out
    lines = iter(body.decode("ascii").split("\n"))
    for name, count, props in elements:
        rows = [next(lines).split() for _ in range(count)]
        if props and isinstance(props[0][1], tuple):
            out[name] = {props[0][0]: np.array([[int(x) for x in r[1:]] for r in rows], np.int64)}
        else:
            a = np.array(rows, float).reshape(count, len(props))
            out[name] = {p: a[:, i].astype(t) for i, (p, t) in enumerate(props)}
    return out


def _write_ply(path, vertex_fields: List[Tuple[str, str, np.ndarray]], faces: Optional[np.ndarray] = None):
    n = len(vertex_fields[0][2])
    dt = np.dtype([(name, "<" + t) for name, t, _ in vertex_fields])
    arr = np.empty(n, dt)
    for name, _, a in vertex_fields:
        arr[name] = a
    inv = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int"}
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    head += [f"property {inv[t]} {name}" for name, t, _ in vertex_fields]
    if faces is not None:
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    _ensure_dir(path)
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        f.write(arr.tobytes())
        if faces is not None:
            fd = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
            fa = np.empty(len(faces), fd)
            fa["n"] = 3
            fa["v"] = faces
            f.write(fa.tobytes())


def _to_u8(c):
    return np.clip(np.rint(np.asarray(c) * 255.0), 0, 255).astype(np.uint8)


def write_mesh(path, mesh: TriangleMesh):
    v = mesh.vertices
    n = mesh.normals()
    fields = [("x", "f8", v[:, 0]), ("y", "f8", v[:, 1]), ("z", "f8", v[:, 2]),
              ("nx", "f8", n[:, 0]), ("ny", "f8", n[:, 1]), ("nz", "f8", n[:, 2])]
    if mesh.vertex_colors is not None:
        c = _to_u8(mesh.vertex_colors)
        fields += [("red", "u1", c[:, 0]), ("green", "u1", c[:, 1]), ("blue", "u1", c[:, 2])]
    _write_ply(path, fields, mesh.faces)


def read_mesh(path) -> TriangleMesh:
    el = read_ply(path)
    if "vertex" not in el or "face" not in el:
        raise DataError(f"{path}: mesh PLY needs vertex and face elements")
    v = el["vertex"]
    verts = np.c_[v["x"], v["y"], v["z"]].astype(float)
    faces = next(iter(el["face"].values())).astype(np.int64)
    if faces.ndim != 2 or (len(faces) and faces.shape[1] != 3):
        raise DataError(f"{path}: only triangle faces are supported")
    colors = np.c_[v["red"], v["green"], v["blue"]] / 255.0 if "red" in v else None
    normals = np.c_[v["nx"], v["ny"], v["nz"]].astype(float) if "nx" in v else None
    return TriangleMesh(verts, faces, colors, normals, allow_degenerate=True)


def write_cloud(path, cloud: ColoredPointCloud):
    p = cloud.positions
    n = cloud.normals if cloud.normals is not None else np.zeros_like(p)
    c = _to_u8(cloud.colors) if cloud.colors is not None else np.zeros((len(p), 3), np.uint8)
    px = cloud.pixels if cloud.pixels is not None else np.full((len(p), 2), -1)
    _write_ply(path, [("x", "f8", p[:, 0]), ("y", "f8", p[:, 1]), ("z", "f8", p[:, 2]),
                      ("nx", "f8", n[:, 0]), ("ny", "f8", n[:, 1]), ("nz", "f8", n[:, 2]),
                      ("red", "u1", c[:, 0]), ("green", "u1", c[:, 1]), ("blue", "u1", c[:, 2]),
                      ("px", "i4", px[:, 0]), ("py", "i4", px[:, 1])])


def read_cloud(path) -> ColoredPointCloud:
    el = read_ply(path)
    if "vertex" not in el:
        raise DataError(f"{path}: cloud PLY needs a vertex element")
    v = el["vertex"]
    pos = np.c_[v["x"], v["y"], v["z"]].astype(float)
    normals = np.c_[v["nx"], v["ny"], v["nz"]].astype(float) if "nx" in v else None
    colors = np.c_[v["red"], v["green"], v["blue"]] / 255.0 if "red" in v else None
    pixels = np.c_[v["px"], v["py"]].astype(np.int64) if "px" in v else None
    return ColoredPointCloud(pos, normals, colors, pixels)


# ---------------------------------------------------------------- PPM / PGM

def _read_netpbm(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise DataError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported")
    body = data[pos + 1:]
    ch = 3 if magic == b"P6" else 1
    if len(body) < w * h * ch:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, np.uint8, w * h * ch).reshape(h, w, ch) if ch == 3 else \
        np.frombuffer(body, np.uint8, w * h).reshape(h, w)


def write_ppm(path, image: np.ndarray):
    img = _to_u8(image)
    _ensure_dir(path)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6") / 255.0


def write_pgm(path, mask: np.ndarray):
    m = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    _ensure_dir(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        f.write(m.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5") >= 128


# ---------------------------------------------------------------- poses

def _ensure_dir(path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)


def format_poses(seq: PoseSequence) -> str:
    lines = [POSE_HEADER]
    for i, (p, ok) in enumerate(zip(seq.poses, seq.valid)):
        vals = " ".join("%.17g" % x for x in (*p.rotation.quat, *p.t))
        lines.append(f"{i} {int(bool(ok))} {vals}")
    return "\n".join(lines) + "\n"


def write_poses(path, seq: PoseSequence):
    _ensure_dir(path)
    with open(path, "w") as f:
        f.write(format_poses(seq))


def parse_poses(text: str, source: str = "<poses>") -> PoseSequence:
    lines = text.splitlines()
    if not lines or lines[0].strip() != POSE_HEADER:
        raise DataError(f"{source}: missing '{POSE_HEADER}' header")
    poses, valid = [], []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 9:
            raise DataError(f"{source}:{k}: expected 9 fields, got {len(tok)}")
        try:
            idx, ok = int(tok[0]), int(tok[1])
            q = np.array([float(x) for x in tok[2:6]])
            t = np.array([float(x) for x in tok[6:9]])
        except ValueError as e:
            raise DataError(f"{source}:{k}: {e}") from None
        if idx != len(poses):
            raise DataError(f"{source}:{k}: frame indices must be contiguous from 0")
        if ok not in (0, 1):
            raise DataError(f"{source}:{k}: valid flag must be 0 or 1")
        if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise DataError(f"{source}:{k}: quaternion is not unit length")
        if not np.all(np.isfinite(t)):
            raise DataError(f"{source}:{k}: non-finite translation")
        poses.append(RigidTransform(Rotation(q), t))
        valid.append(bool(ok))
    return PoseSequence(poses, np.array(valid, bool))


def read_poses(path) -> PoseSequence:
    with open(path) as f:
        return parse_poses(f.read(), str(path))


def _frame_index(name: str) -> Optional[int]:
    digits = re.findall(r"\d+", os.path.basename(name))
    return int(digits[-1]) if digits else None


def parse_sfm(text: str, n_frames: int, source: str = "<sfm>") -> PoseSequence:
    """External SfM export to a pose sequence.

    Accepts either ``name qw qx qy qz tx ty tz`` lines or a COLMAP
    ``images.txt`` (``id qw qx qy qz tx ty tz camera_id name`` followed by a
    2D-point line). Both store camera_from_world. The frame index is the last
    number in the image name; frames without a pose are invalid.
    """
    poses = [RigidTransform.identity()] * n_frames
    valid = np.zeros(n_frames, bool)
    lines = [l for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")]
    k = 0
    while k < len(lines):
        tok = lines[k].split()
        k += 1
        if len(tok) == 10:        # COLMAP image line; skip its point line
            name, nums = tok[9], tok[1:8]
            k += 1
        elif len(tok) == 8:
            name, nums = tok[0], tok[1:8]
        else:
            raise DataError(f"{source}: cannot parse line {lines[k - 1]!r}")
        idx = _frame_index(name)
        if idx is None or not 0 <= idx < n_frames:
            raise DataError(f"{source}: image {name!r} does not map to a frame index")
        try:
            v = np.array([float(x) for x in nums])
        except ValueError as e:
            raise DataError(f"{source}: {e}") from None
        if not np.all(np.isfinite(v)) or np.linalg.norm(v[:4]) == 0:
            raise DataError(f"{source}: invalid pose for {name!r}")
        poses[idx] = RigidTransform(Rotation(v[:4] / np.linalg.norm(v[:4])), v[4:])
        valid[idx] = True
    # carry the last valid pose into gaps
    last = next((poses[i] for i in range(n_frames) if valid[i]), RigidTransform.identity())
    for i in range(n_frames):
        if valid[i]:
            last = poses[i]
        else:
            poses[i] = last
    return PoseSequence(poses, valid)


# ------------------------------------------------------------- keypoints

def write_keypoints(path, seq) -> None:
    lines = [KEYPOINT_HEADER]
    for i, k in enumerate(seq):
        rec = np.c_[k.joints2d, k.joints3d_wrist, k.confidence].reshape(-1)
        lines.append(f"{i} {int(bool(k.valid))} " + " ".join("%.17g" % x for x in rec))
    _ensure_dir(path)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_keypoints(path):
    from .handcam import HandKeypoints, N_JOINTS
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != KEYPOINT_HEADER:
        raise DataError(f"{path}: missing '{KEYPOINT_HEADER}' header")
    out = []
    for k, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 2 + 6 * N_JOINTS:
            raise DataError(f"{path}:{k}: expected {2 + 6 * N_JOINTS} fields, got {len(tok)}")
        if int(tok[0]) != len(out):
            raise DataError(f"{path}:{k}: frame indices must be contiguous from 0")
        try:
            rec = np.array([float(x) for x in tok[2:]]).reshape(N_JOINTS, 6)
        except ValueError as e:
            raise DataError(f"{path}:{k}: {e}") from None
        out.append(HandKeypoints(rec[:, :2], rec[:, 2:5], rec[:, 5], bool(int(tok[1]))))
    return out


# ---------------------------------------------------------- sequence layout

def frame_path(seq_dir, i: int, ext: str) -> str:
    return os.path.join(seq_dir, "frames", f"{i:04d}.{ext}")


def write_manifest(seq_dir, n_frames: int, K: CameraIntrinsics, tags: Optional[dict] = None, **extra):
    doc = {"n_frames": int(n_frames),
           "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
           "tags": dict(tags or {})}
    doc.update(extra)
    path = os.path.join(seq_dir, "manifest.json")
    _ensure_dir(path)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(seq_dir) -> dict:
    path = os.path.join(seq_dir, "manifest.json")
    try:
        with open(path) as f:
            doc = json.load(f)
        k = doc["intrinsics"]
        doc["K"] = CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"]),
                                    int(k["width"]), int(k["height"]))
        n = int(doc["n_frames"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: {e}") from None
    frames_dir = os.path.join(seq_dir, "frames")
    if os.path.isdir(frames_dir):
        for ext in ("img", "mask", "cloud"):
            have = sorted(f for f in os.listdir(frames_dir) if f.endswith("." + ext))
            if have and have != [f"{i:04d}.{ext}" for i in range(n)]:
                raise DataError(f"{seq_dir}: .{ext} files do not match the manifest frame count {n}")
    return doc


# ---------------------------------------------------------------- reports

def format_report(records: Sequence[Tuple[str, str, str, float]]) -> str:
    lines = [REPORT_HEADER]
    lines += [f"{m}\t{t}\t{g}\t{v!r}" for m, t, g, v in records]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> List[Tuple[str, str, str, float]]:
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise DataError("report is missing its header line")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"bad report line {line!r}")
        out.append((parts[0], parts[1], parts[2], float(parts[3])))
    return out


def write_json(path, doc):
    _ensure_dir(path)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def write_jsonl(path, records):
    _ensure_dir(path)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
