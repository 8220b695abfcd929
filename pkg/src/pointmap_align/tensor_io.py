"""Tensor containers (JSON header + raw little-endian payload), scene manifests and PLY export."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import PoseSE3
from .pairwise import PairPrediction

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
MANIFEST_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dump_json(obj))


def read_json(path):
    with open(path, "rb") as fh:
        return json.loads(fh.read())


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".bin")


@dataclass(frozen=True)
class TensorContainer:
    """A tensor stored as ``<stem>.json`` (header) plus ``<stem>.bin`` (raw row-major bytes)."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise InvalidInputError(f"unsupported dtype {self.dtype!r}; expected one of {sorted(DTYPES)}")
        shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in shape):
            raise InvalidInputError(f"negative dimension in shape {shape}")
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[self.dtype].itemsize
        if len(self.data) != expected:
            raise InvalidInputError(f"payload has {len(self.data)} bytes, header implies {expected}")
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_array(cls, array, dtype: str | None = None) -> "TensorContainer":
        a = np.asarray(array)
        if dtype is None:
            dtype = "u8" if a.dtype in (np.bool_, np.uint8) else "f32"
        if dtype not in DTYPES:
            raise InvalidInputError(f"unsupported dtype {dtype!r}")
        return cls(dtype, a.shape, np.ascontiguousarray(a, dtype=DTYPES[dtype]).tobytes())

    def header(self) -> dict:
        return {"dtype": self.dtype, "shape": list(self.shape), "order": "row-major", "endianness": "little"}

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=DTYPES[self.dtype]).reshape(self.shape).copy()

    def write(self, header_path) -> Path:
        header_path = Path(header_path)
        atomic_write_bytes(_payload_path(header_path), self.data)
        write_json(header_path, self.header())
        return header_path

    @classmethod
    def read(cls, header_path) -> "TensorContainer":
        header_path = Path(header_path)
        try:
            header = read_json(header_path)
            data = _payload_path(header_path).read_bytes()
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read tensor {header_path}: {exc}") from exc
        if header.get("order", "row-major") != "row-major" or header.get("endianness", "little") != "little":
            raise InvalidInputError(f"{header_path}: only row-major little-endian tensors are supported")
        return cls(header.get("dtype"), tuple(header.get("shape", ())), data)


def save_tensor(header_path, array, dtype: str | None = None) -> Path:
    return TensorContainer.from_array(array, dtype).write(header_path)


def load_tensor(header_path) -> np.ndarray:
    return TensorContainer.read(header_path).to_array()


def pose_from_stored(m) -> PoseSE3:
    """Pose from a stored 4x4 matrix, re-projected onto SO(3) (f32 storage breaks orthonormality)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise InvalidInputError(f"expected a 4x4 pose matrix, got {m.shape}")
    u, _, vt = np.linalg.svd(m[:3, :3])
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise InvalidInputError("stored rotation is a reflection")
    return PoseSE3(r, m[:3, 3])


def load_pose(header_path) -> PoseSE3:
    return pose_from_stored(load_tensor(header_path))


@dataclass
class SceneManifest:
    """Index of the tensors describing one scene.

    Paths are stored relative to the manifest's directory. ``ground_truth`` may
    hold ``poses`` (list of 4x4 tensor paths), ``focals`` (numbers),
    ``pair_points`` (per pair key ``"i,j"`` a ``[src, tgt]`` path pair),
    ``surface_points`` (path) and ``scene_extent``.
    """

    num_views: int
    width: int
    height: int
    pairs: dict[str, dict[str, str]]
    ground_truth: dict | None = None
    root: Path = field(default_factory=Path)

    @staticmethod
    def pair_name(key) -> str:
        return f"{int(key[0])},{int(key[1])}"

    @staticmethod
    def parse_pair(name: str) -> tuple[int, int]:
        try:
            i, j = (int(x) for x in name.split(","))
        except ValueError as exc:
            raise InvalidInputError(f"malformed pair name {name!r}") from exc
        return i, j

    def to_dict(self) -> dict:
        d = {
            "version": MANIFEST_VERSION,
            "num_views": self.num_views,
            "width": self.width,
            "height": self.height,
            "pairs": self.pairs,
        }
        if self.ground_truth is not None:
            d["ground_truth"] = self.ground_truth
        return d

    def write(self, path) -> Path:
        path = Path(path)
        write_json(path, self.to_dict())
        return path

    @classmethod
    def read(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            d = read_json(path)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read manifest {path}: {exc}") from exc
        try:
            m = cls(int(d["num_views"]), int(d["width"]), int(d["height"]), dict(d["pairs"]), d.get("ground_truth"), path.parent)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"manifest {path} is malformed: {exc}") from exc
        if m.num_views < 2:
            raise InvalidInputError("a manifest needs at least two views")
        return m

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_predictions(self) -> list[PairPrediction]:
        preds = []
        for name in sorted(self.pairs, key=self.parse_pair):
            i, j = self.parse_pair(name)
            entry = self.pairs[name]
            try:
                arrays = {k: load_tensor(self.resolve(entry[k])).astype(float) for k in ("points_src", "points_tgt", "conf_src", "conf_tgt")}
            except KeyError as exc:
                raise InvalidInputError(f"pair {name} lacks entry {exc}") from exc
            preds.append(PairPrediction(i, j, **arrays))
        return preds

    @property
    def has_ground_truth(self) -> bool:
        gt = self.ground_truth or {}
        return all(k in gt for k in ("poses", "focals"))

    def load_gt_poses(self) -> list[PoseSE3]:
        return [load_pose(self.resolve(p)) for p in self.ground_truth["poses"]]

    def load_gt_pair_points(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for name, (src, tgt) in (self.ground_truth or {}).get("pair_points", {}).items():
            out[self.parse_pair(name)] = np.stack([load_tensor(self.resolve(src)), load_tensor(self.resolve(tgt))]).astype(float)
        return out


def write_ply(path, points, colors=None) -> Path:
    """ASCII PLY point cloud; ``colors`` are optional 0-255 RGB rows."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}", "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors).reshape(-1, 3).astype(np.uint8)
        if len(colors) != len(pts):
            raise InvalidInputError("one colour per point is required")
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for k, p in enumerate(pts):
        row = f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}"
        if colors is not None:
            row += " {} {} {}".format(*colors[k])
        lines.append(row)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
    return Path(path)
