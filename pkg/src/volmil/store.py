"""Binary containers and manifests for volumes, feature bags, and checkpoints.

All formats are little-endian with fixed layouts so that files written on one
machine read back bit-exactly on another. Nothing inside a payload depends on
time or environment: identical inputs give identical bytes.

``.vmil`` volume container, 64-byte header followed by raw voxels::

    offset  size  field
    0       4     magic b"VMIL"
    4       2     format version (currently 1), u16
    6       2     dtype code, u16 (0=u8, 1=u16, 2=f32)
    8       16    L, D, H, W as u32
    24      12    voxel size (d, h, w) in micrometers/voxel, 3 x f32
    36      28    reserved, zero
    64      ...   voxels, C-order (L, D, H, W), little-endian

``.fbag`` feature bag: header (magic b"FBAG", version, sample id, J, K,
coordinate schema) + J*K float32 features + J*6 uint32 coords
(origin d, h, w then patch shape d, h, w).

``.ckpt`` checkpoint: named float64 tensors (model parameters and optimizer
moments), step count, config hash, RNG seed.

``.tsv`` cohort manifest: plain tab-separated text, one header row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class StoreError(Exception):
    """Base class for malformed container errors."""


class BadMagicError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class TruncatedPayloadError(StoreError):
    pass


class ManifestError(StoreError):
    pass


class FeatureBagError(StoreError):
    pass


class CheckpointError(StoreError):
    pass


# ---------------------------------------------------------------------------
# Volumes

VOLUME_MAGIC = b"VMIL"
VOLUME_VERSION = 1
_VOLUME_HEADER = struct.Struct("<4sHHIIIIfff28x")
assert _VOLUME_HEADER.size == 64

_DTYPE_CODES = {np.dtype("uint8"): 0, np.dtype("uint16"): 1, np.dtype("float32"): 2}
_CODE_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}


@dataclass
class Volume:
    """Channel-major voxel grid with physical metadata.

    ``data`` has shape (L, D, H, W); dtype is one of uint8, uint16, float32.
    ``voxel_size`` is micrometers/voxel along (d, h, w).
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-d (L,D,H,W), got {self.data.shape}")
        if self.data.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported volume dtype {self.data.dtype}")
        if any(s <= 0 for s in self.voxel_size):
            raise ValueError("voxel_size must be positive on all axes")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def intensity(self) -> np.ndarray:
        """Channel-mean intensity, shape (D, H, W), float32."""
        if self.channels == 1:
            return self.data[0].astype(np.float32)
        return self.data.astype(np.float32).mean(axis=0)


def volume_file_size(channels: int, dims: tuple[int, int, int], dtype) -> int:
    """Exact on-disk size in bytes of a `.vmil` file with these dimensions."""
    d, h, w = dims
    return _VOLUME_HEADER.size + channels * d * h * w * np.dtype(dtype).itemsize


def write_volume(v: Volume, path) -> None:
    code = _DTYPE_CODES[v.data.dtype]
    l, d, h, w = v.data.shape
    header = _VOLUME_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, l, d, h, w, *v.voxel_size)
    payload = np.ascontiguousarray(v.data).astype(v.data.dtype.newbyteorder("<"), copy=False)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _VOLUME_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, code, l, d, h, w, vd, vh, vw = _VOLUME_HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VOLUME_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VOLUME_VERSION}")
    if code not in _CODE_DTYPES:
        raise StoreError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    expected = l * d * h * w * dtype.itemsize
    body = raw[_VOLUME_HEADER.size:]
    if len(body) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(body)} bytes, header implies {expected}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(l, d, h, w)
    # native-endian working copy (frombuffer is read-only anyway)
    data = data.astype(dtype.newbyteorder("="))
    return Volume(data=data, voxel_size=(vd, vh, vw))


# ---------------------------------------------------------------------------
# Cohort manifests

_MANIFEST_COLUMNS = ("sample_id", "volume_path", "label", "time", "event")
_EVENT_NAMES = {"observed": 1, "censored": 0}


@dataclass
class ManifestRecord:
    sample_id: str
    volume_path: str
    label: int | None = None       # {0,1}, absent for unlabeled cohorts
    time: float | None = None      # months
    event: int | None = None       # 1 observed, 0 censored


@dataclass
class CohortManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id!r}")
            seen.add(r.sample_id)
            if r.time is not None and r.event is None:
                raise ManifestError(f"{r.sample_id}: survival time without event flag")

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise ManifestError("manifest has records without labels")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]


def write_manifest(m: CohortManifest, path) -> None:
    lines = ["\t".join(_MANIFEST_COLUMNS)]
    for r in m.records:
        label = "" if r.label is None else str(r.label)
        time = "" if r.time is None else repr(float(r.time))
        event = "" if r.event is None else ("observed" if r.event else "censored")
        lines.append("\t".join([r.sample_id, r.volume_path, label, time, event]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> CohortManifest:
    text = Path(path).read_text()
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty file, expected a header row")
    header = lines[0].split("\t")
    if tuple(header) != _MANIFEST_COLUMNS:
        raise ManifestError(f"{path}: bad header {header}")
    records = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(_MANIFEST_COLUMNS):
            raise ManifestError(f"{path}: row has {len(parts)} fields: {ln!r}")
        sid, vpath, label, time, event = parts
        rec = ManifestRecord(
            sample_id=sid,
            volume_path=vpath,
            label=int(label) if label else None,
            time=float(time) if time else None,
            event=_parse_event(event, path) if event else None,
        )
        records.append(rec)
    return CohortManifest(records=records)


def _parse_event(text: str, path) -> int:
    if text not in _EVENT_NAMES:
        raise ManifestError(f"{path}: unknown event value {text!r}")
    return _EVENT_NAMES[text]


def resolve_volume_path(manifest_path, record: ManifestRecord) -> Path:
    """Volume paths in a manifest are relative to the manifest's directory."""
    p = Path(record.volume_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# Feature bags

BAG_MAGIC = b"FBAG"
BAG_VERSION = 1
COORD_SCHEMA_ORIGIN_SHAPE = 1  # 6 x u32 per row: origin (d,h,w) + patch shape (d,h,w)
_BAG_FIXED = struct.Struct("<4sHHIIH")  # magic, version, id length, J, K, coord schema


@dataclass
class FeatureBag:
    """Per-sample instance features with their patch coordinates.

    ``features`` is (J, K) float32; ``coords`` is (J, 6) uint32 rows of
    origin (d, h, w) followed by patch shape (d, h, w).
    """

    sample_id: str
    features: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.coords = np.asarray(self.coords, dtype=np.uint32)
        if self.features.ndim != 2:
            raise FeatureBagError("features must be a (J, K) matrix")
        if self.coords.shape != (self.features.shape[0], 6):
            raise FeatureBagError(
                f"coords shape {self.coords.shape} does not match J={self.features.shape[0]}"
            )
        if not np.isfinite(self.features).all():
            raise FeatureBagError(f"{self.sample_id}: non-finite feature values")

    @property
    def j(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    def depth_groups(self) -> np.ndarray:
        """Plane/cuboid group of each instance: the depth origin of its patch."""
        return self.coords[:, 0].astype(np.int64)


def write_feature_bag(bag: FeatureBag, path) -> None:
    sid = bag.sample_id.encode("utf-8")
    header = _BAG_FIXED.pack(BAG_MAGIC, BAG_VERSION, len(sid), bag.j, bag.k,
                             COORD_SCHEMA_ORIGIN_SHAPE)
    with open(path, "wb") as f:
        f.write(header)
        f.write(sid)
        f.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bag.coords, dtype="<u4").tobytes())


def read_feature_bag(path) -> FeatureBag:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _BAG_FIXED.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, id_len, j, k, schema = _BAG_FIXED.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {BAG_VERSION}")
    if schema != COORD_SCHEMA_ORIGIN_SHAPE:
        raise FeatureBagError(f"{path}: unknown coord schema {schema}")
    off = _BAG_FIXED.size
    sid = raw[off:off + id_len].decode("utf-8")
    off += id_len
    feat_bytes = j * k * 4
    coord_bytes = j * 6 * 4
    if len(raw) != off + feat_bytes + coord_bytes:
        raise FeatureBagError(
            f"{path}: payload is {len(raw) - off} bytes, header implies J*K={j}*{k}"
        )
    features = np.frombuffer(raw, dtype="<f4", count=j * k, offset=off).reshape(j, k)
    coords = np.frombuffer(raw, dtype="<u4", count=j * 6, offset=off + feat_bytes).reshape(j, 6)
    return FeatureBag(sample_id=sid, features=features.copy(), coords=coords.copy())


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"VCKP"
CKPT_VERSION = 1
_CKPT_FIXED = struct.Struct("<4sHQQ32sI")  # magic, version, step, seed, config hash, n tensors


@dataclass
class Checkpoint:
    """Model parameters plus optimizer state, all float64 tensors.

    ``params`` holds every trainable tensor exactly once; ``opt_m``/``opt_v``
    hold the first/second moments under the same keys (may be empty for a
    freshly initialized model).
    """

    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_hash: bytes = b"\x00" * 32
    seed: int = 0


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.params):
        entries.append((f"param/{name}", ckpt.params[name]))
    for prefix, table in (("opt_m", ckpt.opt_m), ("opt_v", ckpt.opt_v)):
        for name in sorted(table):
            entries.append((f"{prefix}/{name}", table[name]))
    if len(ckpt.config_hash) != 32:
        raise CheckpointError("config_hash must be a 32-byte digest")
    with open(path, "wb") as f:
        f.write(_CKPT_FIXED.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.step, ckpt.seed,
                                 ckpt.config_hash, len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_FIXED.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, version, step, seed, config_hash, n = _CKPT_FIXED.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    off = _CKPT_FIXED.size
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for _ in range(n):
        try:
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
        except struct.error as exc:
            raise TruncatedPayloadError(f"{path}: truncated tensor table") from exc
        count = int(np.prod(shape)) if ndim else 1
        if off + count * 8 > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated tensor payload for {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        arr = arr.reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        table = {"param": params, "opt_m": opt_m, "opt_v": opt_v}.get(kind)
        if table is None:
            raise CheckpointError(f"{path}: unknown tensor kind {kind!r}")
        if key in table:
            raise CheckpointError(f"{path}: tensor {name!r} appears twice")
        table[key] = arr
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(params=params, opt_m=opt_m, opt_v=opt_v, step=step,
                      seed=seed, config_hash=config_hash)
