"""PVT tensor files, PVTC checkpoints and JSON-lines dataset manifests.

PVT layout::

    b"PVT1" | u8 rank | rank x u32 LE extents | prod(extents) x f32 LE (row-major)

PVTC layout (several named tensors in one file)::

    b"PVTC" | u32 LE header length | UTF-8 JSON header | concatenated PVT blobs

The JSON header maps each name to ``{"offset": ..., "length": ...}`` relative
to the end of the header, plus a free-form ``"meta"`` object.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"PVT1"
CKPT_MAGIC = b"PVTC"
MAX_RANK = 4
ROLES = ("probe", "gallery", "train")


class TensorFormatError(ValueError):
    """Base class for malformed PVT data."""


class BadMagicError(TensorFormatError):
    pass


class RankError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


class ManifestError(ValueError):
    pass


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise RankError(f"rank {len(dims)} outside 1..{MAX_RANK}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"all extents must be positive, got {dims}")
    if any(d >= 2**32 for d in dims):
        raise ValueError(f"extent does not fit in u32: {dims}")
    return dims


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    dims = _check_dims(arr.shape)
    data = np.ascontiguousarray(arr, dtype="<f4")
    return MAGIC + struct.pack("<B", len(dims)) + struct.pack(f"<{len(dims)}I", *dims) + data.tobytes()


def decode_tensor(buf: bytes, *, exact: bool = True) -> tuple[np.ndarray, int]:
    """Decode one tensor from the start of ``buf``.

    Returns the array and the number of bytes consumed. With ``exact`` the
    buffer must hold nothing past the payload.
    """
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    rank = buf[4]
    if not 1 <= rank <= MAX_RANK:
        raise RankError(f"rank {rank} outside 1..{MAX_RANK}")
    head = 5 + 4 * rank
    if len(buf) < head:
        raise TruncatedPayloadError("header shorter than declared rank")
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero extent in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    end = head + 4 * count
    if len(buf) < end:
        raise TruncatedPayloadError(f"payload needs {4 * count} bytes, have {len(buf) - head}")
    if exact and len(buf) != end:
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=head).astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr, end


def load_tensor(path) -> np.ndarray:
    """Read a PVT file. The returned float32 array is read-only."""
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_tensor(t, path) -> None:
    blob = encode_tensor(t)  # validates before touching the file
    Path(path).write_bytes(blob)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    index = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        blob = encode_tensor(tensors[name])
        index[name] = {"offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedPayloadError("checkpoint header truncated")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise TruncatedPayloadError("checkpoint header truncated")
    header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    body = memoryview(buf)[8 + hlen:]
    tensors = {}
    for name, loc in header["tensors"].items():
        lo, n = loc["offset"], loc["length"]
        if lo + n > len(body):
            raise TruncatedPayloadError(f"tensor {name!r} runs past end of file")
        tensors[name], _ = decode_tensor(bytes(body[lo:lo + n]))
    return tensors, header.get("meta", {})


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    id: str
    label: int
    role: str
    feature: Path
    pose: Path
    vis_gt: tuple[int, ...] | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def by_role(self, role: str) -> list[Record]:
        return [r for r in self.records if r.role == role]

    def role_counts(self) -> dict[str, int]:
        counts = Counter(r.role for r in self.records)
        return {role: counts.get(role, 0) for role in ROLES}

    def get(self, image_id: str) -> Record:
        for r in self.records:
            if r.id == image_id:
                return r
        raise KeyError(image_id)


_REQUIRED = ("id", "label", "role", "feature", "pose")


def parse_record(obj: dict, root: Path, n_parts: int | None = None) -> Record:
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ManifestError(f"record missing field(s) {missing}: {obj}")
    unknown = set(obj) - set(_REQUIRED) - {"vis_gt"}
    if unknown:
        raise ManifestError(f"unknown key(s) {sorted(unknown)}")
    if obj["role"] not in ROLES:
        raise ManifestError(f"unknown role {obj['role']!r}")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label < 0:
        raise ManifestError(f"label must be a non-negative integer, got {label!r}")
    vis = obj.get("vis_gt")
    if vis is not None:
        if any(v not in (0, 1) or isinstance(v, bool) for v in vis):
            raise ManifestError(f"vis_gt must hold 0/1 values: {vis}")
        if n_parts is not None and len(vis) != n_parts:
            raise ManifestError(f"vis_gt length {len(vis)} != n_parts {n_parts} for {obj['id']}")
        vis = tuple(vis)
    return Record(str(obj["id"]), label, obj["role"], root / obj["feature"], root / obj["pose"], vis)


def load_manifest(path, n_parts: int | None = None, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    Paths inside records are resolved relative to the manifest's directory.
    ``n_parts`` (when given) is the required ``vis_gt`` length.
    """
    path = Path(path)
    root = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            rec = parse_record(obj, root, n_parts)
            if rec.id in seen:
                raise ManifestError(f"duplicate image id {rec.id!r} at line {lineno}")
            seen.add(rec.id)
            records.append(rec)
    train_labels = {r.label for r in records if r.role == "train"}
    if train_labels and train_labels != set(range(len(train_labels))):
        raise ManifestError("train identity labels are not contiguous from 0")
    if check_files:
        for r in records:
            for p in (r.feature, r.pose):
                if not p.is_file():
                    raise ManifestError(f"{r.id}: missing file {p}")
    manifest = DatasetManifest(records, root)
    log.info("manifest %s: %s", path, manifest.role_counts())
    return manifest


def write_manifest(path, rows: list[dict]) -> None:
    """Write manifest rows (dicts with relative paths) as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
