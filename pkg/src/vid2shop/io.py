"""Dataset, gallery, prototype and checkpoint files.

Sequences and gallery items are JSON lines preceded by a header line
``{"format": ..., "version": 1}``; an empty file is an empty collection.
Checkpoints are binary::

    b"SEAMCKPT"  u32 version  u32 n_sections
    per section: u16 name_len, name (utf-8), u32 rows, u32 cols, rows*cols f32
    (all little-endian)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ParamStore
from .types import BBox, Detection, GalleryItem, SequenceRecord, Tracklet

FORMAT_VERSION = 1
CKPT_MAGIC = b"SEAMCKPT"
CKPT_VERSION = 1

SEQ_FORMAT = "seam-seq"
GAL_FORMAT = "seam-gal"
PROTO_FORMAT = "seam-proto"


class FormatError(ValueError):
    """A file could not be parsed; carries where the problem is."""

    def __init__(self, path, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        loc = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{path}{loc}: {message}")
        self.path = str(path)
        self.line = line
        self.offset = offset


class VersionError(FormatError):
    pass


# -- JSON lines ----------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _floats(arr) -> list:
    return [float(x) for x in np.asarray(arr).reshape(-1)]


def detection_to_json(d: Detection) -> dict:
    out = {
        "frame": d.frame_index,
        "det": d.det_index,
        "bbox": d.bbox.as_list(),
        "conf": d.confidence,
        "feature": _floats(d.conv_feature),
    }
    if d.truth_id is not None:
        out["truth"] = d.truth_id
    return out


def detection_from_json(obj: dict) -> Detection:
    return Detection(
        frame_index=int(obj["frame"]),
        det_index=int(obj["det"]),
        bbox=BBox(*(float(v) for v in obj["bbox"])),
        confidence=float(obj["conf"]),
        conv_feature=np.asarray(obj["feature"], dtype=np.float64),
        truth_id=obj.get("truth"),
    )


def tracklet_to_json(t: Tracklet) -> dict:
    return {"id": t.id, "pivot": t.pivot, "detections": [detection_to_json(d) for d in t.detections]}


def tracklet_from_json(obj: dict) -> Tracklet:
    return Tracklet(int(obj["id"]), tuple(detection_from_json(d) for d in obj["detections"]), int(obj["pivot"]))


def record_to_json(r: SequenceRecord) -> dict:
    out = {
        "sequence_id": r.sequence_id,
        "paired_item_ids": list(r.paired_item_ids),
        "frames": [[detection_to_json(d) for d in frame] for frame in r.frames],
    }
    if r.gt_tracklet is not None:
        out["gt_tracklet"] = tracklet_to_json(r.gt_tracklet)
    return out


def record_from_json(obj: dict) -> SequenceRecord:
    gt = obj.get("gt_tracklet")
    return SequenceRecord(
        sequence_id=str(obj["sequence_id"]),
        paired_item_ids=tuple(str(i) for i in obj["paired_item_ids"]),
        frames=tuple(tuple(detection_from_json(d) for d in frame) for frame in obj["frames"]),
        gt_tracklet=tracklet_from_json(gt) if gt is not None else None,
    )


def item_to_json(g: GalleryItem) -> dict:
    return {"item_id": g.item_id, "class": g.class_label, "feature": _floats(g.conv_feature)}


def item_from_json(obj: dict) -> GalleryItem:
    return GalleryItem(str(obj["item_id"]), str(obj["class"]), np.asarray(obj["feature"], dtype=np.float64))


def _write_jsonl(path, fmt: str, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({"format": fmt, "version": FORMAT_VERSION}) + "\n")
        for obj in objs:
            fh.write(_dumps(obj) + "\n")


def _read_jsonl(path, fmt: str, parse) -> list:
    data = Path(path).read_bytes()
    if not data.strip():
        return []
    out = []
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        start = offset
        offset += len(raw) + 1
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            pos = getattr(exc, "pos", 0) or 0
            raise FormatError(path, f"malformed JSON record: {exc}", lineno, start + pos) from None
        if lineno == 1:
            if not isinstance(obj, dict) or obj.get("format") != fmt:
                raise FormatError(path, f"missing {fmt!r} header", lineno, start)
            if obj.get("version") != FORMAT_VERSION:
                raise VersionError(path, f"unsupported version {obj.get('version')!r}, expected {FORMAT_VERSION}", lineno, start)
            continue
        try:
            out.append(parse(obj))
        except (KeyError, TypeError, ValueError) as exc:
            name = obj.get("sequence_id") or obj.get("item_id") if isinstance(obj, dict) else None
            what = f"record {name!r}" if name else "record"
            raise FormatError(path, f"invalid {what}: {exc!r}", lineno, start) from None
    return out


def save_dataset(path, records: Sequence[SequenceRecord]) -> None:
    _write_jsonl(path, SEQ_FORMAT, (record_to_json(r) for r in records))


def load_dataset(path) -> list:
    return _read_jsonl(path, SEQ_FORMAT, record_from_json)


def save_gallery(path, items: Sequence[GalleryItem]) -> None:
    _write_jsonl(path, GAL_FORMAT, (item_to_json(g) for g in items))


def load_gallery(path) -> list:
    return _read_jsonl(path, GAL_FORMAT, item_from_json)


def save_prototypes(path, prototypes: dict) -> None:
    _write_jsonl(
        path, PROTO_FORMAT, ({"item_id": k, "prototype": _floats(v)} for k, v in prototypes.items())
    )


def load_prototypes(path) -> dict:
    rows = _read_jsonl(path, PROTO_FORMAT, lambda o: (str(o["item_id"]), np.asarray(o["prototype"], dtype=np.float64)))
    return dict(rows)


# -- checkpoints ---------------------------------------------------------


def checkpoint_bytes(params: ParamStore) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        rows, cols = value.shape
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(value.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: ParamStore) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(data: bytes, path="<bytes>") -> ParamStore:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(path, f"truncated checkpoint while reading {what}", offset=pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise FormatError(path, "bad magic, not a checkpoint", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise VersionError(path, f"unsupported checkpoint version {version}", offset=len(CKPT_MAGIC))
    store = ParamStore()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "section name length"))
        name = take(name_len, "section name").decode("utf-8")
        rows, cols = struct.unpack("<II", take(8, f"shape of {name}"))
        raw = take(4 * rows * cols, f"data of {name}")
        store.add(name, np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols))
    if pos != len(data):
        raise FormatError(path, "trailing bytes after last section", offset=pos)
    return store


def load_checkpoint(path) -> ParamStore:
    return parse_checkpoint(Path(path).read_bytes(), path)
