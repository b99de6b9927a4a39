"""Tensor containers, activation datasets, batch streaming and result records.

The container is a flat binary file::

    magic (8 bytes) | version (u32 LE) | descriptor length (u64 LE)
    | descriptor (UTF-8 JSON) | payload (little-endian float64, row-major)

Each descriptor entry carries ``name``, ``shape`` and a byte ``offset`` into
the payload.  Everything, integer token ids included, is stored as float64.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SAETNSR\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_ITEM = 8


class ContainerError(Exception):
    """Base class for container read/write failures."""


class DuplicateNameError(ContainerError, ValueError):
    pass


class CorruptDescriptorError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class UnknownVersionError(ContainerError):
    pass


def write_container(path, tensors: Mapping[str, np.ndarray] | list, meta: dict | None = None) -> None:
    """Write named tensors to ``path``.

    ``tensors`` is a mapping or a list of ``(name, array)`` pairs; the list
    form is the only way to hit the duplicate-name check.
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen = set()
    entries = []
    chunks = []
    offset = 0
    for name, value in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr)
        offset += arr.size * _ITEM
    descriptor = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(descriptor)))
        fh.write(descriptor)
        for arr in chunks:
            fh.write(arr.tobytes(order="C"))


def _parse_descriptor(raw: bytes) -> tuple[list[dict], dict]:
    try:
        desc = json.loads(raw.decode())
        entries = desc["tensors"]
        meta = desc.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptDescriptorError(f"unparseable descriptor: {exc}") from exc
    names = set()
    for e in entries:
        if not isinstance(e, dict) or set(e) < {"name", "shape", "offset"}:
            raise CorruptDescriptorError(f"malformed entry {e!r}")
        if e["name"] in names:
            raise CorruptDescriptorError(f"duplicate tensor name {e['name']!r}")
        names.add(e["name"])
        shape, off = e["shape"], e["offset"]
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise CorruptDescriptorError(f"bad shape for {e['name']!r}: {shape}")
        if not isinstance(off, int) or off < 0 or off % _ITEM:
            raise CorruptDescriptorError(f"bad offset for {e['name']!r}: {off}")
    spans = sorted(
        (e["offset"], e["offset"] + _ITEM * int(np.prod(e["shape"], dtype=np.int64)), e["name"])
        for e in entries
    )
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptDescriptorError(f"tensors {n0!r} and {n1!r} overlap")
    return entries, meta


def read_container(path, with_meta: bool = False):
    """Read every tensor from ``path``; optionally also return the meta dict."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptDescriptorError("file shorter than header")
    magic, version, dlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptDescriptorError("bad magic")
    if version != VERSION:
        raise UnknownVersionError(f"container version {version} not supported")
    start = _HEADER.size + dlen
    if start > len(data):
        raise CorruptDescriptorError("descriptor runs past end of file")
    entries, meta = _parse_descriptor(data[_HEADER.size:start])
    payload = memoryview(data)[start:]
    out = {}
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * _ITEM
        if end > len(payload):
            raise ShapeMismatchError(
                f"{e['name']!r} needs bytes [{e['offset']}, {end}) but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(e["shape"])
        out[e["name"]] = arr.astype(np.float64, copy=True)
    return (out, meta) if with_meta else out


@dataclass
class ActivationDataset:
    """Residual-stream activations at one layer, row-aligned with tokens.

    Special positions (BOS/PAD/EOS) stay in the arrays and are flagged in
    ``special_mask``; ``doc_ids`` marks document membership per row.
    """

    model_id: str
    layer: int
    tokens: np.ndarray
    activations: np.ndarray
    special_mask: np.ndarray
    doc_ids: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.activations = np.asarray(self.activations, dtype=np.float64)
        self.special_mask = np.asarray(self.special_mask, dtype=bool)
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64)
        n = len(self.tokens)
        if self.activations.ndim != 2 or self.activations.shape[0] != n:
            raise ValueError("activations must be (n_tokens, d)")
        if self.special_mask.shape != (n,) or self.doc_ids.shape != (n,):
            raise ValueError("special_mask and doc_ids must have one entry per token")

    @property
    def d(self) -> int:
        return self.activations.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def unmasked_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.special_mask)

    def head(self, n_rows: int) -> "ActivationDataset":
        n = min(n_rows, len(self))
        return ActivationDataset(
            self.model_id, self.layer, self.tokens[:n], self.activations[:n],
            self.special_mask[:n], self.doc_ids[:n],
        )


def save_dataset(path, ds: ActivationDataset) -> None:
    write_container(
        path,
        {
            "tokens": ds.tokens,
            "activations": ds.activations,
            "special_mask": ds.special_mask,
            "doc_ids": ds.doc_ids,
        },
        meta={"model_id": ds.model_id, "layer": ds.layer},
    )


def load_dataset(path) -> ActivationDataset:
    t, meta = read_container(path, with_meta=True)
    return ActivationDataset(
        meta["model_id"], int(meta["layer"]), t["tokens"].astype(np.int64),
        t["activations"], t["special_mask"] != 0, t["doc_ids"].astype(np.int64),
    )


def stream_batch_indices(dataset: ActivationDataset, batch: int, seed: int) -> Iterator[np.ndarray]:
    rows = dataset.unmasked_indices()
    if len(rows) == 0:
        raise ValueError("dataset has no unmasked rows")
    if batch < 1 or batch > len(rows):
        raise ValueError(f"batch {batch} must be in [1, {len(rows)}]")
    order = rows[np.random.default_rng(seed).permutation(len(rows))]
    for i in range(0, len(order), batch):
        yield order[i:i + batch]


def stream_batches(dataset: ActivationDataset, batch: int, seed: int) -> Iterator[np.ndarray]:
    """One shuffled epoch over the unmasked rows; the last batch may be short."""
    for idx in stream_batch_indices(dataset, batch, seed):
        yield dataset.activations[idx]


class ResultStore:
    """Append-only JSON-lines record log.

    Every record needs ``kind`` and ``run_id``; the pair must be unique.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._records: list[dict] = []
        self._keys: set[tuple[str, str]] = set()
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._records.append(rec)
                    self._keys.add((rec["kind"], rec["run_id"]))

    def append(self, record: dict) -> None:
        key = (record["kind"], record["run_id"])
        if key in self._keys:
            raise ValueError(f"record {key} already written")
        line = json.dumps(record, sort_keys=True, allow_nan=False)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(line + "\n")
        self._records.append(json.loads(line))
        self._keys.add(key)

    def has(self, kind: str, run_id: str) -> bool:
        return (kind, run_id) in self._keys

    def discard(self, kind: str, run_id: str) -> bool:
        """Drop one record (used when a stage is forced to rerun)."""
        key = (kind, run_id)
        if key not in self._keys:
            return False
        self._records = [r for r in self._records if (r["kind"], r["run_id"]) != key]
        self._keys.discard(key)
        body = "".join(json.dumps(r, sort_keys=True, allow_nan=False) + "\n" for r in self._records)
        self.path.write_text(body)
        return True

    def records(self, kind: str | None = None) -> list[dict]:
        return [json.loads(json.dumps(r)) for r in self._records if kind is None or r["kind"] == kind]

    def get(self, kind: str, run_id: str) -> dict:
        for r in self._records:
            if r["kind"] == kind and r["run_id"] == run_id:
                return json.loads(json.dumps(r))
        raise KeyError((kind, run_id))

    def __len__(self) -> int:
        return len(self._records)
