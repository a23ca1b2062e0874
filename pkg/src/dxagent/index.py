"""Brute-force vector index shared by guideline retrieval and the DCP store.

The corpus scale is tens to hundreds of entries, so an exhaustive cosine
scan is the implementation, not an approximation target. Similarity is a
float64 dot product over unit vectors; ties are broken by key so rankings
are reproducible.

Persistence splits text rows (entries.ndjson) from vectors (vectors.bin,
length-prefixed little-endian float32 records keyed by id).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError
from .gateway import l2_normalize


@dataclass(frozen=True)
class ChunkingConfig:
    max_words: int = 400
    overlap_words: int = 80

    def __post_init__(self):
        if self.max_words < 1:
            raise ConfigurationError("max_words must be positive")
        if not 0 <= self.overlap_words < self.max_words:
            raise ConfigurationError("overlap_words must be in [0, max_words)")


def chunk_words(words: Sequence[str], config: ChunkingConfig) -> list[list[str]]:
    """Fixed-stride sliding window over a word list.

    Windows start every max_words - overlap_words words; the window that
    reaches the final word is the last one, so no chunk is a pure suffix
    repeat. Concatenating chunks minus their leading overlaps restores
    the original word sequence.
    """
    if not words:
        return []
    stride = config.max_words - config.overlap_words
    chunks = []
    start = 0
    while True:
        end = min(start + config.max_words, len(words))
        chunks.append(list(words[start:end]))
        if end >= len(words):
            return chunks
        start += stride


def write_vector_record(fh: BinaryIO, key: str, values: Sequence[float]) -> None:
    data = key.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)
    fh.write(struct.pack("<I", len(values)))
    fh.write(struct.pack(f"<{len(values)}f", *values))


def read_vector_records(fh: BinaryIO) -> Iterator[tuple[str, list[float]]]:
    while True:
        header = fh.read(4)
        if not header:
            return
        if len(header) != 4:
            raise ValueError("truncated vector record header")
        (key_len,) = struct.unpack("<I", header)
        key = fh.read(key_len).decode("utf-8")
        (dim,) = struct.unpack("<I", fh.read(4))
        raw = fh.read(dim * 4)
        if len(raw) != dim * 4:
            raise ValueError(f"truncated vector record for key {key!r}")
        yield key, list(struct.unpack(f"<{dim}f", raw))


class VectorIndex:
    """In-memory index of (key, unit vector, payload) rows."""

    def __init__(self, encoder_tag: str = ""):
        self.encoder_tag = encoder_tag
        self._keys: list[str] = []
        self._payloads: dict[str, str] = {}
        self._vectors: list[list[float]] = []
        self._positions: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: str) -> bool:
        return key in self._positions

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(self._keys)

    def payload(self, key: str) -> str:
        return self._payloads[key]

    def vector(self, key: str) -> list[float]:
        return list(self._vectors[self._positions[key]])

    def add(self, key: str, vector: Sequence[float], payload: str) -> None:
        if key in self._positions:
            raise ValueError(f"duplicate index key: {key!r}")
        self._positions[key] = len(self._keys)
        self._keys.append(key)
        self._payloads[key] = payload
        self._vectors.append(l2_normalize(vector))

    def search(
        self,
        query_vector: Sequence[float],
        k: int,
        allowed_keys: Iterable[str] | None = None,
    ) -> list[tuple[str, float, str]]:
        """Top-k by cosine similarity, descending, key-ascending on ties.

        allowed_keys restricts the scan (snapshot and retraction filters
        for the DCP store) without copying the index.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        if not self._keys:
            return []
        if allowed_keys is None:
            candidate_keys = self._keys
            rows = self._vectors
        else:
            allowed = set(allowed_keys)
            candidate_keys = [key for key in self._keys if key in allowed]
            if not candidate_keys:
                return []
            rows = [self._vectors[self._positions[key]] for key in candidate_keys]
        matrix = np.asarray(rows, dtype=np.float64)
        query = np.asarray(l2_normalize(query_vector), dtype=np.float64)
        # one dot per row, not matrix @ query: blocked BLAS kernels can
        # round identical rows differently depending on position, and the
        # key tie-break only works if equal vectors get equal similarities
        sims = np.clip([float(np.dot(row, query)) for row in matrix], -1.0, 1.0)
        order = sorted(range(len(candidate_keys)), key=lambda i: (-sims[i], candidate_keys[i]))
        return [
            (candidate_keys[i], float(sims[i]), self._payloads[candidate_keys[i]])
            for i in order[:k]
        ]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "entries.ndjson").open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"encoder_tag": self.encoder_tag, "count": len(self)}) + "\n")
            for key in self._keys:
                fh.write(json.dumps({"key": key, "payload": self._payloads[key]}) + "\n")
        with (directory / "vectors.bin").open("wb") as fh:
            for key in self._keys:
                write_vector_record(fh, key, self._vectors[self._positions[key]])

    @classmethod
    def load(cls, directory: str | Path) -> "VectorIndex":
        directory = Path(directory)
        with (directory / "entries.ndjson").open("r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            index = cls(encoder_tag=str(header.get("encoder_tag", "")))
            payloads = []
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    payloads.append((str(row["key"]), str(row["payload"])))
        vectors: dict[str, list[float]] = {}
        with (directory / "vectors.bin").open("rb") as fh:
            for key, values in read_vector_records(fh):
                vectors[key] = values
        for key, payload in payloads:
            if key not in vectors:
                raise ValueError(f"entry {key!r} has no stored vector")
            index.add(key, vectors[key], payload)
        if len(index) != int(header.get("count", len(index))):
            raise ValueError("entry count disagrees with index header")
        return index
