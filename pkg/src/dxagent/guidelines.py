"""Local guideline corpus: chunking, dense indexing, and rendering.

Documents are plain text plus a manifest. Bodies are whitespace-cleaned,
split into overlapping word windows, and embedded one chunk per index
entry. Search renders the top chunks as titled excerpt blocks for the
observation channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .gateway import Gateway
from .index import ChunkingConfig, VectorIndex, chunk_words

GUIDELINES_UNAVAILABLE = "Guideline search is unavailable."
NO_GUIDELINES_FOUND = "No relevant guideline content was found."

DEFAULT_GUIDELINE_K = 3
DEFAULT_EXCERPT_CHARS = 800


@dataclass(frozen=True)
class GuidelineDoc:
    doc_id: str
    title: str
    body: str
    source: str = ""
    year: str = ""


@dataclass(frozen=True)
class GuidelineChunk:
    doc_id: str
    chunk_index: int
    title: str
    body: str

    @property
    def key(self) -> str:
        return f"{self.doc_id}#{self.chunk_index:04d}"


class PartialIndexError(RuntimeError):
    def __init__(self, failed: Sequence[tuple[str, str]]):
        self.failed = list(failed)
        lines = "\n".join(f"  - {key}: {reason}" for key, reason in self.failed)
        super().__init__(f"{len(self.failed)} chunk(s) failed to embed:\n{lines}")


def clean_body(body: str) -> str:
    return " ".join(body.split())


def chunk_document(doc: GuidelineDoc, config: ChunkingConfig) -> list[GuidelineChunk]:
    words = clean_body(doc.body).split()
    return [
        GuidelineChunk(doc_id=doc.doc_id, chunk_index=i, title=doc.title, body=" ".join(chunk))
        for i, chunk in enumerate(chunk_words(words, config))
    ]


class GuidelineIndex:
    def __init__(self, index: VectorIndex, chunks: dict[str, GuidelineChunk]):
        self.index = index
        self.chunks = chunks

    def __len__(self) -> int:
        return len(self.index)

    def search(self, query: str, gateway: Gateway, k: int = DEFAULT_GUIDELINE_K):
        if len(self.index) == 0:
            return []
        query_vector = gateway.embed([query])[0]
        hits = self.index.search(query_vector, k)
        return [(self.chunks[key], sim) for key, sim, _payload in hits]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.index.save(directory)
        with (directory / "chunks.ndjson").open("w", encoding="utf-8") as fh:
            for key in self.index.keys:
                chunk = self.chunks[key]
                fh.write(
                    json.dumps(
                        {
                            "key": key,
                            "doc_id": chunk.doc_id,
                            "chunk_index": chunk.chunk_index,
                            "title": chunk.title,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, directory: str | Path) -> "GuidelineIndex":
        directory = Path(directory)
        index = VectorIndex.load(directory)
        chunks: dict[str, GuidelineChunk] = {}
        with (directory / "chunks.ndjson").open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                chunks[str(row["key"])] = GuidelineChunk(
                    doc_id=str(row["doc_id"]),
                    chunk_index=int(row["chunk_index"]),
                    title=str(row["title"]),
                    body=index.payload(str(row["key"])),
                )
        return cls(index, chunks)


def index_corpus(
    docs: Sequence[GuidelineDoc],
    gateway: Gateway,
    chunking: ChunkingConfig | None = None,
    out_dir: str | Path | None = None,
    encoder_tag: str = "",
) -> GuidelineIndex:
    """Chunk, embed, and index every document; persist when out_dir given.

    Embedding failures do not abort the scan: every failing chunk is
    collected and reported together so a corpus problem surfaces in one
    pass.
    """
    chunking = chunking or ChunkingConfig()
    index = VectorIndex(encoder_tag=encoder_tag)
    chunks: dict[str, GuidelineChunk] = {}
    failed: list[tuple[str, str]] = []
    for doc in docs:
        if not doc.body.strip():
            failed.append((doc.doc_id, "empty body"))
            continue
        for chunk in chunk_document(doc, chunking):
            try:
                vector = gateway.embed([chunk.body])[0]
            except Exception as exc:
                failed.append((chunk.key, str(exc)))
                continue
            index.add(chunk.key, vector, chunk.body)
            chunks[chunk.key] = chunk
    if failed:
        raise PartialIndexError(failed)
    built = GuidelineIndex(index, chunks)
    if out_dir is not None:
        built.save(out_dir)
    return built


def load_corpus_dir(directory: str | Path) -> list[GuidelineDoc]:
    """Read documents listed in a manifest.json next to their text files."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(entries, list):
        raise ValueError(f"{manifest_path} must hold a JSON list of document entries")
    docs = []
    for entry in entries:
        doc_id = str(entry["doc_id"])
        file_name = str(entry.get("file", f"{doc_id}.txt"))
        body = (directory / file_name).read_text(encoding="utf-8")
        docs.append(
            GuidelineDoc(
                doc_id=doc_id,
                title=str(entry.get("title", doc_id)),
                body=body,
                source=str(entry.get("source", "")),
                year=str(entry.get("year", "")),
            )
        )
    return docs


def render_guideline_hits(
    hits: Sequence[tuple[GuidelineChunk, float]],
    excerpt_chars: int = DEFAULT_EXCERPT_CHARS,
) -> str:
    if not hits:
        return NO_GUIDELINES_FOUND
    blocks = []
    for chunk, _sim in hits:
        excerpt = chunk.body[:excerpt_chars]
        blocks.append(f"【{chunk.title}】 {excerpt}")
    return "\n\n".join(blocks)


def search_guidelines(
    index: GuidelineIndex | None,
    query: str,
    gateway: Gateway,
    k: int = DEFAULT_GUIDELINE_K,
    excerpt_chars: int = DEFAULT_EXCERPT_CHARS,
) -> str:
    """Observation text for a guideline query; never raises to the agent."""
    if index is None or len(index) == 0:
        return GUIDELINES_UNAVAILABLE
    hits = index.search(query, gateway, k)
    return render_guideline_hits(hits, excerpt_chars)
