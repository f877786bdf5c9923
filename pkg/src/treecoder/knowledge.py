"""Retrieval support for the team leader and the coder.

Entries are verified (task, response) examples. They are embedded, unit
normalized and searched by exact cosine scan; the corpus is small enough that
nothing cleverer pays off.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol

import httpx
import numpy as np

from .errors import ConfigurationError, KnowledgeBaseError

DEFAULT_DIMENSION = 256
DEFAULT_K = 2
SEED_DIR = Path(str(resources.files("treecoder") / "data" / "kb"))

_TOKEN = re.compile(r"[a-z0-9]+")


class Embedder(Protocol):
    identity: str
    dimension: int

    def embed(self, texts: list[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Offline bag-of-words embedder: each token hashes to a signed bucket."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self.identity = f"hashing-bow-v1:{dimension}"

    def _vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dimension)
        for tok in _TOKEN.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
            v[h % self.dimension] += 1.0 if (h >> 32) & 1 else -1.0
        return v

    def embed(self, texts: list[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts]) if texts else np.zeros((0, self.dimension))


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, dimension: int, credentials: str,
                 transport: httpx.BaseTransport | None = None):
        self.dimension = dimension
        self.model = model
        self.identity = f"remote:{model}:{dimension}"
        key = os.environ.get(credentials, "")
        if not key:
            raise ConfigurationError(f"credential variable {credentials!r} is not set")
        self._client = httpx.Client(base_url=endpoint.rstrip("/") + "/", transport=transport,
                                    headers={"Authorization": f"Bearer {key}"}, timeout=60.0)

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        resp = self._client.post("embeddings", json={"model": self.model, "input": texts})
        resp.raise_for_status()
        rows = sorted(resp.json()["data"], key=lambda r: r["index"])
        return np.asarray([r["embedding"] for r in rows], dtype=float)


@dataclass(frozen=True)
class KnowledgeEntry:
    id: str
    task_text: str
    response_text: str
    tags: tuple[str, ...] = ()
    verified: bool = True

    def __post_init__(self):
        if not self.id:
            raise KnowledgeBaseError("knowledge entry without id")
        if not self.task_text.strip():
            raise KnowledgeBaseError(f"entry {self.id!r}: task_text is empty")
        if not self.response_text.strip():
            raise KnowledgeBaseError(f"entry {self.id!r}: response_text is empty")

    def to_dict(self) -> dict:
        return {"id": self.id, "task_text": self.task_text, "response_text": self.response_text,
                "tags": list(self.tags)}


def read_entries(path: str | Path) -> list[KnowledgeEntry]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            out.append(KnowledgeEntry(str(d["id"]), d["task_text"], d["response_text"], tuple(d.get("tags", ()))))
        except (ValueError, KeyError, TypeError) as exc:
            raise KnowledgeBaseError(f"{path}:{n}: bad entry: {exc}") from None
    ids = [e.id for e in out]
    if len(set(ids)) != len(ids):
        raise KnowledgeBaseError(f"{path}: duplicate entry ids")
    return out


@dataclass
class KnowledgeIndex:
    dimension: int
    embedder_identity: str
    entries: list[KnowledgeEntry] = field(default_factory=list)
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dimension))
        self.vectors = np.asarray(self.vectors, dtype=float).reshape(len(self.entries), self.dimension)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_vectors(cls, entries: list[KnowledgeEntry], vectors: Iterable[Iterable[float]],
                     identity: str = "manual") -> KnowledgeIndex:
        mat = np.asarray(list(vectors), dtype=float)
        if mat.ndim != 2 or len(mat) != len(entries):
            raise KnowledgeBaseError("need one vector per entry")
        return cls(mat.shape[1], identity, list(entries), _normalize(mat))

    def save(self, path: str | Path) -> None:
        doc = {
            "format": "treecoder-kb-index/1",
            "dimension": self.dimension,
            "embedder": self.embedder_identity,
            "entries": [{**e.to_dict(), "embedding": [float(x) for x in v]}
                        for e, v in zip(self.entries, self.vectors)],
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> KnowledgeIndex:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise KnowledgeBaseError(f"index file not found: {path}") from None
        except ValueError as exc:
            raise KnowledgeBaseError(f"index file {path} is not valid JSON: {exc}") from None
        dim = int(doc["dimension"])
        entries = [KnowledgeEntry(e["id"], e["task_text"], e["response_text"], tuple(e.get("tags", ())))
                   for e in doc["entries"]]
        vecs = np.asarray([e["embedding"] for e in doc["entries"]], dtype=float).reshape(len(entries), dim)
        return cls(dim, doc["embedder"], entries, vecs)


def _normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise KnowledgeBaseError("cannot normalize a zero vector")
    return mat / norms


def build_index(entries: list[KnowledgeEntry] | str | Path, embedder: Embedder | None = None) -> KnowledgeIndex:
    embedder = embedder or HashingEmbedder()
    if isinstance(entries, (str, Path)):
        entries = read_entries(entries)
    vecs = []
    for e in entries:
        try:
            v = np.asarray(embedder.embed([e.task_text])[0], dtype=float)
            if v.shape != (embedder.dimension,):
                raise KnowledgeBaseError(f"dimension {v.shape} != {embedder.dimension}")
            vecs.append(_normalize(v[None, :])[0])
        except Exception as exc:
            raise KnowledgeBaseError(f"embedding failed for entry {e.id!r}: {exc}") from exc
    mat = np.stack(vecs) if vecs else np.zeros((0, embedder.dimension))
    return KnowledgeIndex(embedder.dimension, embedder.identity, list(entries), mat)


@dataclass(frozen=True)
class Hit:
    entry: KnowledgeEntry
    score: float


def retrieve_vector(index: KnowledgeIndex, query: np.ndarray, k: int = DEFAULT_K) -> list[Hit]:
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0 or len(index) == 0:
        return []
    q = np.asarray(query, dtype=float)
    norm = np.linalg.norm(q)
    if norm == 0:
        return []
    scores = np.clip(index.vectors @ (q / norm), -1.0, 1.0)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.entries[i].id))
    return [Hit(index.entries[i], float(scores[i])) for i in order[:k]]


def retrieve(index: KnowledgeIndex, query: str, k: int = DEFAULT_K, embedder: Embedder | None = None) -> list[Hit]:
    embedder = embedder or HashingEmbedder(index.dimension)
    if embedder.identity != index.embedder_identity:
        raise KnowledgeBaseError(
            f"query embedder {embedder.identity!r} does not match index embedder {index.embedder_identity!r}")
    if k == 0 or len(index) == 0:
        return []
    return retrieve_vector(index, embedder.embed([query])[0], k)


def format_hits(hits: list[Hit]) -> str:
    if not hits:
        return ""
    parts = ["Reference examples from the knowledge base:"]
    for n, h in enumerate(hits, 1):
        parts.append(f"### Example {n} (similarity {h.score:.3f})\nTask:\n{h.entry.task_text.strip()}\n"
                     f"Response:\n{h.entry.response_text.strip()}")
    return "\n\n".join(parts) + "\n"


def seed_index(role: str) -> KnowledgeIndex:
    """Index over the shipped seed entries for ``team_leader`` or ``coder``."""
    path = SEED_DIR / f"{role}.jsonl"
    if not path.is_file():
        raise KnowledgeBaseError(f"no seed knowledge base for role {role!r}")
    return build_index(path)
