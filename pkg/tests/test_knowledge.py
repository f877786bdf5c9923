import json
import math

import httpx
import numpy as np
import pytest

from treecoder.errors import ConfigurationError, KnowledgeBaseError
from treecoder.knowledge import (
    HashingEmbedder,
    KnowledgeEntry,
    KnowledgeIndex,
    RemoteEmbedder,
    build_index,
    format_hits,
    read_entries,
    retrieve,
    retrieve_vector,
    seed_index,
)


def _entry(i, text="task"):
    return KnowledgeEntry(f"e{i}", f"{text} {i}", "response")


def _cosine_fixture():
    # unit query along x; each entry's cosine to it is its x component
    vecs = [[0.5, math.sqrt(1 - 0.25), 0.0], [0.1, 0.0, math.sqrt(1 - 0.01)], [0.9, math.sqrt(1 - 0.81), 0.0]]
    return KnowledgeIndex.from_vectors([_entry(0), _entry(1), _entry(2)], vecs)


def test_hand_computed_cosine_order():
    hits = retrieve_vector(_cosine_fixture(), np.array([1.0, 0.0, 0.0]), k=3)
    assert [h.entry.id for h in hits] == ["e2", "e0", "e1"]
    assert [round(h.score, 9) for h in hits] == [0.9, 0.5, 0.1]


def test_scores_scale_invariant_and_ties_by_id():
    idx = KnowledgeIndex.from_vectors([_entry(2), _entry(1)], [[2.0, 0.0], [5.0, 0.0]])
    hits = retrieve_vector(idx, np.array([3.0, 0.0]), k=2)
    assert [h.entry.id for h in hits] == ["e1", "e2"]
    assert all(abs(h.score - 1.0) < 1e-12 for h in hits)


def test_self_query_scores_one_at_rank_one():
    idx = seed_index("coder")
    for entry in idx.entries:
        hits = retrieve(idx, entry.task_text, k=2)
        assert abs(hits[0].score - 1.0) < 1e-6
        assert hits[0].score >= hits[-1].score


def test_empty_cases():
    idx = seed_index("team_leader")
    assert retrieve(idx, "anything", k=0) == []
    empty = build_index([])
    assert retrieve(empty, "anything", k=2) == []
    assert format_hits([]) == ""
    with pytest.raises(ValueError):
        retrieve_vector(idx, np.ones(idx.dimension), k=-1)


def test_save_load_round_trip(tmp_path):
    idx = seed_index("team_leader")
    idx.save(tmp_path / "i.json")
    again = KnowledgeIndex.load(tmp_path / "i.json")
    assert again.embedder_identity == idx.embedder_identity
    assert [e.id for e in again.entries] == [e.id for e in idx.entries]
    assert np.allclose(again.vectors, idx.vectors)
    q = "segment license plate characters"
    assert [h.entry.id for h in retrieve(again, q)] == [h.entry.id for h in retrieve(idx, q)]


def test_mismatched_embedder_is_rejected():
    idx = build_index([_entry(0)], HashingEmbedder(64))
    with pytest.raises(KnowledgeBaseError, match="does not match"):
        retrieve(idx, "x", embedder=HashingEmbedder(128))


def test_entry_validation_and_reader(tmp_path):
    with pytest.raises(KnowledgeBaseError):
        KnowledgeEntry("x", " ", "r")
    p = tmp_path / "e.jsonl"
    p.write_text(json.dumps({"id": "a", "task_text": "t", "response_text": "r"}) + "\n" +
                 json.dumps({"id": "a", "task_text": "t", "response_text": "r"}) + "\n")
    with pytest.raises(KnowledgeBaseError, match="duplicate"):
        read_entries(p)
    with pytest.raises(KnowledgeBaseError, match="not found"):
        KnowledgeIndex.load(tmp_path / "missing.json")


def test_zero_vector_entry_cannot_be_indexed():
    with pytest.raises(KnowledgeBaseError):
        build_index([KnowledgeEntry("z", "!!!", "r")])


def test_remote_embedder(monkeypatch):
    def handler(request):
        body = json.loads(request.content)
        assert request.headers["authorization"] == "Bearer k"
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    monkeypatch.setenv("EMB_KEY", "k")
    emb = RemoteEmbedder("http://emb", "m", 2, "EMB_KEY", transport=httpx.MockTransport(handler))
    assert emb.embed(["ab", "abcd"]).tolist() == [[2.0, 1.0], [4.0, 1.0]]
    monkeypatch.delenv("EMB_KEY")
    with pytest.raises(ConfigurationError):
        RemoteEmbedder("http://emb", "m", 2, "EMB_KEY")
