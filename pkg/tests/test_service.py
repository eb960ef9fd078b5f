import json
import urllib.error
import urllib.request

import numpy as np
import pytest

from relsearch import corpus as corpus_io
from relsearch import service as svc
from relsearch.features import (
    FeatureExtractor,
    build_bm25_index,
    build_feature_layout,
    save_bm25_index,
)
from relsearch.student import (
    FeatureBatch,
    StudentConfig,
    expected_gain,
    init_student,
    save_student,
    student_forward,
)


@pytest.fixture(scope="module")
def service_world(tmp_path_factory, tiny_corpus):
    """Artifacts on disk plus the in-memory pieces used to cross-check."""
    outdir = tmp_path_factory.mktemp("service")
    enriched = corpus_io.apply_engagement_rates(tiny_corpus.pins, tiny_corpus.engagement)
    corpus_io.save_pins(enriched, outdir / "pins.jsonl")
    index = build_bm25_index(enriched)
    save_bm25_index(index, outdir / "bm25.json")
    layout = build_feature_layout(enriched, d_query_emb=16, d_pin_emb=16)
    model = init_student(layout, StudentConfig(16, 8), seed=0)
    save_student(model, outdir / "student.json")
    config = svc.ServiceConfig(
        student_checkpoint=str(outdir / "student.json"),
        bm25_index=str(outdir / "bm25.json"),
        pin_store=str(outdir / "pins.jsonl"),
        max_batch=32,
    )
    return config, enriched, tiny_corpus, outdir


@pytest.fixture(scope="module")
def running(service_world):
    config, enriched, tiny_corpus, _ = service_world
    with svc.start_service(config) as handle:
        yield handle, enriched, tiny_corpus


def http_json(url, payload=None):
    if payload is None:
        request = urllib.request.Request(url)
    else:
        request = urllib.request.Request(
            url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
    with urllib.request.urlopen(request, timeout=10) as response:
        return response.status, json.loads(response.read().decode("utf-8"))


def http_error(url, body: bytes):
    request = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(request, timeout=10):
            raise AssertionError("expected an HTTP error")
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read().decode("utf-8"))


class TestEndpoints:
    def test_healthz(self, running):
        handle, _, _ = running
        status, payload = http_json(f"{handle.url}/healthz")
        assert status == 200
        assert payload == {"status": "ok"}

    def test_score_known_pins(self, running):
        handle, enriched, _ = running
        pin_ids = [p.pin_id for p in enriched[:3]]
        status, payload = http_json(
            f"{handle.url}/v1/score", {"query_text": "t0w1 t0w2", "pin_ids": pin_ids}
        )
        assert status == 200
        assert payload["skipped"] == []
        assert [r["pin_id"] for r in payload["results"]] == pin_ids
        for result in payload["results"]:
            assert len(result["probs"]) == 5
            assert sum(result["probs"]) == pytest.approx(1.0)
            assert result["relevance_score"] == pytest.approx(
                float(np.dot(result["probs"], [0.0, 0.25, 0.5, 0.75, 1.0]))
            )

    def test_unknown_pins_skipped(self, running):
        handle, enriched, _ = running
        status, payload = http_json(
            f"{handle.url}/v1/score",
            {"query_text": "t0w1", "pin_ids": [enriched[0].pin_id, "nope1", "nope2"]},
        )
        assert status == 200
        assert payload["skipped"] == ["nope1", "nope2"]
        assert [r["pin_id"] for r in payload["results"]] == [enriched[0].pin_id]

    def test_all_unknown(self, running):
        handle, _, _ = running
        status, payload = http_json(
            f"{handle.url}/v1/score", {"query_text": "t0w1", "pin_ids": ["nope"]}
        )
        assert status == 200
        assert payload["results"] == []
        assert payload["skipped"] == ["nope"]

    def test_deterministic_responses(self, running):
        handle, enriched, _ = running
        body = {"query_text": "t1w4 t1w5", "pin_ids": [p.pin_id for p in enriched[:5]]}
        _, first = http_json(f"{handle.url}/v1/score", body)
        _, second = http_json(f"{handle.url}/v1/score", body)
        assert first == second

    def test_query_id_drives_engagement_feature(self, running):
        handle, enriched, tiny_corpus = running
        record = tiny_corpus.engagement[0]
        anonymous = http_json(
            f"{handle.url}/v1/score",
            {"query_text": "t0w1", "pin_ids": [record.pin_id]},
        )[1]
        keyed = http_json(
            f"{handle.url}/v1/score",
            {"query_text": "t0w1", "pin_ids": [record.pin_id], "query_id": record.query_id},
        )[1]
        assert anonymous["results"][0]["probs"] != keyed["results"][0]["probs"]

    def test_unknown_paths_404(self, running):
        handle, _, _ = running
        with pytest.raises(urllib.error.HTTPError) as excinfo:
            http_json(f"{handle.url}/v2/other")
        assert excinfo.value.code == 404
        code, _ = http_error(f"{handle.url}/v1/other", b"{}")
        assert code == 404


class TestBadRequests:
    @pytest.mark.parametrize(
        "payload",
        [
            {"pin_ids": ["p1"]},  # missing query_text
            {"query_text": "x"},  # missing pin_ids
            {"query_text": "", "pin_ids": ["p1"]},
            {"query_text": "   ", "pin_ids": ["p1"]},
            {"query_text": "x", "pin_ids": "p1"},
            {"query_text": "x", "pin_ids": ["p1", 7]},
            {"query_text": 5, "pin_ids": ["p1"]},
            {"query_text": "x", "pin_ids": ["p1"], "query_id": 9},
        ],
    )
    def test_malformed_payloads_400(self, running, payload):
        handle, _, _ = running
        code, body = http_error(f"{handle.url}/v1/score", json.dumps(payload).encode())
        assert code == 400
        assert "error" in body

    def test_invalid_json_400(self, running):
        handle, _, _ = running
        code, _ = http_error(f"{handle.url}/v1/score", b"{not json")
        assert code == 400
        code, _ = http_error(f"{handle.url}/v1/score", b'["array"]')
        assert code == 400

    def test_oversized_batch_400(self, running):
        handle, _, _ = running
        payload = {"query_text": "x", "pin_ids": [f"p{i}" for i in range(33)]}
        code, body = http_error(f"{handle.url}/v1/score", json.dumps(payload).encode())
        assert code == 400
        assert "max_batch" in body["error"]


class TestStats:
    def test_counts_and_percentiles(self, running):
        handle, enriched, _ = running
        before = http_json(f"{handle.url}/stats")[1]
        for _ in range(3):
            http_json(
                f"{handle.url}/v1/score",
                {"query_text": "t0w1", "pin_ids": [enriched[0].pin_id]},
            )
        http_error(f"{handle.url}/v1/score", b"{}")
        after = http_json(f"{handle.url}/stats")[1]
        assert after["requests"] >= before["requests"] + 3
        assert after["errors"] >= before["errors"] + 1
        assert 0.0 <= after["latency_ms"]["p50"] <= after["latency_ms"]["p99"]


class TestParity:
    def test_online_matches_offline_forward(self, running):
        handle, enriched, tiny_corpus = running
        engine = handle.engine
        query = tiny_corpus.queries[0]
        pins = enriched[:8]
        response = engine.score_online(
            query.text, [p.pin_id for p in pins], query_id=query.query_id
        )
        offline_batch = FeatureBatch.from_pairs(
            (
                (engine.extractor.assemble(
                    corpus_io.QueryRecord(query_id=query.query_id, text=query.text), pin
                ), None)
                for pin in pins
            ),
            engine.extractor.layout,
        )
        offline = student_forward(engine.model, offline_batch)
        gains = expected_gain(offline)
        for result, row, gain in zip(response.results, offline, gains):
            assert result.probs == tuple(float(p) for p in row)
            assert result.relevance_score == float(gain)

    def test_http_round_trip_preserves_floats(self, running):
        handle, enriched, tiny_corpus = running
        query = tiny_corpus.queries[0]
        pins = enriched[:4]
        direct = handle.engine.score_online(
            query.text, [p.pin_id for p in pins], query_id=query.query_id
        )
        _, via_http = http_json(
            f"{handle.url}/v1/score",
            {
                "query_text": query.text,
                "pin_ids": [p.pin_id for p in pins],
                "query_id": query.query_id,
            },
        )
        for want, got in zip(direct.results, via_http["results"]):
            assert list(want.probs) == got["probs"]  # repr round-trip is exact
            assert want.relevance_score == got["relevance_score"]


class TestEngine:
    def test_max_batch_enforced(self, running):
        handle, enriched, _ = running
        engine = svc.ScoringEngine(
            handle.engine.model,
            handle.engine.extractor,
            handle.engine.pins_by_id,
            max_batch=2,
        )
        with pytest.raises(svc.RequestError, match="max_batch"):
            engine.score_online("x", [p.pin_id for p in enriched[:3]])

    def test_query_embedding_store_wired(self, service_world):
        config, enriched, tiny_corpus, outdir = service_world
        store = {
            q.query_id: q.query_embedding
            for q in tiny_corpus.queries
            if q.query_embedding is not None
        }
        corpus_io.save_embedding_store(store, outdir / "qemb.jsonl")
        engine = svc.build_engine(
            svc.ServiceConfig(
                student_checkpoint=config.student_checkpoint,
                bm25_index=config.bm25_index,
                pin_store=config.pin_store,
                query_embedding_store=str(outdir / "qemb.jsonl"),
            )
        )
        query_id = next(iter(store))
        response = engine.score_online("t0w1", [enriched[0].pin_id], query_id=query_id)
        bare = svc.build_engine(config).score_online(
            "t0w1", [enriched[0].pin_id], query_id=query_id
        )
        # with the store attached, the query embedding changes the features
        assert response.results[0].probs != bare.results[0].probs


class TestStartup:
    def test_missing_artifact_names_path(self, tmp_path):
        config = svc.ServiceConfig(
            student_checkpoint=str(tmp_path / "absent.json"),
            bm25_index=str(tmp_path / "absent2.json"),
            pin_store=str(tmp_path / "absent3.jsonl"),
        )
        with pytest.raises(svc.StartupError, match="absent.json"):
            svc.build_engine(config)

    def test_corrupt_artifact_rejected(self, service_world, tmp_path):
        config, _, _, _ = service_world
        bad = tmp_path / "bad.json"
        bad.write_text("{}")
        broken = svc.ServiceConfig(
            student_checkpoint=str(bad),
            bm25_index=config.bm25_index,
            pin_store=config.pin_store,
        )
        with pytest.raises(svc.StartupError, match="student checkpoint"):
            svc.build_engine(broken)

    def test_bad_max_batch(self):
        with pytest.raises(svc.StartupError):
            svc.ServiceConfig(
                student_checkpoint="a", bm25_index="b", pin_store="c", max_batch=0
            )


class TestNearestRank:
    def test_hand_cases(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert svc.nearest_rank(values, 50) == 2.0
        assert svc.nearest_rank(values, 99) == 4.0
        assert svc.nearest_rank(values, 100) == 4.0
        assert svc.nearest_rank(values, 1) == 1.0

    def test_single_and_empty(self):
        assert svc.nearest_rank([7.5], 50) == 7.5
        assert svc.nearest_rank([], 99) == 0.0

    def test_invalid_percentile(self):
        with pytest.raises(ValueError):
            svc.nearest_rank([1.0], 0)
        with pytest.raises(ValueError):
            svc.nearest_rank([1.0], 101)
