import http.server
import json
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgdiag.cache import FileCache
from kgdiag.errors import NormalizationError
from kgdiag.extraction import SYMPTOM, TREATMENT
from kgdiag.normalize import (
    MAX_CANDIDATES,
    SYMPTOM_TYPES,
    TREATMENT_TYPES,
    ConceptCandidate,
    ConceptNormalizer,
    FixtureProvider,
    HttpConceptProvider,
    NormalizedConcept,
    dedupe_by_cui,
    normalize_entity,
)


class ListProvider:
    def __init__(self, rows):
        self.rows = rows
        self.calls = 0

    def candidates(self, entity):
        self.calls += 1
        return self.rows


class FailingProvider:
    def candidates(self, entity):
        raise NormalizationError("provider down")


class TestSemanticTypeSets:
    def test_symptom_set_exact(self):
        assert SYMPTOM_TYPES == {
            "sosy", "dsyn", "mobd", "neop", "anab", "fndg", "patf", "cgab", "inpo",
        }

    def test_treatment_set_exact(self):
        assert TREATMENT_TYPES == {
            "topp", "antb", "clnd", "vita", "orch", "aapp", "phsu", "lbpr", "diap",
        }


class TestNormalizeEntity:
    def test_fever_maps_to_c0015967(self, concept_fixture_dir):
        provider = FixtureProvider(concept_fixture_dir)
        concept = normalize_entity(provider, "fever", SYMPTOM)
        assert concept == NormalizedConcept("fever", "Fever", "C0015967", "sosy")

    def test_first_qualifying_rank_wins(self, concept_fixture_dir):
        provider = FixtureProvider(concept_fixture_dir)
        concept = normalize_entity(provider, "high temperature", SYMPTOM)
        assert concept is not None
        assert concept.cui == "C0015967"  # rank-1 was treatment-typed, rank-2 wins

    def test_all_wrong_types_gives_absent(self):
        rows = [
            ConceptCandidate(f"c{i}", f"C{i:07d}", ("topp",)) for i in range(1, 11)
        ]
        assert normalize_entity(ListProvider(rows), "thing", SYMPTOM) is None

    def test_synonyms_share_cui(self, concept_fixture_dir):
        provider = FixtureProvider(concept_fixture_dir)
        cuis = {
            normalize_entity(provider, surface, SYMPTOM).cui
            for surface in ("fever", "burning up")
        }
        assert cuis == {"C0015967"}

    def test_multi_type_candidate_qualifies_on_intersection(self):
        rows = [ConceptCandidate("Mixed", "C0000001", ("lbpr", "sosy"))]
        concept = normalize_entity(ListProvider(rows), "x", SYMPTOM)
        assert concept is not None and concept.semantic_type == "sosy"

    def test_only_first_ten_candidates_scanned(self):
        rows = [ConceptCandidate(f"c{i}", f"C{i:07d}", ("topp",)) for i in range(10)]
        rows.append(ConceptCandidate("late", "C9999999", ("sosy",)))
        assert len(rows) == MAX_CANDIDATES + 1
        assert normalize_entity(ListProvider(rows), "x", SYMPTOM) is None

    def test_provider_failure_distinct_from_absent(self):
        with pytest.raises(NormalizationError):
            normalize_entity(FailingProvider(), "x", SYMPTOM)

    def test_empty_entity_rejected(self):
        with pytest.raises(NormalizationError):
            normalize_entity(ListProvider([]), "  ", SYMPTOM)

    def test_unknown_role_rejected(self):
        with pytest.raises(NormalizationError):
            normalize_entity(ListProvider([]), "x", "procedure")

    def test_cache_hit_skips_provider(self, tmp_path):
        rows = [ConceptCandidate("Fever", "C0015967", ("sosy",))]
        provider = ListProvider(rows)
        normalizer = ConceptNormalizer(provider, FileCache(tmp_path / "cache"))
        first = normalizer.normalize_entity("fever", SYMPTOM)
        second = normalizer.normalize_entity("fever", SYMPTOM)
        assert provider.calls == 1
        assert first == second

    def test_null_result_cached_too(self, tmp_path):
        provider = ListProvider([ConceptCandidate("c", "C0000001", ("topp",))])
        normalizer = ConceptNormalizer(provider, FileCache(tmp_path / "cache"))
        assert normalizer.normalize_entity("x", SYMPTOM) is None
        assert normalizer.normalize_entity("x", SYMPTOM) is None
        assert provider.calls == 1

    def test_cache_keyed_by_role(self, tmp_path):
        rows = [ConceptCandidate("Aspirin", "C0004057", ("phsu", "orch"))]
        provider = ListProvider(rows)
        normalizer = ConceptNormalizer(provider, FileCache(tmp_path / "cache"))
        assert normalizer.normalize_entity("aspirin", SYMPTOM) is None
        assert normalizer.normalize_entity("aspirin", TREATMENT) is not None
        assert provider.calls == 2


cui_numbers = st.integers(min_value=1, max_value=9999999)
type_codes = st.sampled_from(sorted(SYMPTOM_TYPES | TREATMENT_TYPES | {"zzzz", "qqqq"}))


@given(
    rows=st.lists(
        st.tuples(cui_numbers, st.lists(type_codes, max_size=3)), max_size=10
    ),
    role=st.sampled_from([SYMPTOM, TREATMENT]),
)
@settings(max_examples=200, deadline=None)
def test_rank_monotonicity(rows, role):
    """If rank i qualifies, nothing past i is ever returned."""
    from kgdiag.normalize import SEMANTIC_TYPE_SETS

    candidates = [
        ConceptCandidate(f"name{i}", f"C{n:07d}", tuple(types))
        for i, (n, types) in enumerate(rows)
    ]
    result = normalize_entity(ListProvider(candidates), "entity", role)
    allowed = SEMANTIC_TYPE_SETS[role]
    qualifying = [c for c in candidates if set(c.semantic_types) & allowed]
    if qualifying:
        assert result is not None
        assert result.cui == qualifying[0].cui
    else:
        assert result is None


class TestDedupeByCui:
    def test_fever_synonyms_collapse(self):
        fever = NormalizedConcept("fever", "Fever", "C0015967", "sosy")
        burning = NormalizedConcept("burning up", "Fever", "C0015967", "sosy")
        assert dedupe_by_cui([fever, burning]) == [fever]

    def test_empty(self):
        assert dedupe_by_cui([]) == []

    def test_distinct_unchanged(self):
        a = NormalizedConcept("a", "A", "C0000001", "sosy")
        b = NormalizedConcept("b", "B", "C0000002", "sosy")
        assert dedupe_by_cui([a, b]) == [a, b]


class TestNormalizedConcept:
    def test_cui_pattern_enforced(self):
        with pytest.raises(ValueError):
            NormalizedConcept("x", "X", "0015967", "sosy")
        with pytest.raises(ValueError):
            NormalizedConcept("x", "X", "Cabc", "sosy")


class _ConceptHandler(http.server.BaseHTTPRequestHandler):
    seen_keys: list[str] = []

    def do_GET(self):
        from urllib.parse import parse_qs, urlparse

        query = parse_qs(urlparse(self.path).query)
        self.seen_keys.append(query.get("apiKey", [""])[0])
        body = json.dumps(
            {"results": [{"name": "Fever", "cui": "C0015967", "types": ["sosy"]}]}
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


def test_http_provider_uses_env_api_key(monkeypatch):
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _ConceptHandler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        monkeypatch.setenv("KGDIAG_CONCEPT_API_KEY", "sekrit")
        provider = HttpConceptProvider(f"http://127.0.0.1:{server.server_port}/search")
        rows = provider.candidates("fever")
        assert rows == [ConceptCandidate("Fever", "C0015967", ("sosy",))]
        assert _ConceptHandler.seen_keys[-1] == "sekrit"
    finally:
        server.shutdown()
