"""Map extracted entity strings to unique normalized medical concepts.

A candidate provider returns up to ten ranked concepts for an entity string;
normalization walks them in rank order and returns the first one whose
semantic types intersect the role's allowed set, or ``None`` when no candidate
qualifies. Results (including the null outcome) are cached on disk keyed by
(entity, role) so paid lookups are never repeated.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import requests

from .cache import FileCache
from .errors import NormalizationError
from .extraction import SYMPTOM, TREATMENT
from .kb import slugify
from .ratelimit import TokenBucket, with_retries

# Allowed UMLS semantic type abbreviations per role.
SYMPTOM_TYPES = frozenset(
    {"sosy", "dsyn", "mobd", "neop", "anab", "fndg", "patf", "cgab", "inpo"}
)
TREATMENT_TYPES = frozenset(
    {"topp", "antb", "clnd", "vita", "orch", "aapp", "phsu", "lbpr", "diap"}
)
SEMANTIC_TYPE_SETS: dict[str, frozenset[str]] = {
    SYMPTOM: SYMPTOM_TYPES,
    TREATMENT: TREATMENT_TYPES,
}

MAX_CANDIDATES = 10

_CUI_RE = re.compile(r"^C\d+$")


@dataclass(frozen=True)
class ConceptCandidate:
    concept_name: str
    cui: str
    semantic_types: tuple[str, ...]


@dataclass(frozen=True)
class NormalizedConcept:
    surface: str
    concept_name: str
    cui: str
    semantic_type: str

    def __post_init__(self):
        if not _CUI_RE.match(self.cui):
            raise ValueError(f"malformed CUI {self.cui!r}")


class ConceptCandidateProvider(Protocol):
    """Returns the provider's relevance-ranked candidates for an entity."""

    def candidates(self, entity: str) -> Sequence[ConceptCandidate]: ...


class FixtureProvider:
    """Reads candidate lists from ``<root>/<slug(entity)>.json`` for tests.

    Each file is a JSON list of ``{"name", "cui", "types"}`` objects in rank
    order. A missing file means the provider knows no candidates.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def candidates(self, entity: str) -> list[ConceptCandidate]:
        path = self.root / (slugify(entity) + ".json")
        if not path.exists():
            return []
        rows = json.loads(path.read_text(encoding="utf-8"))
        return [
            ConceptCandidate(r["name"], r["cui"], tuple(r.get("types", []))) for r in rows
        ]


class HttpConceptProvider:
    """Concept search over HTTP with an API key taken from the environment.

    Expects ``GET <endpoint>?string=<entity>&apiKey=...`` to return JSON
    ``{"results": [{"name", "cui", "types"}, ...]}`` in rank order.
    """

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "KGDIAG_CONCEPT_API_KEY",
        rate_limiter=None,
        retries: int = 3,
        timeout: float = 15.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.rate_limiter = rate_limiter or TokenBucket(1.0)
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()

    def candidates(self, entity: str) -> list[ConceptCandidate]:
        import os

        params = {"string": entity}
        key = os.environ.get(self.api_key_env)
        if key:
            params["apiKey"] = key

        def attempt():
            self.rate_limiter.acquire()
            resp = self.session.get(self.endpoint, params=params, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json().get("results", [])

        try:
            rows = with_retries(attempt, attempts=self.retries)
        except Exception as exc:
            raise NormalizationError(f"concept lookup failed for {entity!r}: {exc}") from exc
        return [
            ConceptCandidate(r["name"], r["cui"], tuple(r.get("types", []))) for r in rows
        ]


def _first_qualifying(
    entity: str, candidates: Sequence[ConceptCandidate], role: str
) -> NormalizedConcept | None:
    allowed = SEMANTIC_TYPE_SETS[role]
    for candidate in candidates[:MAX_CANDIDATES]:
        for sem_type in candidate.semantic_types:
            if sem_type in allowed:
                return NormalizedConcept(
                    surface=entity,
                    concept_name=candidate.concept_name,
                    cui=candidate.cui,
                    semantic_type=sem_type,
                )
    return None


class ConceptNormalizer:
    """Rank-ordered, type-filtered normalization with a persistent cache."""

    def __init__(self, provider: ConceptCandidateProvider, cache: FileCache | None = None):
        self.provider = provider
        self.cache = cache

    def normalize_entity(self, entity: str, role: str) -> NormalizedConcept | None:
        if not entity.strip():
            raise NormalizationError("entity must be non-empty")
        if role not in SEMANTIC_TYPE_SETS:
            raise NormalizationError(f"unknown role {role!r}")
        cache_key = f"{role}\x00{entity.casefold()}"
        if self.cache is not None:
            hit = self.cache.get("normalize", cache_key)
            if hit is not None:
                payload = json.loads(hit.body)
                if payload is None:
                    return None
                return NormalizedConcept(**payload)
        concept = _first_qualifying(entity, self.provider.candidates(entity), role)
        if self.cache is not None:
            payload = None if concept is None else {
                "surface": concept.surface,
                "concept_name": concept.concept_name,
                "cui": concept.cui,
                "semantic_type": concept.semantic_type,
            }
            self.cache.put(
                "normalize", cache_key, {"entity": entity, "role": role}, json.dumps(payload)
            )
        return concept


def normalize_entity(
    provider: ConceptCandidateProvider,
    entity: str,
    role: str,
    cache: FileCache | None = None,
) -> NormalizedConcept | None:
    return ConceptNormalizer(provider, cache).normalize_entity(entity, role)


def dedupe_by_cui(concepts: Iterable[NormalizedConcept]) -> list[NormalizedConcept]:
    """Keep the first occurrence per CUI, preserving order."""
    seen: set[str] = set()
    out: list[NormalizedConcept] = []
    for concept in concepts:
        if concept.cui in seen:
            continue
        seen.add(concept.cui)
        out.append(concept)
    return out
