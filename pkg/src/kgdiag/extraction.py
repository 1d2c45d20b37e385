"""Symptom/treatment entity extraction from disease source text.

Two interchangeable backends produce :class:`ExtractionResult`:

* ``llm_one_shot_cot`` renders the shipped one-shot chain-of-thought template,
  sends it to a chat-completion endpoint, and parses the final structured
  SYMPTOM/TREATMENT blocks of the reply.
* ``dictionary`` is a deterministic offline matcher over two term lists,
  there so the rest of the pipeline can run (and be tested) without any model
  endpoint.

Scoring follows an exact-match protocol: an extracted entity counts as
correct only when it equals a gold entity after case folding and whitespace
collapsing, and corpus-level micro F1 sums TP/FP/FN before dividing.
"""

from __future__ import annotations

import datetime as _dt
import json
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import requests

from .errors import BackendError, ConfigError, ParseError
from .ratelimit import NullLimiter, TokenBucket, with_retries

SYMPTOM = "symptom"
TREATMENT = "treatment"
ROLES = (SYMPTOM, TREATMENT)


def _clean_entities(entries: Iterable[str]) -> list[str]:
    """Strip, drop empties, dedupe case-insensitively keeping first casing."""
    seen: set[str] = set()
    out: list[str] = []
    for entry in entries:
        text = entry.strip()
        if not text:
            continue
        key = text.casefold()
        if key in seen:
            continue
        seen.add(key)
        out.append(text)
    return out


@dataclass
class ExtractionResult:
    disease: str
    kb_id: str
    symptoms: list[str] = field(default_factory=list)
    treatments: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.symptoms = _clean_entities(self.symptoms)
        self.treatments = _clean_entities(self.treatments)

    def entities(self, role: str) -> list[str]:
        if role == SYMPTOM:
            return self.symptoms
        if role == TREATMENT:
            return self.treatments
        raise ConfigError(f"unknown role {role!r}")


def load_prompt_template(path: str | Path | None = None) -> str:
    """Load a prompt template with ``{title}``/``{text}`` placeholders."""
    if path is not None:
        return Path(path).read_text(encoding="utf-8")
    return resources.files("kgdiag.templates").joinpath("one_shot_cot.txt").read_text("utf-8")


def build_one_shot_cot_prompt(
    disease_title: str, source_text: str, template: str | None = None
) -> str:
    """Fill the one-shot chain-of-thought template for one disease page."""
    if not disease_title.strip() or not source_text.strip():
        raise ConfigError("disease title and source text must be non-empty")
    template = template if template is not None else load_prompt_template()
    return template.replace("{title}", disease_title).replace("{text}", source_text)


_BLOCK_RE = {
    role: re.compile(
        r"\\begin\{%s\}(.*?)\\end\{%s\}" % (env, env), re.DOTALL | re.IGNORECASE
    )
    for role, env in ((SYMPTOM, "SYMPTOM"), (TREATMENT, "TREATMENT"))
}
_ITEM_RE = re.compile(r"\\item\{([^{}]*)\}")


def parse_extraction_response(
    response: str, disease: str = "", kb_id: str = ""
) -> ExtractionResult:
    """Parse the last SYMPTOM and TREATMENT blocks out of a model reply.

    The template's final step emits its answer last, after the worked
    example's blocks, so the last block pair is the one that counts.
    """
    lists: dict[str, list[str]] = {}
    for role, pattern in _BLOCK_RE.items():
        blocks = pattern.findall(response)
        if not blocks:
            raise ParseError(f"no {role.upper()} block in response", raw_response=response)
        lists[role] = [m.group(1) for m in _ITEM_RE.finditer(blocks[-1])]
    return ExtractionResult(
        disease=disease, kb_id=kb_id, symptoms=lists[SYMPTOM], treatments=lists[TREATMENT]
    )


def render_extraction_blocks(result: ExtractionResult) -> str:
    """Render entity lists back into the block format the parser reads."""
    lines = ["\\begin{SYMPTOM}"]
    lines += ["\\item{%s}" % s for s in result.symptoms]
    lines.append("\\end{SYMPTOM}")
    lines.append("\\begin{TREATMENT}")
    lines += ["\\item{%s}" % t for t in result.treatments]
    lines.append("\\end{TREATMENT}")
    return "\n".join(lines)


class CompletionClient(Protocol):
    """Text-in/text-out chat completion."""

    def complete(self, prompt: str) -> str: ...


class HttpCompletionClient:
    """Minimal chat-completion HTTP client (OpenAI-style request body).

    Temperature is pinned to 0 so repeated queries are as stable as the
    endpoint allows. The API key is read from ``api_key_env`` at call time and
    never stored in configs.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "KGDIAG_COMPLETION_API_KEY",
        max_tokens: int = 4096,
        temperature: float = 0.0,
        rate_limiter=None,
        retries: int = 3,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.rate_limiter = rate_limiter or TokenBucket(1.0)
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, prompt: str) -> str:
        import os

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

        def attempt() -> str:
            self.rate_limiter.acquire()
            resp = self.session.post(
                self.endpoint, json=body, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]

        try:
            return with_retries(attempt, attempts=self.retries)
        except Exception as exc:
            raise BackendError(f"completion endpoint failed: {exc}") from exc


class ExtractionBackend(Protocol):
    backend_id: str

    def extract(self, disease: str, source_text: str, kb_id: str = "") -> ExtractionResult: ...


_WORD_BOUNDARY = r"(?<![A-Za-z0-9]){}(?![A-Za-z0-9])"


class DictionaryBackend:
    """Offline backend: report every dictionary term found verbatim in the text.

    Matching is case-insensitive on word boundaries; the returned entity is
    the text span as it appears in the source, ordered by first occurrence.
    """

    backend_id = "dictionary"

    def __init__(self, symptom_terms: Sequence[str], treatment_terms: Sequence[str]):
        self.symptom_terms = _clean_entities(symptom_terms)
        self.treatment_terms = _clean_entities(treatment_terms)

    @staticmethod
    def _find(terms: Sequence[str], text: str) -> list[str]:
        hits: list[tuple[int, str]] = []
        for term in terms:
            match = re.search(_WORD_BOUNDARY.format(re.escape(term)), text, re.IGNORECASE)
            if match:
                hits.append((match.start(), match.group(0)))
        hits.sort(key=lambda pair: pair[0])
        return [span for _, span in hits]

    def extract(self, disease: str, source_text: str, kb_id: str = "") -> ExtractionResult:
        return ExtractionResult(
            disease=disease,
            kb_id=kb_id,
            symptoms=self._find(self.symptom_terms, source_text),
            treatments=self._find(self.treatment_terms, source_text),
        )


class LlmOneShotCotBackend:
    """Prompt -> completion -> parse, with one automatic re-query on ParseError."""

    backend_id = "llm_one_shot_cot"

    def __init__(
        self,
        client: CompletionClient,
        template: str | None = None,
        audit_path: str | Path | None = None,
    ):
        self.client = client
        self.template = template if template is not None else load_prompt_template()
        self.audit_path = Path(audit_path) if audit_path else None
        self._audit_lock = threading.Lock()

    def _audit(self, disease: str, prompt: str, response: str) -> None:
        if self.audit_path is None:
            return
        record = {
            "ts": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "disease": disease,
            "prompt": prompt,
            "response": response,
        }
        line = json.dumps(record, ensure_ascii=False)
        with self._audit_lock:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def extract(self, disease: str, source_text: str, kb_id: str = "") -> ExtractionResult:
        prompt = build_one_shot_cot_prompt(disease, source_text, self.template)
        last_error: ParseError | None = None
        for _ in range(2):
            response = self.client.complete(prompt)
            self._audit(disease, prompt, response)
            try:
                return parse_extraction_response(response, disease=disease, kb_id=kb_id)
            except ParseError as exc:
                last_error = exc
        assert last_error is not None
        raise last_error


def extract_entities(
    backend: ExtractionBackend, disease: str, source_text: str, kb_id: str = ""
) -> ExtractionResult:
    return backend.extract(disease, source_text, kb_id=kb_id)


def canonical_entity(text: str) -> str:
    """Exact-match canonical form: case folded, inner whitespace collapsed."""
    return " ".join(text.split()).casefold()


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0


def match_counts(predicted: ExtractionResult, gold: ExtractionResult) -> dict[str, MatchCounts]:
    counts: dict[str, MatchCounts] = {}
    for role in ROLES:
        pred = {canonical_entity(e) for e in predicted.entities(role)}
        true = {canonical_entity(e) for e in gold.entities(role)}
        counts[role] = MatchCounts(
            tp=len(pred & true), fp=len(pred - true), fn=len(true - pred)
        )
    return counts


def evaluate_extraction(predicted: ExtractionResult, gold: ExtractionResult) -> dict[str, float]:
    """Per-role F1 for one (disease, kb) pair under the exact-match protocol."""
    return {role: c.f1() for role, c in match_counts(predicted, gold).items()}


def aggregate_extraction_scores(
    pairs: Iterable[tuple[ExtractionResult, ExtractionResult]],
) -> dict[str, MatchCounts]:
    """Micro aggregation: sum TP/FP/FN over all pairs before computing F1."""
    totals = {role: MatchCounts() for role in ROLES}
    for predicted, gold in pairs:
        for role, c in match_counts(predicted, gold).items():
            totals[role] = totals[role] + c
    return totals
