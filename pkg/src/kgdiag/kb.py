"""Fetch disease pages from pluggable knowledge bases and slice out sections.

Three access modes are supported:

* ``local_file`` maps a query to ``<endpoint>/<slug>.txt`` (fixture corpora,
  offline runs).
* ``api`` expects a search endpoint returning JSON
  ``{"results": [{"title": ..., "url": ...}, ...]}``; the top-ranked result's
  page is fetched (JSON ``{"title","text"}`` or plain text).
* ``scrape`` fetches a search page, follows the first anchor href and strips
  the target HTML down to text with markdown-style headings.

Every successful fetch lands in an on-disk :class:`~kgdiag.cache.FileCache`
keyed by (kb_id, query); repeated calls are served from cache without network
access. Endpoints can be overridden per KB via the environment variable
``KGDIAG_KB_<KBID>_ENDPOINT`` so tests can point profiles at local servers.
"""

from __future__ import annotations

import datetime as _dt
import json
import os
import re
import threading
from dataclasses import dataclass, field
from html.parser import HTMLParser
from pathlib import Path
from typing import Literal
from urllib.parse import urljoin

import requests

from .cache import FileCache
from .errors import ConfigError, FetchError, NotFoundError
from .ratelimit import TokenBucket, with_retries

AccessMode = Literal["api", "scrape", "local_file"]


@dataclass(frozen=True)
class SectionRule:
    """First matching rule wins; ``action`` is ``"keep"`` or ``"drop"``."""

    pattern: str
    action: str = "keep"

    def __post_init__(self):
        if self.action not in ("keep", "drop"):
            raise ConfigError(f"section rule action must be keep|drop, got {self.action!r}")
        re.compile(self.pattern)


@dataclass(frozen=True)
class KnowledgeBaseProfile:
    kb_id: str
    access_mode: AccessMode
    endpoint: str
    section_rules: tuple[SectionRule, ...] = ()

    def __post_init__(self):
        if self.access_mode not in ("api", "scrape", "local_file"):
            raise ConfigError(f"unknown access mode {self.access_mode!r}")

    def resolved_endpoint(self) -> str:
        env_key = "KGDIAG_KB_%s_ENDPOINT" % re.sub(r"[^A-Za-z0-9]", "_", self.kb_id).upper()
        return os.environ.get(env_key, self.endpoint)


@dataclass
class RawDocument:
    kb_id: str
    query: str
    title: str
    body: str
    fetched_at: str
    source_url: str


class KnowledgeBaseRegistry:
    """Holds profiles; kb_id is unique within one registry."""

    def __init__(self):
        self._profiles: dict[str, KnowledgeBaseProfile] = {}

    def register(self, profile: KnowledgeBaseProfile) -> None:
        if profile.kb_id in self._profiles:
            raise ConfigError(f"duplicate kb_id {profile.kb_id!r}")
        self._profiles[profile.kb_id] = profile

    def get(self, kb_id: str) -> KnowledgeBaseProfile:
        try:
            return self._profiles[kb_id]
        except KeyError:
            raise ConfigError(f"kb_id {kb_id!r} not registered") from None

    def __iter__(self):
        return iter(self._profiles.values())


def slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.casefold()).strip("-")
    return slug or "empty"


class _TextExtractor(HTMLParser):
    """Strips HTML to plain text, turning <h1>..<h6> into markdown headings."""

    _SKIP = {"script", "style"}
    _BLOCK = {"p", "div", "li", "ul", "ol", "table", "tr", "section", "article", "br"}

    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._suppress = 0
        self._heading: int | None = None

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._suppress += 1
        elif re.fullmatch(r"h[1-6]", tag):
            self._heading = int(tag[1])
            self.parts.append("\n" + "#" * self._heading + " ")
        elif tag in self._BLOCK:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._suppress:
            self._suppress -= 1
        elif re.fullmatch(r"h[1-6]", tag):
            self._heading = None
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._suppress:
            self.parts.append(data)

    def text(self) -> str:
        lines = [re.sub(r"[ \t]+", " ", ln).strip() for ln in "".join(self.parts).splitlines()]
        return "\n".join(ln for ln in lines if ln)


def html_to_text(html: str) -> str:
    parser = _TextExtractor()
    parser.feed(html)
    return parser.text()


_FIRST_HREF = re.compile(r"""<a\s[^>]*href=["']([^"'#][^"']*)["']""", re.IGNORECASE)


class DocumentFetcher:
    """Fetches documents through the cache with per-KB rate limiting."""

    def __init__(
        self,
        cache: FileCache,
        rate_per_sec: float = 1.0,
        retries: int = 3,
        timeout: float = 15.0,
        session: requests.Session | None = None,
    ):
        self.cache = cache
        self.rate_per_sec = rate_per_sec
        self.retries = retries
        self.timeout = timeout
        self.session = session or requests.Session()
        self._limiters: dict[str, TokenBucket] = {}
        self._limiter_guard = threading.Lock()

    def _limiter(self, kb_id: str) -> TokenBucket:
        with self._limiter_guard:
            if kb_id not in self._limiters:
                self._limiters[kb_id] = TokenBucket(self.rate_per_sec, capacity=1.0)
            return self._limiters[kb_id]

    def fetch_document(self, profile: KnowledgeBaseProfile, query: str) -> RawDocument:
        """Return the top search result's page for ``query``, cache-first."""
        if not query.strip():
            raise ConfigError("query must be non-empty")
        cached = self.cache.get(profile.kb_id, query)
        if cached is not None:
            meta = cached.metadata
            return RawDocument(
                kb_id=profile.kb_id,
                query=query,
                title=meta.get("title", ""),
                body=cached.body,
                fetched_at=meta.get("fetched_at", ""),
                source_url=meta.get("url", ""),
            )
        if profile.access_mode == "local_file":
            doc = self._fetch_local(profile, query)
        elif profile.access_mode == "api":
            doc = self._fetch_api(profile, query)
        else:
            doc = self._fetch_scrape(profile, query)
        self.cache.put(
            profile.kb_id,
            query,
            {
                "kb_id": profile.kb_id,
                "query": query,
                "url": doc.source_url,
                "title": doc.title,
                "fetched_at": doc.fetched_at,
            },
            doc.body,
        )
        return doc

    def _fetch_local(self, profile: KnowledgeBaseProfile, query: str) -> RawDocument:
        root = Path(profile.resolved_endpoint())
        path = root / (slugify(query) + ".txt")
        if not path.exists():
            raise NotFoundError(f"no fixture page for {query!r} in {root}")
        body = path.read_text(encoding="utf-8")
        return RawDocument(
            kb_id=profile.kb_id,
            query=query,
            title=query,
            body=body,
            fetched_at=_now(),
            source_url=str(path),
        )

    def _get(self, kb_id: str, url: str, params=None) -> requests.Response:
        def attempt() -> requests.Response:
            self._limiter(kb_id).acquire()
            resp = self.session.get(url, params=params, timeout=self.timeout)
            resp.raise_for_status()
            return resp

        try:
            return with_retries(attempt, attempts=self.retries)
        except Exception as exc:
            raise FetchError(f"GET {url} failed after {self.retries} attempts: {exc}") from exc

    def _fetch_api(self, profile: KnowledgeBaseProfile, query: str) -> RawDocument:
        endpoint = profile.resolved_endpoint()
        search = self._get(profile.kb_id, endpoint, params={"q": query})
        try:
            results = search.json().get("results", [])
        except ValueError as exc:
            raise FetchError(f"search response from {endpoint} is not JSON") from exc
        if not results:
            raise NotFoundError(f"no search results for {query!r} on {profile.kb_id}")
        top = results[0]
        url = urljoin(endpoint, top["url"])
        page = self._get(profile.kb_id, url)
        title = top.get("title", query)
        if "json" in page.headers.get("Content-Type", ""):
            payload = page.json()
            body = payload.get("text", "")
            title = payload.get("title", title)
        else:
            body = page.text
        if not body:
            raise NotFoundError(f"empty page body for {query!r} on {profile.kb_id}")
        return RawDocument(profile.kb_id, query, title, body, _now(), url)

    def _fetch_scrape(self, profile: KnowledgeBaseProfile, query: str) -> RawDocument:
        endpoint = profile.resolved_endpoint()
        search = self._get(profile.kb_id, endpoint, params={"q": query})
        match = _FIRST_HREF.search(search.text)
        if match is None:
            raise NotFoundError(f"no result links for {query!r} on {profile.kb_id}")
        url = urljoin(search.url, match.group(1))
        page = self._get(profile.kb_id, url)
        body = html_to_text(page.text)
        if not body:
            raise NotFoundError(f"empty page body for {query!r} on {profile.kb_id}")
        title_match = re.search(r"<title[^>]*>(.*?)</title>", page.text, re.IGNORECASE | re.DOTALL)
        title = title_match.group(1).strip() if title_match else query
        return RawDocument(profile.kb_id, query, title, body, _now(), url)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


_HEADING = re.compile(r"^(?:#{1,6}\s+(?P<md>.+?)\s*|={2,}\s*(?P<wiki>.+?)\s*={2,})$")


def split_into_sections(body: str) -> list[tuple[str, str]]:
    """Split ``body`` at markdown/wiki heading lines.

    Returns ``(name, text)`` pairs in document order where ``text`` is the
    exact body slice for that section (heading line included). Text before the
    first heading becomes a section named ``""``.
    """
    lines = body.splitlines(keepends=True)
    sections: list[tuple[str, list[str]]] = [("", [])]
    for line in lines:
        match = _HEADING.match(line.rstrip("\n"))
        if match:
            name = match.group("md") or match.group("wiki")
            sections.append((name, [line]))
        else:
            sections[-1][1].append(line)
    return [(name, "".join(chunk)) for name, chunk in sections if name or chunk]


def select_sections(doc: RawDocument, profile: KnowledgeBaseProfile) -> str:
    """Concatenate the sections kept by the profile's rules, in order.

    With empty rules the body passes through unchanged. Otherwise each
    section's name is matched against the ordered rules (case-insensitive
    regex search, first match wins); only sections matching a ``keep`` rule
    survive. No rule matching anything yields ``""``.
    """
    if not profile.section_rules:
        return doc.body
    kept: list[str] = []
    for name, text in split_into_sections(doc.body):
        for rule in profile.section_rules:
            if re.search(rule.pattern, name, re.IGNORECASE):
                if rule.action == "keep":
                    kept.append(text)
                break
    return "".join(kept)
