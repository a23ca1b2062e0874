"""PubMed search over the NCBI E-utilities wire protocol.

Three-call flow: esearch for PMIDs, esummary for titles, efetch for
abstracts. The HTTP fetch is injectable so tests replay canned
transcripts; the default fetch rate-limits to the NCBI public ceiling.

Only the agent's keyword query is ever sent upstream; patient narrative
text stays local because the runner passes Action Input verbatim and
nothing else.
"""

from __future__ import annotations

import json
import os
import re
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

EUTILS_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"

PUBMED_UNAVAILABLE = "PubMed search unavailable."
NO_ARTICLES_FOUND = "No relevant articles found."

DEFAULT_MAX_RESULTS = 3
ABSTRACT_SENTENCES = 3

FetchFn = Callable[[str, Mapping[str, str]], bytes]


def _default_fetch(url: str, params: Mapping[str, str]) -> bytes:
    import httpx

    response = httpx.get(url, params=dict(params), timeout=30.0)
    response.raise_for_status()
    return response.content


@dataclass(frozen=True)
class Article:
    pmid: str
    title: str
    abstract: str


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def first_sentences(text: str, n: int = ABSTRACT_SENTENCES) -> str:
    text = " ".join(text.split())
    if not text:
        return ""
    return " ".join(_SENTENCE_SPLIT.split(text)[:n])


class PubMedClient:
    """E-utilities client with an injectable transport.

    rate_per_sec=None disables throttling (tests); the default 3/s is
    the NCBI limit for keyless clients. An API key is read from
    NCBI_API_KEY when not passed explicitly.
    """

    def __init__(
        self,
        fetch: FetchFn | None = None,
        rate_per_sec: float | None = 3.0,
        api_key: str | None = None,
    ):
        self.fetch = fetch or _default_fetch
        self.rate_per_sec = rate_per_sec
        self.api_key = api_key if api_key is not None else os.environ.get("NCBI_API_KEY")
        self._last_call = 0.0

    def _throttle(self) -> None:
        if not self.rate_per_sec:
            return
        interval = 1.0 / self.rate_per_sec
        wait = self._last_call + interval - time.monotonic()
        if wait > 0:
            time.sleep(wait)
        self._last_call = time.monotonic()

    def _get(self, endpoint: str, params: dict[str, str]) -> bytes:
        if self.api_key:
            params = {**params, "api_key": self.api_key}
        self._throttle()
        return self.fetch(f"{EUTILS_BASE}/{endpoint}", params)

    def _esearch(self, query: str, max_results: int) -> list[str]:
        raw = self._get(
            "esearch.fcgi",
            {"db": "pubmed", "term": query, "retmode": "json", "retmax": str(max_results)},
        )
        body = json.loads(raw.decode("utf-8"))
        return [str(pmid) for pmid in body["esearchresult"].get("idlist", [])]

    def _esummary(self, pmids: Sequence[str]) -> dict[str, str]:
        raw = self._get(
            "esummary.fcgi", {"db": "pubmed", "id": ",".join(pmids), "retmode": "json"}
        )
        body = json.loads(raw.decode("utf-8"))
        result = body.get("result", {})
        titles = {}
        for pmid in pmids:
            entry = result.get(pmid)
            if isinstance(entry, dict) and entry.get("title"):
                titles[pmid] = str(entry["title"])
        return titles

    def _efetch(self, pmids: Sequence[str]) -> dict[str, tuple[str, str]]:
        raw = self._get(
            "efetch.fcgi",
            {"db": "pubmed", "id": ",".join(pmids), "retmode": "xml", "rettype": "abstract"},
        )
        root = ET.fromstring(raw.decode("utf-8"))
        out: dict[str, tuple[str, str]] = {}
        for article in root.iter("PubmedArticle"):
            pmid_el = article.find(".//PMID")
            if pmid_el is None or not (pmid_el.text or "").strip():
                continue
            pmid = pmid_el.text.strip()
            title_el = article.find(".//ArticleTitle")
            title = "".join(title_el.itertext()) if title_el is not None else ""
            pieces = []
            for abstract_el in article.findall(".//Abstract/AbstractText"):
                text = "".join(abstract_el.itertext()).strip()
                label = abstract_el.get("Label")
                if label and text:
                    text = f"{label}: {text}"
                if text:
                    pieces.append(text)
            out[pmid] = (title.strip(), " ".join(pieces))
        return out

    def search(self, query: str, max_results: int = DEFAULT_MAX_RESULTS) -> list[Article]:
        if not query.strip():
            raise ValueError("empty query")
        pmids = self._esearch(query, max_results)
        if not pmids:
            return []
        titles = self._esummary(pmids)
        fetched = self._efetch(pmids)
        articles = []
        for pmid in pmids:
            fetch_title, abstract = fetched.get(pmid, ("", ""))
            title = titles.get(pmid) or fetch_title or f"PMID {pmid}"
            articles.append(Article(pmid=pmid, title=title, abstract=abstract))
        return articles


def render_articles(articles: Sequence[Article]) -> str:
    if not articles:
        return NO_ARTICLES_FOUND
    blocks = []
    for i, article in enumerate(articles, 1):
        snippet = first_sentences(article.abstract)
        block = f"{i}. {article.title} (PMID: {article.pmid})"
        if snippet:
            block += f"\n{snippet}"
        blocks.append(block)
    return "\n\n".join(blocks)


def search_pubmed(
    client: PubMedClient,
    query: str,
    max_results: int = DEFAULT_MAX_RESULTS,
    audit: list | None = None,
) -> str:
    """Observation text for a PubMed query; failures degrade to a sentinel."""
    try:
        articles = client.search(query, max_results)
    except Exception as exc:
        if audit is not None:
            audit.append({"event": "pubmed_error", "detail": str(exc)})
        return PUBMED_UNAVAILABLE
    return render_articles(articles)
