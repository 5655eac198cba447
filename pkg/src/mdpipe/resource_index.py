"""Resource-centric search index.

Metadata-centric indexing produces one document per metadata record, so a
resource described by several collections appears several times in results.
The resource-centric build collapses records into resource entities in two
phases: first by normalized-URL identity (union-find), then by fetched
content hash, so mirrors and alias URLs of the same resource merge too.
A naive one-document-per-identifier mode is kept for diagnostics: it bounds
the entity count from above and demonstrates the collapse.
"""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .errors import FetchError, UnparseableUrl
from .repository import ServingSnapshot, StoredRecord

logger = logging.getLogger(__name__)

_DEFAULT_PORTS = {"http": "80", "https": "443", "ftp": "21"}
_UNRESERVED = set(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-._~")
_SCHEME_RE = re.compile(r"^([A-Za-z][A-Za-z0-9+.-]*)://(.*)$", re.DOTALL)
_TOKEN_RE = re.compile(r"[a-z0-9]+")


# ---------------------------------------------------------------------------
# URL normalization


def _normalize_percent(text: str) -> str:
    """Uppercase %XX hex and decode escapes of unreserved characters."""
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if (ch == "%" and len(text) >= i + 3
                and all(c in "0123456789abcdefABCDEF"
                        for c in text[i + 1:i + 3])):
            code = int(text[i + 1:i + 3], 16)
            decoded = chr(code)
            if decoded in _UNRESERVED:
                out.append(decoded)
            else:
                out.append("%" + text[i + 1:i + 3].upper())
            i += 3
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _remove_dot_segments(path: str) -> str:
    output: list[str] = []
    for segment in path.split("/"):
        if segment == ".":
            continue
        if segment == "..":
            if output and output[-1]:
                output.pop()
            continue
        output.append(segment)
    # re-anchor and preserve a trailing slash implied by . or ..
    result = "/".join(output)
    if not result.startswith("/"):
        result = "/" + result
    if path.rstrip("/").endswith((".", "..")) and not result.endswith("/"):
        result += "/"
    return result


def normalize_url(url: str) -> str:
    """Canonical form under which two spellings of the same location
    compare equal. Fragments are dropped (they address a view, not a
    resource); queries are preserved verbatim apart from escaping."""
    url = url.strip()
    match = _SCHEME_RE.match(url)
    if not match:
        raise UnparseableUrl(url)
    scheme = match.group(1).lower()
    rest = match.group(2)
    if not rest:
        raise UnparseableUrl(url)

    rest = rest.split("#", 1)[0]          # fragment never distinguishes
    for sep in ("/", "?"):
        idx = rest.find(sep)
        if idx != -1:
            authority, tail = rest[:idx], rest[idx:]
            break
    else:
        authority, tail = rest, ""
    if not authority:
        raise UnparseableUrl(url)

    userinfo = ""
    if "@" in authority:
        userinfo, authority = authority.rsplit("@", 1)
        userinfo += "@"
    host, _, port = authority.partition(":")
    host = host.lower()
    if not host:
        raise UnparseableUrl(url)
    if port and port == _DEFAULT_PORTS.get(scheme):
        port = ""
    authority = f"{userinfo}{host}" + (f":{port}" if port else "")

    if tail.startswith("?") or not tail:
        path, query = "/", tail
    else:
        qidx = tail.find("?")
        if qidx == -1:
            path, query = tail, ""
        else:
            path, query = tail[:qidx], tail[qidx:]
    path = _remove_dot_segments(_normalize_percent(path))
    query = _normalize_percent(query)
    return f"{scheme}://{authority}{path}{query}"


# ---------------------------------------------------------------------------
# Index documents


@dataclass(frozen=True)
class IndexSource:
    """One indexable metadata record: its identity, the resource URLs it
    claims, and its searchable text."""

    record_id: str
    urls: tuple[str, ...]
    text: str
    collection_id: str = ""


@dataclass(frozen=True)
class IndexDocument:
    doc_id: str
    member_records: tuple[str, ...]
    urls: tuple[str, ...]
    text: str

    def tokens(self) -> Counter:
        return Counter(_TOKEN_RE.findall(self.text.lower()))


@dataclass(frozen=True)
class SearchIndex:
    mode: str                       # metadata | resource | identifier
    documents: tuple[IndexDocument, ...]

    def search(self, query: str, limit: int = 10) -> list[tuple[str, float]]:
        """Conjunctive term match, term-frequency scoring, doc_id
        tie-break for stable ordering."""
        terms = _TOKEN_RE.findall(query.lower())
        if not terms:
            return []
        hits = []
        for doc in self.documents:
            counts = doc.tokens()
            if all(counts.get(t, 0) > 0 for t in terms):
                score = float(sum(counts[t] for t in terms))
                hits.append((doc.doc_id, score))
        hits.sort(key=lambda h: (-h[1], h[0]))
        return hits[:limit]


def sources_from_snapshot(snapshot: ServingSnapshot) -> list[IndexSource]:
    sources = []
    for rec in snapshot.records:
        if rec.deleted or rec.is_collection:
            continue
        urls = []
        texts = []
        for row in rec.normalized_rows:
            if row.name == "identifier" and "://" in row.value:
                urls.append(row.value)
            else:
                texts.append(row.value)
        sources.append(IndexSource(
            record_id=rec.repo_identifier,
            urls=tuple(urls),
            text=" ".join(texts),
            collection_id=rec.collection_id))
    return sources


def _safe_normalize(url: str) -> str | None:
    try:
        return normalize_url(url)
    except UnparseableUrl:
        logger.debug("skipping unparseable url %r", url)
        return None


# ---------------------------------------------------------------------------
# Builds


def build_metadata_centric(sources: Iterable[IndexSource],
                           previous: SearchIndex | None = None) -> SearchIndex:
    """One document per metadata record. With a previous index, unchanged
    records reuse their existing document objects (incremental refresh)."""
    old = {}
    if previous is not None and previous.mode == "metadata":
        old = {d.doc_id: d for d in previous.documents}
    docs = []
    for src in sorted(sources, key=lambda s: s.record_id):
        urls = tuple(u for u in (_safe_normalize(v) for v in src.urls) if u)
        candidate = IndexDocument(doc_id=src.record_id,
                                  member_records=(src.record_id,),
                                  urls=urls, text=src.text)
        existing = old.get(src.record_id)
        docs.append(existing if existing == candidate else candidate)
    return SearchIndex(mode="metadata", documents=tuple(docs))


def naive_identifier_index(sources: Iterable[IndexSource]) -> SearchIndex:
    """Diagnostic mode: one document per identifier occurrence. Shows the
    duplication ceiling the resource-centric build collapses."""
    docs = []
    for src in sorted(sources, key=lambda s: s.record_id):
        for n, raw in enumerate(src.urls):
            docs.append(IndexDocument(
                doc_id=f"{src.record_id}#{n}",
                member_records=(src.record_id,),
                urls=(raw,), text=src.text))
    return SearchIndex(mode="identifier", documents=tuple(docs))


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:      # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller key becomes the root
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def build_resource_centric(
        sources: Iterable[IndexSource],
        content_hash: Callable[[str], str | None] | None = None
) -> SearchIndex:
    """Phase one merges records sharing a normalized URL; phase two merges
    entities whose fetched content hashes agree (mirrors and aliases)."""
    sources = sorted(sources, key=lambda s: s.record_id)
    uf = _UnionFind()
    record_urls: dict[str, list[str]] = {}
    for src in sources:
        uf.find(src.record_id)
        norm = [u for u in (_safe_normalize(v) for v in src.urls) if u]
        record_urls[src.record_id] = norm
        for url in norm:
            uf.union(src.record_id, "url:" + url)

    if content_hash is not None:
        by_hash: dict[str, str] = {}
        for src in sources:
            for url in record_urls[src.record_id]:
                digest = content_hash(url)
                if digest is None:
                    continue
                if digest in by_hash:
                    uf.union(by_hash[digest], "url:" + url)
                else:
                    by_hash[digest] = "url:" + url

    groups: dict[str, list[IndexSource]] = {}
    for src in sources:
        groups.setdefault(uf.find(src.record_id), []).append(src)

    docs = []
    for members in groups.values():
        members.sort(key=lambda s: s.record_id)
        urls = sorted({u for m in members for u in record_urls[m.record_id]})
        docs.append(IndexDocument(
            doc_id=members[0].record_id,
            member_records=tuple(m.record_id for m in members),
            urls=tuple(urls),
            text=" ".join(m.text for m in members)))
    docs.sort(key=lambda d: d.doc_id)
    return SearchIndex(mode="resource", documents=tuple(docs))


# ---------------------------------------------------------------------------
# Content fetching


def fetch_content(url: str, fetcher: Callable[[str], bytes],
                  max_bytes: int = 1 << 20) -> str:
    """Fetch a resource and return its MD5 content hash (hex)."""
    try:
        body = fetcher(url)
    except FetchError:
        raise
    except Exception as exc:
        raise FetchError("connection", str(exc)) from exc
    if len(body) > max_bytes:
        raise FetchError("too-large", f"{len(body)} bytes")
    return hashlib.md5(body).hexdigest()


def content_hasher(fetcher: Callable[[str], bytes],
                   max_bytes: int = 1 << 20) -> Callable[[str], str | None]:
    """Wrap a fetcher into the optional hash callback used by the
    resource-centric build; fetch failures simply skip the merge."""
    cache: dict[str, str | None] = {}

    def hash_url(url: str) -> str | None:
        if url not in cache:
            try:
                cache[url] = fetch_content(url, fetcher, max_bytes)
            except FetchError as exc:
                logger.debug("content fetch failed for %s: %s", url, exc)
                cache[url] = None
        return cache[url]

    return hash_url


# ---------------------------------------------------------------------------
# Reporting


def dedup_report(sources: Iterable[IndexSource],
                 content_hash: Callable[[str], str | None] | None = None
                 ) -> dict:
    sources = list(sources)
    identifier_count = sum(len(s.urls) for s in sources)
    resource = build_resource_centric(sources, content_hash)
    return {
        "identifier_occurrences": identifier_count,
        "metadata_records": len(sources),
        "resource_entities": len(resource.documents),
        "largest_entity": max(
            (len(d.member_records) for d in resource.documents), default=0),
    }
