"""Metadata repository: durable original + shredded normalized storage,
derived export formats, postdated served-datestamps, and staging-to-serving
snapshot promotion.

Storage is an in-process ordered map with three logical namespaces
(parsed input, generated exports, serving index) persisted as a JSON state
file in the data directory; no external database is involved. Writes
serialize through one lock; published snapshots are immutable.
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

from . import ingest, model
from .errors import (
    MissingCollectionRecord,
    UnknownCollection,
    UnknownIdentifier,
)
from .ingest import NormalizedRecord, Profile
from .model import DcElement, format_datestamp

LINKS_NS = "urn:x-mdpipe:links"
SEARCH_NS = "urn:x-mdpipe:search"

EXPORT_FORMATS = ("nsdl_dc", "oai_dc", "nsdl_links", "nsdl_search", "nsdl_all")

DEFAULT_POSTDATE_OFFSET = timedelta(hours=3)


@dataclass(frozen=True)
class ElementRow:
    """One shredded element-value row of a normalized record."""

    name: str
    qualifier: str | None
    scheme: str | None
    value: str
    language: str | None
    position: int


def shred(record: NormalizedRecord) -> tuple[ElementRow, ...]:
    return tuple(
        ElementRow(name=el.name, qualifier=el.qualifier, scheme=el.scheme,
                   value=el.value, language=el.language, position=i)
        for i, el in enumerate(record.elements)
    )


def assemble(rows: tuple[ElementRow, ...],
             source_identifier: str) -> NormalizedRecord:
    ordered = sorted(rows, key=lambda r: r.position)
    return NormalizedRecord(
        source_identifier=source_identifier,
        elements=tuple(
            DcElement(name=r.name, value=r.value, qualifier=r.qualifier,
                      scheme=r.scheme, language=r.language)
            for r in ordered),
    )


@dataclass(frozen=True)
class StoredRecord:
    repo_identifier: str
    collection_id: str
    source_identifier: str
    original_raw: bytes
    original_format: str
    provider_datestamp: datetime
    normalized_rows: tuple[ElementRow, ...]
    served_datestamp: datetime
    deleted: bool = False
    native_public: bool = True
    is_collection: bool = False
    schema_warning: bool = False
    exports: dict[str, bytes] | None = None

    @property
    def normalized(self) -> NormalizedRecord:
        return assemble(self.normalized_rows, self.source_identifier)


@dataclass(frozen=True)
class SnapshotManifest:
    record_count: int
    published_at: datetime
    checksum: str


@dataclass(frozen=True)
class ServingSnapshot:
    records: tuple[StoredRecord, ...]
    snapshot_id: str
    manifest: SnapshotManifest

    def by_identifier(self, repo_identifier: str) -> StoredRecord | None:
        return self._index().get(repo_identifier)

    def _index(self):
        idx = getattr(self, "_idx", None)
        if idx is None:
            idx = {r.repo_identifier: r for r in self.records}
            object.__setattr__(self, "_idx", idx)
        return idx

    def set_specs(self) -> tuple[str, ...]:
        return tuple(sorted({r.collection_id for r in self.records}))


# ---------------------------------------------------------------------------
# Export payload generation

def dumb_down(elements: tuple[DcElement, ...]) -> tuple[DcElement, ...]:
    """Erase qualifiers and encoding schemes; values stay byte-identical."""
    return tuple(
        DcElement(name=el.name, value=el.value, language=el.language)
        for el in elements
    )


def build_links(record: StoredRecord,
                collection_repo_id: str | None) -> bytes:
    """Membership payload: exactly one item-to-collection relation.

    Collection-description records emit no relation (no self-membership).
    """
    if record.is_collection:
        return f"<links xmlns={quoteattr(LINKS_NS)}/>".encode()
    if collection_repo_id is None:
        raise MissingCollectionRecord(record.collection_id)
    return (
        f"<links xmlns={quoteattr(LINKS_NS)}>"
        f"<memberOf>{escape(collection_repo_id)}</memberOf></links>"
    ).encode()


def _build_exports(record: StoredRecord,
                   collection_repo_id: str | None) -> dict[str, bytes]:
    normalized = record.normalized
    nsdl_dc = model.serialize_dc_payload("nsdl_dc", normalized.elements)
    oai_dc = model.serialize_dc_payload("oai_dc", dumb_down(normalized.elements))
    links = build_links(record, collection_repo_id)

    def combined(include_native: bool) -> bytes:
        parts = [f"<search xmlns={quoteattr(SEARCH_NS)}>".encode()]
        parts.append(b"<nsdl_dc>" + nsdl_dc + b"</nsdl_dc>")
        parts.append(b"<oai_dc>" + oai_dc + b"</oai_dc>")
        parts.append(b"<links>" + links + b"</links>")
        if include_native and record.original_raw:
            parts.append(
                f"<native format={quoteattr(record.original_format)}>".encode()
                + record.original_raw + b"</native>")
        parts.append(b"</search>")
        return b"".join(parts)

    return {
        "nsdl_dc": nsdl_dc,
        "oai_dc": oai_dc,
        "nsdl_links": links,
        "nsdl_search": combined(include_native=True),
        "nsdl_all": combined(include_native=record.native_public),
    }


# ---------------------------------------------------------------------------
# Repository

class Repository:
    def __init__(self, domain: str = "mdpipe.example.org",
                 postdate_offset: timedelta = DEFAULT_POSTDATE_OFFSET,
                 profile: Profile | None = None):
        self.domain = domain
        self.postdate_offset = postdate_offset
        self.profile = profile or Profile.default()
        self._lock = threading.RLock()
        self._records: dict[str, StoredRecord] = {}
        self._by_source: dict[tuple[str, str], str] = {}
        self._collections: dict[str, str] = {}   # collection_id -> repo_id

    # -- identifiers

    def mint_identifier(self, collection_id: str, source_identifier: str) -> str:
        digest = hashlib.md5(source_identifier.encode("utf-8")).hexdigest()
        return f"oai:{self.domain}:{collection_id}/{digest}"

    def collection_repo_id(self, collection_id: str) -> str | None:
        return self._collections.get(collection_id)

    def has_collection(self, collection_id: str) -> bool:
        return collection_id in self._collections

    # -- writes (single writer: every mutation takes the lock)

    def register_collection_record(self, collection_id: str,
                                   elements: tuple[DcElement, ...],
                                   now: datetime) -> str:
        """Store the collection-description record; it is the target of
        membership links for every item in the collection."""
        with self._lock:
            repo_id = f"oai:{self.domain}:collections/{collection_id}"
            normalized = NormalizedRecord(source_identifier=repo_id,
                                          elements=elements)
            record = StoredRecord(
                repo_identifier=repo_id,
                collection_id=collection_id,
                source_identifier=repo_id,
                original_raw=model.serialize_dc_payload("nsdl_dc", elements),
                original_format="nsdl_dc",
                provider_datestamp=now,
                normalized_rows=shred(normalized),
                served_datestamp=now + self.postdate_offset,
                is_collection=True,
            )
            record = replace(record, exports=_build_exports(record, None))
            self._records[repo_id] = record
            self._by_source[(collection_id, repo_id)] = repo_id
            self._collections[collection_id] = repo_id
            return repo_id

    def insert(self, doc: ingest.DbInsertDocument, now: datetime,
               native_public: bool = True) -> list[str]:
        """Store each entry; re-insert of an existing source record replaces
        content and refreshes the served datestamp."""
        with self._lock:
            if doc.collection_id not in self._collections:
                raise UnknownCollection(doc.collection_id)
            coll_repo_id = self._collections[doc.collection_id]
            minted = []
            for entry in doc.entries:
                source_id = entry.original.header.identifier
                repo_id = self.mint_identifier(doc.collection_id, source_id)
                violations = ingest.validate_normalized(entry.normalized,
                                                        self.profile)
                record = StoredRecord(
                    repo_identifier=repo_id,
                    collection_id=doc.collection_id,
                    source_identifier=source_id,
                    original_raw=entry.original.raw_xml,
                    original_format=entry.original.format_prefix,
                    provider_datestamp=entry.original.header.datestamp,
                    normalized_rows=shred(entry.normalized),
                    served_datestamp=now + self.postdate_offset,
                    native_public=native_public,
                    schema_warning=bool(violations),
                )
                record = replace(record,
                                 exports=_build_exports(record, coll_repo_id))
                self._records[repo_id] = record
                self._by_source[(doc.collection_id, source_id)] = repo_id
                minted.append(repo_id)
            return minted

    def mark_deleted(self, repo_identifier: str, now: datetime) -> None:
        """Tombstone a record: payloads dropped, header retained forever."""
        with self._lock:
            record = self._records.get(repo_identifier)
            if record is None:
                raise UnknownIdentifier(repo_identifier)
            self._records[repo_identifier] = replace(
                record,
                deleted=True,
                served_datestamp=now + self.postdate_offset,
                exports={},
            )

    def delete_by_source(self, collection_id: str, source_identifier: str,
                         now: datetime) -> None:
        repo_id = self._by_source.get((collection_id, source_identifier))
        if repo_id is None:
            raise UnknownIdentifier(f"{collection_id}/{source_identifier}")
        self.mark_deleted(repo_id, now)

    # -- reads

    def get(self, repo_identifier: str) -> StoredRecord | None:
        return self._records.get(repo_identifier)

    def live_source_identifiers(self, collection_id: str) -> set[str]:
        return {
            r.source_identifier for r in self._records.values()
            if r.collection_id == collection_id and not r.deleted
            and not r.is_collection
        }

    def count(self) -> int:
        return len(self._records)

    # -- element queries over the shredded rows

    def fetchable_uri_values(self, record: StoredRecord) -> list[str]:
        return [row.value for row in record.normalized_rows
                if row.name == "identifier" and row.scheme == "URI"]

    def count_records_with_min_uris(self, k: int) -> int:
        return sum(
            1 for r in self._records.values()
            if not r.deleted and not r.is_collection
            and len(self.fetchable_uri_values(r)) >= k)

    def list_uri_identifiers(self) -> list[str]:
        values = []
        for r in sorted(self._records.values(),
                        key=lambda r: r.repo_identifier):
            if not r.deleted and not r.is_collection:
                values.extend(self.fetchable_uri_values(r))
        return values

    # -- publish

    def publish(self, now: datetime) -> ServingSnapshot:
        """Atomically promote staging to an immutable serving snapshot."""
        with self._lock:
            records = tuple(sorted(
                self._records.values(),
                key=lambda r: (r.served_datestamp, r.repo_identifier)))
            hasher = hashlib.sha256()
            for r in records:
                hasher.update(r.repo_identifier.encode())
                hasher.update(format_datestamp(r.served_datestamp).encode())
                hasher.update(b"1" if r.deleted else b"0")
                for fmt in EXPORT_FORMATS:
                    hasher.update((r.exports or {}).get(fmt, b""))
            checksum = hasher.hexdigest()
            return ServingSnapshot(
                records=records,
                snapshot_id=checksum[:16],
                manifest=SnapshotManifest(
                    record_count=len(records),
                    published_at=now,
                    checksum=checksum,
                ),
            )

    # -- persistence

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            state = {
                "version": 1,
                "domain": self.domain,
                "postdate_offset_seconds": int(
                    self.postdate_offset.total_seconds()),
                "collections": dict(self._collections),
                "records": [_record_to_json(r) for r in self._records.values()],
            }
        path.write_text(json.dumps(state))

    @classmethod
    def load(cls, path: str | Path,
             profile: Profile | None = None) -> "Repository":
        state = json.loads(Path(path).read_text())
        repo = cls(domain=state["domain"],
                   postdate_offset=timedelta(
                       seconds=state["postdate_offset_seconds"]),
                   profile=profile)
        repo._collections = dict(state["collections"])
        for rec_json in state["records"]:
            record = _record_from_json(rec_json)
            repo._records[record.repo_identifier] = record
            repo._by_source[(record.collection_id,
                             record.source_identifier)] = record.repo_identifier
        return repo


def _record_to_json(r: StoredRecord) -> dict:
    return {
        "repo_identifier": r.repo_identifier,
        "collection_id": r.collection_id,
        "source_identifier": r.source_identifier,
        "original_raw": base64.b64encode(r.original_raw).decode(),
        "original_format": r.original_format,
        "provider_datestamp": format_datestamp(r.provider_datestamp),
        "rows": [[row.name, row.qualifier, row.scheme, row.value,
                  row.language, row.position] for row in r.normalized_rows],
        "served_datestamp": format_datestamp(r.served_datestamp),
        "deleted": r.deleted,
        "native_public": r.native_public,
        "is_collection": r.is_collection,
        "schema_warning": r.schema_warning,
        "exports": {k: base64.b64encode(v).decode()
                    for k, v in (r.exports or {}).items()},
    }


def _record_from_json(d: dict) -> StoredRecord:
    return StoredRecord(
        repo_identifier=d["repo_identifier"],
        collection_id=d["collection_id"],
        source_identifier=d["source_identifier"],
        original_raw=base64.b64decode(d["original_raw"]),
        original_format=d["original_format"],
        provider_datestamp=model.parse_datestamp(d["provider_datestamp"]),
        normalized_rows=tuple(ElementRow(*row) for row in d["rows"]),
        served_datestamp=model.parse_datestamp(d["served_datestamp"]),
        deleted=d["deleted"],
        native_public=d["native_public"],
        is_collection=d["is_collection"],
        schema_warning=d["schema_warning"],
        exports={k: base64.b64decode(v) for k, v in d["exports"].items()},
    )
