"""Safe-transform normalization and dbInsert staging.

The transform applies one global rule set to every record; there are no
collection-specific branches. Rules fire in a fixed order and the whole
transform is a fixed point: applying it twice changes nothing.
"""

from __future__ import annotations

import json
import re
import xml.parsers.expat
from dataclasses import dataclass, field
from importlib import resources
from urllib.parse import urlsplit
from xml.sax.saxutils import quoteattr

from . import model
from .errors import IdentifierMismatch, MalformedDocument, WellFormednessError
from .model import DcElement, MetadataRecord, is_absolute_uri

DBINSERT_NS = "urn:x-mdpipe:dbinsert"

RULE_DROP_NO_VALUE = "drop-no-value"
RULE_WHITESPACE = "whitespace"
RULE_DEDUP = "dedup"
RULE_QUALIFY_URI = "qualify-uri"
RULE_QUALIFY_DCMI_TYPE = "qualify-dcmi-type"
RULE_NORMALIZE_LANGUAGE = "normalize-language"
RULE_SCRUB_URI = "scrub-uri"
RULE_DOWNGRADE_URI = "downgrade-uri"


def _load_data(name: str) -> dict:
    with resources.files("mdpipe.data").joinpath(name).open("rb") as f:
        return json.load(f)


@dataclass(frozen=True)
class Profile:
    """A qualified-DC application profile: allowed qualifiers and schemes."""

    schemes: frozenset[str]
    qualifiers: dict[str, tuple[str, ...]]

    @classmethod
    def from_dict(cls, data: dict) -> "Profile":
        return cls(
            schemes=frozenset(data.get("schemes", [])),
            qualifiers={k: tuple(v) for k, v in data.get("qualifiers", {}).items()},
        )

    @classmethod
    def default(cls) -> "Profile":
        return cls.from_dict(_load_data("profile.json"))

    @classmethod
    def load(cls, path: str) -> "Profile":
        with open(path, "rb") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class TransformConfig:
    stop_phrases: frozenset[str]
    dcmi_types: dict[str, str]          # lowercase -> canonical casing
    languages: dict[str, str]           # lowercase -> normalized tag
    profile: Profile

    @classmethod
    def default(cls, stop_phrase_path: str | None = None,
                profile_path: str | None = None) -> "TransformConfig":
        if stop_phrase_path:
            with open(stop_phrase_path, "rb") as f:
                phrases = json.load(f)["phrases"]
        else:
            phrases = _load_data("stop_phrases.json")["phrases"]
        types = _load_data("dcmi_types.json")["types"]
        langs = _load_data("languages.json")["map"]
        profile = (Profile.load(profile_path) if profile_path
                   else Profile.default())
        return cls(
            stop_phrases=frozenset(p.lower() for p in phrases),
            dcmi_types={t.lower(): t for t in types},
            languages=dict(langs),
            profile=profile,
        )


@dataclass(frozen=True)
class NormalizedRecord:
    source_identifier: str
    elements: tuple[DcElement, ...]
    transform_log: tuple[str, ...] = ()


@dataclass(frozen=True)
class DbInsertEntry:
    original: MetadataRecord
    normalized: NormalizedRecord


@dataclass(frozen=True)
class DbInsertDocument:
    entries: tuple[DbInsertEntry, ...]
    collection_id: str
    harvest_attempt_id: str


# ---------------------------------------------------------------------------
# URI scrubbing

_UNSAFE = set(' <>"{}|\\^`')
_HEX = "0123456789abcdefABCDEF"


def scrub_uri(value: str) -> str | None:
    """Repair an http/ftp URL value into syntactically fetchable form.

    Returns None (NotFetchable) for non-http/ftp values and for values with
    irreparable percent escapes.
    """
    v = value.strip()
    lower = v.lower()
    if lower.startswith("http://"):
        scheme = "http"
    elif lower.startswith("ftp://"):
        scheme = "ftp"
    else:
        return None
    rest = v[len(scheme) + 3:]
    out = []
    i = 0
    while i < len(rest):
        c = rest[i]
        if c == "%":
            if len(rest) >= i + 3 and all(h in _HEX for h in rest[i + 1:i + 3]):
                out.append(rest[i:i + 3])
                i += 3
                continue
            return None  # irreparable escape
        if c in _UNSAFE or ord(c) < 0x21 or ord(c) > 0x7E:
            out.append("".join("%%%02X" % b for b in c.encode("utf-8")))
        else:
            out.append(c)
        i += 1
    result = f"{scheme}://{''.join(out)}"
    try:
        parts = urlsplit(result)
    except ValueError:
        return None
    if not parts.netloc:
        return None
    return result


def downgrade_invalid_uri(element: DcElement) -> DcElement:
    """Downgrade an identifier claiming the URI scheme if it cannot be
    scrubbed into a valid URL; otherwise return it with the scrubbed value."""
    if element.scheme != "URI":
        return element
    scrubbed = scrub_uri(element.value)
    if scrubbed is None:
        return DcElement(name=element.name, value=element.value,
                         qualifier=element.qualifier, scheme=None,
                         language=element.language)
    if scrubbed != element.value:
        return DcElement(name=element.name, value=scrubbed,
                         qualifier=element.qualifier, scheme="URI",
                         language=element.language)
    return element


# ---------------------------------------------------------------------------
# Safe transform

_LANG_TAG = re.compile(r"^([a-z]{2,3})(?:[-_]([a-z0-9]{2,8}))?$")


def _normalize_language(value: str, table: dict[str, str]) -> str:
    key = value.strip().lower().replace("_", "-")
    if key in table:
        return table[key]
    if key.replace("-", "_") in table:
        return table[key.replace("-", "_")]
    m = _LANG_TAG.match(key)
    if m:
        primary, region = m.groups()
        primary = table.get(primary, primary)
        if region:
            return f"{primary}-{region.upper()}"
        return primary
    return value


def safe_transform(record: MetadataRecord,
                   config: TransformConfig | None = None) -> NormalizedRecord:
    """Normalize a harvested DC record into the qualified-DC profile.

    Rule order: stop-phrase drop, whitespace collapse, duplicate removal,
    scheme qualification (URI / DCMI type / language), URI scrub and
    downgrade, then a closing duplicate sweep so the transform is
    idempotent even when scrubbing makes two values collide.
    """
    if config is None:
        config = TransformConfig.default()
    log: list[str] = []

    def fire(rule: str):
        if rule not in log:
            log.append(rule)

    # The rule pipeline runs to a fixed point: a downgrade in rule (5) can
    # expose an element to re-qualification in rule (4) on the next pass.
    elements = list(record.elements)
    for _ in range(5):
        before = tuple(elements)
        elements = _one_pass(elements, config, fire)
        if tuple(elements) == before:
            break

    return NormalizedRecord(
        source_identifier=record.header.identifier,
        elements=tuple(elements),
        transform_log=tuple(log),
    )


def _one_pass(input_elements, config, fire):
    # (1) drop no-information-value elements
    elements = []
    for el in input_elements:
        if el.value.strip().lower() in config.stop_phrases:
            fire(RULE_DROP_NO_VALUE)
        else:
            elements.append(el)

    # (2) trim and collapse whitespace
    collapsed = []
    for el in elements:
        value = " ".join(el.value.split())
        if value != el.value:
            fire(RULE_WHITESPACE)
            el = DcElement(name=el.name, value=value, qualifier=el.qualifier,
                           scheme=el.scheme, language=el.language)
        collapsed.append(el)
    elements = collapsed

    # (3) drop exact duplicates, first occurrence wins
    seen = set()
    deduped = []
    for el in elements:
        if el in seen:
            fire(RULE_DEDUP)
            continue
        seen.add(el)
        deduped.append(el)
    elements = deduped

    # (4) qualify recognizable encoding schemes
    qualified = []
    for el in elements:
        if el.name == "identifier" and el.scheme is None:
            scrubbed = scrub_uri(el.value)
            if scrubbed is not None:
                fire(RULE_QUALIFY_URI)
                el = DcElement(name="identifier", value=scrubbed,
                               qualifier=el.qualifier, scheme="URI",
                               language=el.language)
        elif el.name == "type" and el.scheme is None:
            canonical = config.dcmi_types.get(el.value.lower())
            if canonical is not None:
                fire(RULE_QUALIFY_DCMI_TYPE)
                el = DcElement(name="type", value=canonical,
                               qualifier=el.qualifier, scheme="DCMIType",
                               language=el.language)
        elif el.name == "language":
            normalized = _normalize_language(el.value, config.languages)
            if normalized != el.value:
                fire(RULE_NORMALIZE_LANGUAGE)
                el = DcElement(name="language", value=normalized,
                               qualifier=el.qualifier, scheme=el.scheme,
                               language=el.language)
        qualified.append(el)
    elements = qualified

    # (5) scrub declared URIs; downgrade the irreparable ones
    scrubbed_els = []
    for el in elements:
        if el.scheme == "URI":
            repaired = downgrade_invalid_uri(el)
            if repaired.scheme is None:
                fire(RULE_DOWNGRADE_URI)
            elif repaired.value != el.value:
                fire(RULE_SCRUB_URI)
            el = repaired
        scrubbed_els.append(el)
    elements = scrubbed_els

    # closing duplicate sweep (scrubbing may have made values collide)
    seen = set()
    final = []
    for el in elements:
        if el in seen:
            fire(RULE_DEDUP)
            continue
        seen.add(el)
        final.append(el)
    return final


# ---------------------------------------------------------------------------
# Profile validation

@dataclass(frozen=True)
class Violation:
    element_index: int          # -1 for record-level findings
    rule: str
    message: str


def validate_normalized(record: NormalizedRecord,
                        profile: Profile | None = None) -> list[Violation]:
    """Check a normalized record against the qualified-DC profile.

    An empty list means clean. A record must keep at least one identifier
    or title to stay indexable.
    """
    if profile is None:
        profile = Profile.default()
    violations: list[Violation] = []
    for i, el in enumerate(record.elements):
        if el.name not in model.DC_ELEMENTS:
            violations.append(Violation(i, "element-name",
                                        f"{el.name!r} not in the DC element set"))
            continue
        if el.qualifier is not None:
            allowed = profile.qualifiers.get(el.name, ())
            if el.qualifier not in allowed:
                violations.append(Violation(
                    i, "qualifier",
                    f"qualifier {el.qualifier!r} not allowed on {el.name}"))
        if el.scheme is not None and el.scheme not in profile.schemes:
            violations.append(Violation(
                i, "scheme", f"unknown encoding scheme {el.scheme!r}"))
        if el.scheme == "URI" and not is_absolute_uri(el.value):
            violations.append(Violation(
                i, "uri-value", f"not an absolute URI: {el.value!r}"))
    if not any(el.name in ("identifier", "title") for el in record.elements):
        violations.append(Violation(
            -1, "min-content", "record retains neither an identifier nor a title"))
    return violations


# ---------------------------------------------------------------------------
# dbInsert document

def build_db_insert(pairs: list[tuple[MetadataRecord, NormalizedRecord]],
                    collection_id: str,
                    attempt_id: str) -> DbInsertDocument:
    if not pairs:
        raise MalformedDocument("dbInsert document needs at least one entry")
    entries = []
    for original, normalized in pairs:
        if original.header.identifier != normalized.source_identifier:
            raise IdentifierMismatch(
                f"{original.header.identifier!r} != "
                f"{normalized.source_identifier!r}")
        entries.append(DbInsertEntry(original=original, normalized=normalized))
    return DbInsertDocument(entries=tuple(entries),
                            collection_id=collection_id,
                            harvest_attempt_id=attempt_id)


def _serialize_original(record: MetadataRecord) -> bytes:
    """Original records keep their harvested payload bytes verbatim."""
    parts = [b"<record>", model.serialize_header(record.header).encode()]
    if not record.header.deleted:
        parts.append(b"<metadata>")
        parts.append(record.raw_xml)
        parts.append(b"</metadata>")
    parts.append(b"</record>")
    return b"".join(parts)


def serialize_db_insert(doc: DbInsertDocument) -> bytes:
    parts = [
        (f'<dbInsert xmlns={quoteattr(DBINSERT_NS)} version="1"'
         f" collection={quoteattr(doc.collection_id)}"
         f" attempt={quoteattr(doc.harvest_attempt_id)}>").encode()
    ]
    for entry in doc.entries:
        parts.append(
            f"<entry><original format={quoteattr(entry.original.format_prefix)}>"
            .encode())
        parts.append(_serialize_original(entry.original))
        parts.append(b"</original>")
        log = ",".join(entry.normalized.transform_log)
        parts.append(f"<normalized log={quoteattr(log)}>".encode())
        parts.append(model.serialize_dc_payload("nsdl_dc",
                                                entry.normalized.elements))
        parts.append(b"</normalized></entry>")
    parts.append(b"</dbInsert>")
    return b"".join(parts)


class _DbInsertParser:
    """Single-pass expat parse capturing byte ranges of each entry's
    original <record> and normalized payload container."""

    def __init__(self, data: bytes):
        self.data = data
        self.parser = xml.parsers.expat.ParserCreate("utf-8", " ")
        self.parser.buffer_text = True
        self.parser.StartElementHandler = self._start
        self.parser.EndElementHandler = self._end
        self.root_attrs: dict[str, str] = {}
        self.entries: list[dict] = []
        self.current: dict | None = None
        self.capture: str | None = None   # "original" | "normalized"
        self.capture_depth = 0
        self.depth = 0

    @staticmethod
    def _local(name: str) -> str:
        return name.rsplit(" ", 1)[-1]

    def _start(self, name, attrs):
        local = self._local(name)
        self.depth += 1
        if self.capture is not None:
            if self.capture_depth == 0:
                self.current[f"{self.capture}_start"] = \
                    self.parser.CurrentByteIndex
            self.capture_depth += 1
            return
        if self.depth == 1:
            if local != "dbInsert":
                raise MalformedDocument(f"unexpected root {local!r}")
            self.root_attrs = dict(attrs)
        elif local == "entry":
            self.current = {}
        elif local in ("original", "normalized"):
            if self.current is None:
                raise MalformedDocument(f"{local} outside an entry")
            self.current[f"{local}_attrs"] = dict(attrs)
            self.capture = local
            self.capture_depth = 0

    def _end(self, name):
        local = self._local(name)
        if self.capture is not None:
            if local == self.capture and self.capture_depth == 0:
                self.capture = None
            else:
                self.capture_depth -= 1
                if self.capture_depth == 0:
                    end_tag = self.parser.CurrentByteIndex
                    self.current[f"{self.capture}_end"] = \
                        model._end_of_tag(self.data, end_tag)
            self.depth -= 1
            return
        if local == "entry" and self.current is not None:
            self.entries.append(self.current)
            self.current = None
        self.depth -= 1

    def run(self):
        try:
            self.parser.Parse(self.data, True)
        except xml.parsers.expat.ExpatError as exc:
            raise WellFormednessError(f"dbInsert not well-formed: {exc}") from exc


def parse_db_insert(data: bytes) -> DbInsertDocument:
    model.validate_utf8(data)
    dp = _DbInsertParser(data)
    dp.run()
    collection_id = dp.root_attrs.get("collection")
    attempt_id = dp.root_attrs.get("attempt")
    if not collection_id or not attempt_id:
        raise MalformedDocument("dbInsert missing collection/attempt attributes")
    entries = []
    for e in dp.entries:
        for key in ("original_start", "normalized_start"):
            if key not in e:
                raise MalformedDocument("entry missing original or normalized child")
        fmt = e["original_attrs"].get("format", "oai_dc")
        original = model.parse_record(
            data[e["original_start"]:e["original_end"]], format_prefix=fmt)
        payload = data[e["normalized_start"]:e["normalized_end"]]
        elements = model.parse_dc_payload(payload, "nsdl_dc")
        log = tuple(t for t in e["normalized_attrs"].get("log", "").split(",") if t)
        entries.append(DbInsertEntry(
            original=original,
            normalized=NormalizedRecord(
                source_identifier=original.header.identifier,
                elements=elements,
                transform_log=log),
        ))
    return DbInsertDocument(entries=tuple(entries),
                            collection_id=collection_id,
                            harvest_attempt_id=attempt_id)
