"""Domain types and pure parse/serialize helpers for the harvesting protocol.

Everything here is immutable after construction and safe to share across
threads. Parsing is strict: invalid UTF-8 and schema-violating responses are
rejected with byte-level diagnostics rather than repaired.
"""

from __future__ import annotations

import calendar
import xml.etree.ElementTree as ET
import xml.parsers.expat
from dataclasses import dataclass, field
from datetime import datetime, timezone
from urllib.parse import urlsplit
from xml.sax.saxutils import escape, quoteattr

from .errors import (
    BadRecordDatestamp,
    ExcessPrecision,
    MalformedDatestamp,
    NonUtc,
    OaiProtocolError,
    PROTOCOL_ERROR_CODES,
    SchemaViolation,
    WellFormednessError,
)

OAI_NS = "http://www.openarchives.org/OAI/2.0/"
OAI_DC_NS = "http://www.openarchives.org/OAI/2.0/oai_dc/"
DC_NS = "http://purl.org/dc/elements/1.1/"
QDC_NS = "urn:x-mdpipe:qdc"
XML_NS = "http://www.w3.org/XML/1998/namespace"

DC_ELEMENTS = frozenset({
    "title", "creator", "subject", "description", "publisher", "contributor",
    "date", "type", "format", "identifier", "source", "language", "relation",
    "coverage", "rights",
})

#: format prefixes whose payloads are parsed into DcElement lists
DC_PROFILE_PREFIXES = frozenset({"oai_dc", "nsdl_dc"})


# ---------------------------------------------------------------------------
# Datestamps

_DATESTAMP_PATTERN = "NNNN-NN-NNTNN:NN:NNZ"


def parse_datestamp(text: str) -> datetime:
    """Parse a second-granularity Zulu datestamp, rejecting anything else.

    Raises MalformedDatestamp / NonUtc / ExcessPrecision; the exception's
    ``position`` attribute is the first offending character index.
    """
    for i, expected in enumerate(_DATESTAMP_PATTERN):
        if i >= len(text):
            if i == 19:
                raise NonUtc("missing Z timezone designator", i)
            raise MalformedDatestamp("datestamp truncated", i)
        ch = text[i]
        if expected == "N":
            if not ch.isascii() or not ch.isdigit():
                raise MalformedDatestamp(f"expected digit, got {ch!r}", i)
        elif i == 19:
            if ch == ".":
                raise ExcessPrecision("fractional seconds not allowed", i)
            if ch != "Z":
                raise NonUtc(f"expected Z, got {ch!r}", i)
        elif ch != expected:
            raise MalformedDatestamp(f"expected {expected!r}, got {ch!r}", i)
    if len(text) > 20:
        raise MalformedDatestamp("trailing characters after Z", 20)

    year = int(text[0:4])
    month = int(text[5:7])
    day = int(text[8:10])
    hour = int(text[11:13])
    minute = int(text[14:16])
    second = int(text[17:19])
    if not 1 <= month <= 12:
        raise MalformedDatestamp(f"month {month} out of range", 5)
    if not 1 <= day <= calendar.monthrange(year, month)[1]:
        raise MalformedDatestamp(f"day {day} out of range", 8)
    if hour > 23:
        raise MalformedDatestamp(f"hour {hour} out of range", 11)
    if minute > 59:
        raise MalformedDatestamp(f"minute {minute} out of range", 14)
    if second > 59:
        raise MalformedDatestamp(f"second {second} out of range", 17)
    return datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)


def format_datestamp(instant: datetime) -> str:
    if instant.tzinfo is None:
        raise ValueError("naive datetime cannot be formatted as a datestamp")
    return instant.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def is_day_granularity(text: str) -> bool:
    """True for YYYY-MM-DD datestamps (legal on the wire, warned against here)."""
    if len(text) != 10:
        return False
    try:
        datetime.strptime(text, "%Y-%m-%d")
    except ValueError:
        return False
    return True


def is_absolute_uri(value: str) -> bool:
    """Syntactic absolute-URI check: a scheme and at least one more character."""
    try:
        parts = urlsplit(value)
    except ValueError:
        return False
    if not parts.scheme or not parts.scheme[0].isalpha():
        return False
    return bool(parts.netloc or parts.path or parts.query)


# ---------------------------------------------------------------------------
# Types

@dataclass(frozen=True)
class RecordHeader:
    identifier: str
    datestamp: datetime
    set_specs: tuple[str, ...] = ()
    deleted: bool = False

    def __post_init__(self):
        if not self.identifier:
            raise ValueError("record identifier must be non-empty")
        if self.datestamp.tzinfo is None:
            raise ValueError("datestamp must be timezone-aware UTC")


@dataclass(frozen=True)
class DcElement:
    name: str
    value: str
    qualifier: str | None = None
    scheme: str | None = None
    language: str | None = None

    def __post_init__(self):
        if self.name not in DC_ELEMENTS:
            raise ValueError(f"{self.name!r} is not a Dublin Core element")


@dataclass(frozen=True)
class MetadataRecord:
    header: RecordHeader
    format_prefix: str
    elements: tuple[DcElement, ...] = ()
    raw_xml: bytes = b""

    def __post_init__(self):
        if self.header.deleted and (self.elements or self.raw_xml):
            raise ValueError("deleted record must carry no metadata payload")


@dataclass(frozen=True)
class ResumptionToken:
    token: str
    complete_list_size: int | None = None
    cursor: int | None = None
    expiration: datetime | None = None

    @property
    def is_final(self) -> bool:
        return self.token == ""


@dataclass(frozen=True)
class ListResponse:
    records: tuple[MetadataRecord, ...]
    token: ResumptionToken | None
    response_date: datetime | None


@dataclass(frozen=True)
class IdentifyInfo:
    repository_name: str
    base_url: str
    protocol_version: str
    earliest_datestamp: str
    deleted_policy: str
    granularity: str
    admin_emails: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# UTF-8 strictness

def validate_utf8(data: bytes) -> None:
    """Reject any byte sequence a strict UTF-8 decoder rejects."""
    try:
        data.decode("utf-8", errors="strict")
    except UnicodeDecodeError as exc:
        raise WellFormednessError(
            f"invalid UTF-8: {exc.reason}", byte_offset=exc.start
        ) from exc


def _end_of_tag(data: bytes, start: int) -> int:
    """Index one past the '>' closing the tag that opens at ``start``.

    Walks quoted attribute values so a '>' inside them is not mistaken for
    the tag terminator.
    """
    quote = None
    for i in range(start, len(data)):
        b = data[i:i + 1]
        if quote is not None:
            if b == quote:
                quote = None
        elif b in (b'"', b"'"):
            quote = b
        elif b == b">":
            return i + 1
    raise WellFormednessError("unterminated tag", byte_offset=start)


# ---------------------------------------------------------------------------
# Response parsing (expat, single pass, byte-exact payload slices)

class _Record:
    __slots__ = ("identifier", "datestamp", "set_specs", "deleted",
                 "payload_start", "payload_end")

    def __init__(self):
        self.identifier = None
        self.datestamp = None
        self.set_specs = []
        self.deleted = False
        self.payload_start = None
        self.payload_end = None


class _ListParser:
    """Expat-driven parse of an OAI-PMH ListRecords / GetRecord response.

    Tracks byte offsets so each record's metadata payload can be sliced
    byte-identically from the source buffer.
    """

    _SIMPLE_TEXT = {"identifier", "datestamp", "setSpec", "responseDate",
                    "resumptionToken", "error"}

    def __init__(self, data: bytes):
        self.data = data
        self.parser = xml.parsers.expat.ParserCreate("utf-8", " ")
        self.parser.buffer_text = True
        self.parser.StartElementHandler = self._start
        self.parser.EndElementHandler = self._end
        self.parser.CharacterDataHandler = self._chars

        self.records: list[_Record] = []
        self.current: _Record | None = None
        self.text_target: str | None = None
        self.text_parts: list[str] = []
        self.root_name: str | None = None
        self.verb_container: str | None = None
        self.response_date_text: str | None = None
        self.token_text: str | None = None
        self.token_attrs: dict[str, str] = {}
        self.error: tuple[str, str] | None = None
        self.in_metadata = False
        self.payload_depth = 0
        self.depth = 0

    @staticmethod
    def _local(name: str) -> tuple[str, str]:
        if " " in name:
            ns, local = name.rsplit(" ", 1)
            return ns, local
        return "", name

    def _start(self, name, attrs):
        ns, local = self._local(name)
        self.depth += 1
        if self.depth == 1:
            self.root_name = local
            if local not in ("OAI-PMH", "record"):
                raise SchemaViolation(f"unexpected root element {local!r}")
            if local == "record":
                self.current = _Record()
            return
        if self.in_metadata:
            if self.payload_depth == 0:
                self.current.payload_start = self.parser.CurrentByteIndex
            self.payload_depth += 1
            return
        if local == "record":
            self.current = _Record()
        elif local == "header":
            if attrs.get("status") == "deleted":
                if self.current is not None:
                    self.current.deleted = True
        elif local == "metadata":
            if self.current is None:
                raise SchemaViolation("metadata element outside a record")
            self.in_metadata = True
            self.payload_depth = 0
        elif local in ("ListRecords", "GetRecord", "ListIdentifiers"):
            self.verb_container = local
        elif local in self._SIMPLE_TEXT:
            self.text_target = local
            self.text_parts = []
            if local == "resumptionToken":
                self.token_attrs = dict(attrs)
            elif local == "error":
                self.token_attrs = dict(attrs)  # reused for the code attr

    def _end(self, name):
        ns, local = self._local(name)
        if self.in_metadata and (local != "metadata" or self.payload_depth > 0):
            self.payload_depth -= 1
            if self.payload_depth == 0:
                end_tag = self.parser.CurrentByteIndex
                self.current.payload_end = _end_of_tag(self.data, end_tag)
            self.depth -= 1
            return
        if local == "metadata":
            self.in_metadata = False
        elif local == "record":
            self._finish_record()
        elif self.text_target == local:
            text = "".join(self.text_parts)
            if local == "identifier" and self.current is not None:
                self.current.identifier = text
            elif local == "datestamp" and self.current is not None:
                self.current.datestamp = text
            elif local == "setSpec" and self.current is not None:
                self.current.set_specs.append(text)
            elif local == "responseDate":
                self.response_date_text = text
            elif local == "resumptionToken":
                self.token_text = text
            elif local == "error":
                self.error = (self.token_attrs.get("code", ""), text)
            self.text_target = None
        self.depth -= 1
        if self.depth == 0 and self.root_name == "record" and self.current:
            self._finish_record()

    def _finish_record(self):
        if self.current is None:
            return
        self.records.append(self.current)
        self.current = None

    def _chars(self, data):
        if self.text_target is not None and not self.in_metadata:
            self.text_parts.append(data)

    def run(self) -> None:
        try:
            self.parser.Parse(self.data, True)
        except xml.parsers.expat.ExpatError as exc:
            raise WellFormednessError(
                f"XML not well-formed: {exc}",
                byte_offset=getattr(exc, "offset", None),
            ) from exc


def _build_record(raw: bytes, rec: _Record, format_prefix: str,
                  dc_profiles: frozenset[str]) -> MetadataRecord:
    if not rec.identifier:
        raise SchemaViolation("record header missing identifier")
    if rec.datestamp is None:
        raise SchemaViolation("record header missing datestamp")
    try:
        stamp = parse_datestamp(rec.datestamp)
    except ValueError as exc:
        raise BadRecordDatestamp(
            f"record {rec.identifier!r} datestamp {rec.datestamp!r}: {exc}",
            identifier=rec.identifier, datestamp_text=rec.datestamp,
        ) from exc
    header = RecordHeader(
        identifier=rec.identifier,
        datestamp=stamp,
        set_specs=tuple(rec.set_specs),
        deleted=rec.deleted,
    )
    if rec.deleted:
        if rec.payload_start is not None:
            raise SchemaViolation(
                f"deleted record {rec.identifier!r} carries a metadata payload"
            )
        return MetadataRecord(header=header, format_prefix=format_prefix)
    if rec.payload_start is None:
        raise SchemaViolation(f"record {rec.identifier!r} has no metadata payload")
    payload = raw[rec.payload_start:rec.payload_end]
    elements: tuple[DcElement, ...] = ()
    if format_prefix in dc_profiles:
        elements = parse_dc_payload(payload, format_prefix)
    return MetadataRecord(
        header=header, format_prefix=format_prefix,
        elements=elements, raw_xml=payload,
    )


def parse_list_response(
    data: bytes,
    format_prefix: str = "oai_dc",
    dc_profiles: frozenset[str] = DC_PROFILE_PREFIXES,
) -> ListResponse:
    """Parse a ListRecords (or GetRecord) response body.

    Raises WellFormednessError for broken XML / invalid UTF-8,
    OaiProtocolError when the server declared a protocol error, and
    SchemaViolation for structurally invalid responses.
    """
    validate_utf8(data)
    lp = _ListParser(data)
    lp.run()
    if lp.error is not None:
        code, message = lp.error
        if code not in PROTOCOL_ERROR_CODES:
            raise SchemaViolation(f"unknown protocol error code {code!r}")
        raise OaiProtocolError(code, message)
    if lp.root_name == "OAI-PMH" and lp.verb_container is None:
        raise SchemaViolation("response has neither a verb container nor an error")

    response_date = None
    if lp.response_date_text is not None:
        try:
            response_date = parse_datestamp(lp.response_date_text)
        except ValueError as exc:
            raise SchemaViolation(f"bad responseDate: {exc}") from exc

    records = tuple(
        _build_record(data, rec, format_prefix, dc_profiles) for rec in lp.records
    )

    token = None
    if lp.token_text is not None:
        attrs = lp.token_attrs
        size = attrs.get("completeListSize")
        cursor = attrs.get("cursor")
        expiration = None
        if attrs.get("expirationDate"):
            try:
                expiration = parse_datestamp(attrs["expirationDate"])
            except ValueError:
                expiration = None
        token = ResumptionToken(
            token=lp.token_text,
            complete_list_size=int(size) if size is not None else None,
            cursor=int(cursor) if cursor is not None else None,
            expiration=expiration,
        )
    return ListResponse(records=records, token=token, response_date=response_date)


def parse_record(data: bytes, format_prefix: str = "oai_dc",
                 dc_profiles: frozenset[str] = DC_PROFILE_PREFIXES) -> MetadataRecord:
    """Parse a standalone <record> element."""
    validate_utf8(data)
    lp = _ListParser(data)
    lp.run()
    if len(lp.records) != 1:
        raise SchemaViolation(f"expected one record, found {len(lp.records)}")
    return _build_record(data, lp.records[0], format_prefix, dc_profiles)


# ---------------------------------------------------------------------------
# DC payload parse/serialize

def parse_dc_payload(payload: bytes, format_prefix: str) -> tuple[DcElement, ...]:
    """Parse an oai_dc or qualified-DC container into ordered DcElements."""
    try:
        root = ET.fromstring(payload)
    except ET.ParseError as exc:
        raise WellFormednessError(f"metadata payload not well-formed: {exc}") from exc
    if not root.tag.endswith("}dc") and root.tag != "dc":
        raise SchemaViolation(f"unexpected payload root {root.tag!r}")
    elements = []
    for child in root:
        if not isinstance(child.tag, str):
            continue
        local = child.tag.rsplit("}", 1)[-1]
        if local not in DC_ELEMENTS:
            raise SchemaViolation(
                f"{local!r} is not a Dublin Core element (in {format_prefix})"
            )
        elements.append(DcElement(
            name=local,
            value=child.text or "",
            qualifier=child.get("qualifier"),
            scheme=child.get("scheme"),
            language=child.get(f"{{{XML_NS}}}lang"),
        ))
    return tuple(elements)


def serialize_dc_payload(format_prefix: str,
                         elements: tuple[DcElement, ...]) -> bytes:
    """Serialize elements into the container for the given DC profile."""
    if format_prefix == "oai_dc":
        open_tag = (
            f'<oai_dc:dc xmlns:oai_dc={quoteattr(OAI_DC_NS)}'
            f' xmlns:dc={quoteattr(DC_NS)}>'
        )
        close_tag = "</oai_dc:dc>"
    else:
        open_tag = (
            f'<qdc:dc xmlns:qdc={quoteattr(QDC_NS)}'
            f' xmlns:dc={quoteattr(DC_NS)}>'
        )
        close_tag = "</qdc:dc>"
    parts = [open_tag]
    for el in elements:
        attrs = ""
        if el.qualifier:
            attrs += f" qualifier={quoteattr(el.qualifier)}"
        if el.scheme:
            attrs += f" scheme={quoteattr(el.scheme)}"
        if el.language:
            attrs += f" xml:lang={quoteattr(el.language)}"
        parts.append(f"<dc:{el.name}{attrs}>{escape(el.value)}</dc:{el.name}>")
    parts.append(close_tag)
    return "".join(parts).encode("utf-8")


def serialize_header(header: RecordHeader) -> str:
    status = ' status="deleted"' if header.deleted else ""
    parts = [f"<header{status}>"]
    parts.append(f"<identifier>{escape(header.identifier)}</identifier>")
    parts.append(f"<datestamp>{format_datestamp(header.datestamp)}</datestamp>")
    for spec in header.set_specs:
        parts.append(f"<setSpec>{escape(spec)}</setSpec>")
    parts.append("</header>")
    return "".join(parts)


def serialize_record(record: MetadataRecord, declare_ns: bool = True) -> bytes:
    """Serialize a record as an OAI <record> element.

    DC-profile payloads are re-serialized canonically; other payloads are
    written verbatim from raw_xml.
    """
    ns = f" xmlns={quoteattr(OAI_NS)}" if declare_ns else ""
    parts = [f"<record{ns}>".encode(), serialize_header(record.header).encode()]
    if not record.header.deleted:
        parts.append(b"<metadata>")
        if record.format_prefix in DC_PROFILE_PREFIXES or record.elements:
            parts.append(serialize_dc_payload(record.format_prefix, record.elements))
        else:
            parts.append(record.raw_xml)
        parts.append(b"</metadata>")
    parts.append(b"</record>")
    return b"".join(parts)


def records_equal(a: MetadataRecord, b: MetadataRecord) -> bool:
    """Element-wise equality ignoring raw_xml (serialization canonicalizes)."""
    return (a.header == b.header
            and a.format_prefix == b.format_prefix
            and a.elements == b.elements)


# ---------------------------------------------------------------------------
# Identify

_IDENTIFY_REQUIRED = ("repositoryName", "baseURL", "protocolVersion",
                      "earliestDatestamp", "deletedRecord", "granularity")

GRANULARITY_SECOND = "YYYY-MM-DDThh:mm:ssZ"
GRANULARITY_DAY = "YYYY-MM-DD"


def parse_identify(data: bytes) -> IdentifyInfo:
    """Parse an Identify response; raises SchemaViolation on missing fields."""
    validate_utf8(data)
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise WellFormednessError(f"XML not well-formed: {exc}") from exc
    err = root.find(f"{{{OAI_NS}}}error")
    if err is not None:
        raise OaiProtocolError(err.get("code", ""), err.text or "")
    ident = root.find(f"{{{OAI_NS}}}Identify")
    if ident is None:
        raise SchemaViolation("response has no Identify element")
    fields = {}
    for name in _IDENTIFY_REQUIRED:
        el = ident.find(f"{{{OAI_NS}}}{name}")
        if el is None or not (el.text or "").strip():
            raise SchemaViolation(f"Identify missing required element {name!r}")
        fields[name] = el.text.strip()
    if fields["deletedRecord"] not in ("no", "transient", "persistent"):
        raise SchemaViolation(
            f"invalid deletedRecord policy {fields['deletedRecord']!r}")
    emails = tuple(
        (el.text or "").strip()
        for el in ident.findall(f"{{{OAI_NS}}}adminEmail")
    )
    return IdentifyInfo(
        repository_name=fields["repositoryName"],
        base_url=fields["baseURL"],
        protocol_version=fields["protocolVersion"],
        earliest_datestamp=fields["earliestDatestamp"],
        deleted_policy=fields["deletedRecord"],
        granularity=fields["granularity"],
        admin_emails=emails,
    )
