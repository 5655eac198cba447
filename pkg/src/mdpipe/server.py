"""OAI-PMH data-provider endpoint over an immutable serving snapshot.

Read-only: the only mutation is swapping in a newly published snapshot.
Resumption tokens are stateless: the query state is signed and encoded in
the token itself, bound to the snapshot it was minted against, so a publish
invalidates outstanding tokens and harvesters restart their lists.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import secrets as _secrets
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable
from urllib.parse import parse_qs, urlsplit
from xml.sax.saxutils import escape, quoteattr

from .errors import OaiProtocolError
from .model import (
    GRANULARITY_SECOND,
    OAI_NS,
    format_datestamp,
    parse_datestamp,
    serialize_header,
)
from .repository import EXPORT_FORMATS, ServingSnapshot, StoredRecord


@dataclass(frozen=True)
class ServerConfig:
    page_size: int = 10
    repository_name: str = "mdpipe aggregator"
    base_url: str = "http://localhost:8080/oai"
    admin_email: str = "admin@example.org"
    token_ttl: timedelta = timedelta(hours=1)

    def __post_init__(self):
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")


_VERB_ARGS = {
    "Identify": set(),
    "ListMetadataFormats": {"identifier"},
    "ListSets": {"resumptionToken"},
    "ListIdentifiers": {"metadataPrefix", "from", "until", "set",
                        "resumptionToken"},
    "ListRecords": {"metadataPrefix", "from", "until", "set",
                    "resumptionToken"},
    "GetRecord": {"identifier", "metadataPrefix"},
}


class OaiServer:
    def __init__(self, config: ServerConfig, snapshot: ServingSnapshot,
                 clock: Callable[[], datetime] | None = None,
                 secret: bytes | None = None):
        self.config = config
        self.snapshot = snapshot
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.secret = secret or _secrets.token_bytes(32)

    def set_snapshot(self, snapshot: ServingSnapshot) -> None:
        self.snapshot = snapshot

    # ------------------------------------------------------------------
    # Tokens

    def mint_token(self, state: dict, position: int) -> str:
        now = self.clock()
        payload = dict(state)
        payload.update({
            "pos": position,
            "snap": self.snapshot.snapshot_id,
            "exp": format_datestamp(now + self.config.token_ttl),
        })
        blob = base64.urlsafe_b64encode(
            json.dumps(payload, sort_keys=True).encode()).decode().rstrip("=")
        sig = hmac.new(self.secret, blob.encode(), hashlib.sha256).hexdigest()[:16]
        return f"{blob}.{sig}"

    def resolve_token(self, token: str) -> dict:
        """Raises OaiProtocolError(badResumptionToken) for garbage, expired,
        or stale-snapshot tokens."""
        try:
            blob, sig = token.rsplit(".", 1)
        except ValueError:
            raise OaiProtocolError("badResumptionToken", "malformed token")
        expected = hmac.new(self.secret, blob.encode(),
                            hashlib.sha256).hexdigest()[:16]
        if not hmac.compare_digest(sig, expected):
            raise OaiProtocolError("badResumptionToken", "bad signature")
        try:
            padded = blob + "=" * (-len(blob) % 4)
            payload = json.loads(base64.urlsafe_b64decode(padded))
        except (ValueError, binascii.Error):
            raise OaiProtocolError("badResumptionToken", "undecodable token")
        if payload.get("snap") != self.snapshot.snapshot_id:
            raise OaiProtocolError("badResumptionToken",
                                   "token from a superseded snapshot")
        try:
            expires = parse_datestamp(payload["exp"])
        except (KeyError, ValueError):
            raise OaiProtocolError("badResumptionToken", "missing expiry")
        if self.clock() > expires:
            raise OaiProtocolError("badResumptionToken", "token expired")
        return payload

    # ------------------------------------------------------------------
    # Request handling

    def handle_request(self, verb: str, args: dict[str, str],
                       now: datetime | None = None) -> bytes:
        if now is None:
            now = self.clock()
        try:
            return self._dispatch(verb, dict(args), now)
        except OaiProtocolError as exc:
            return self._error_response(verb, exc.code, exc.message)

    def _dispatch(self, verb, args, now):
        allowed = _VERB_ARGS.get(verb)
        if allowed is None:
            return self._error_response(None, "badVerb",
                                        f"unknown verb {verb!r}")
        extra = set(args) - allowed
        if extra:
            raise OaiProtocolError(
                "badArgument", f"illegal arguments: {sorted(extra)}")
        if "resumptionToken" in args and len(args) > 1:
            raise OaiProtocolError(
                "badArgument", "resumptionToken must be an exclusive argument")
        if verb == "Identify":
            return self._identify(now)
        if verb == "ListMetadataFormats":
            return self._list_metadata_formats(args, now)
        if verb == "ListSets":
            return self._list_sets(now)
        if verb == "GetRecord":
            return self._get_record(args, now)
        return self._list(verb, args, now)

    # -- envelope helpers

    def _envelope(self, verb: str | None, body: str, now: datetime,
                  request_attrs: dict[str, str] | None = None) -> bytes:
        attrs = ""
        if verb:
            attrs += f" verb={quoteattr(verb)}"
        for k, v in (request_attrs or {}).items():
            attrs += f" {k}={quoteattr(v)}"
        return (
            '<?xml version="1.0" encoding="UTF-8"?>'
            f"<OAI-PMH xmlns={quoteattr(OAI_NS)}>"
            f"<responseDate>{format_datestamp(now)}</responseDate>"
            f"<request{attrs}>{escape(self.config.base_url)}</request>"
            f"{body}</OAI-PMH>"
        ).encode()

    def _error_response(self, verb, code, message) -> bytes:
        body = f"<error code={quoteattr(code)}>{escape(message)}</error>"
        return self._envelope(verb if code != "badVerb" else None, body,
                              self.clock())

    # -- verbs

    def _visible(self, now: datetime) -> list[StoredRecord]:
        return [r for r in self.snapshot.records if r.served_datestamp <= now]

    def _identify(self, now) -> bytes:
        visible = self._visible(now)
        earliest = (format_datestamp(min(r.served_datestamp for r in visible))
                    if visible else "1970-01-01T00:00:00Z")
        body = (
            "<Identify>"
            f"<repositoryName>{escape(self.config.repository_name)}"
            "</repositoryName>"
            f"<baseURL>{escape(self.config.base_url)}</baseURL>"
            "<protocolVersion>2.0</protocolVersion>"
            f"<adminEmail>{escape(self.config.admin_email)}</adminEmail>"
            f"<earliestDatestamp>{earliest}</earliestDatestamp>"
            "<deletedRecord>persistent</deletedRecord>"
            f"<granularity>{GRANULARITY_SECOND}</granularity>"
            "</Identify>")
        return self._envelope("Identify", body, now)

    def _list_metadata_formats(self, args, now) -> bytes:
        if "identifier" in args:
            rec = self.snapshot.by_identifier(args["identifier"])
            if rec is None or rec.served_datestamp > now:
                raise OaiProtocolError("idDoesNotExist", args["identifier"])
        parts = ["<ListMetadataFormats>"]
        for fmt in EXPORT_FORMATS:
            parts.append(
                "<metadataFormat>"
                f"<metadataPrefix>{fmt}</metadataPrefix>"
                f"<schema>urn:x-mdpipe:schema:{fmt}</schema>"
                f"<metadataNamespace>urn:x-mdpipe:{fmt}</metadataNamespace>"
                "</metadataFormat>")
        parts.append("</ListMetadataFormats>")
        return self._envelope("ListMetadataFormats", "".join(parts), now)

    def _list_sets(self, now) -> bytes:
        specs = self.snapshot.set_specs()
        parts = ["<ListSets>"]
        for spec in specs:
            parts.append(f"<set><setSpec>{escape(spec)}</setSpec>"
                         f"<setName>{escape(spec)}</setName></set>")
        parts.append("</ListSets>")
        return self._envelope("ListSets", "".join(parts), now)

    def _get_record(self, args, now) -> bytes:
        for required in ("identifier", "metadataPrefix"):
            if required not in args:
                raise OaiProtocolError("badArgument", f"missing {required}")
        prefix = args["metadataPrefix"]
        if prefix not in EXPORT_FORMATS:
            raise OaiProtocolError("cannotDisseminateFormat", prefix)
        rec = self.snapshot.by_identifier(args["identifier"])
        if rec is None or rec.served_datestamp > now:
            raise OaiProtocolError("idDoesNotExist", args["identifier"])
        body = ("<GetRecord>" + self._serialize_record(rec, prefix)
                + "</GetRecord>")
        return self._envelope("GetRecord", body, now,
                              {"identifier": args["identifier"],
                               "metadataPrefix": prefix})

    def _parse_window(self, args):
        bounds = {}
        for key in ("from", "until"):
            if key in args:
                try:
                    bounds[key] = parse_datestamp(args[key])
                except ValueError as exc:
                    raise OaiProtocolError(
                        "badArgument", f"{key}: {exc}") from exc
        if ("from" in bounds and "until" in bounds
                and bounds["from"] > bounds["until"]):
            raise OaiProtocolError("badArgument", "from is after until")
        return bounds.get("from"), bounds.get("until")

    def _list(self, verb, args, now) -> bytes:
        if "resumptionToken" in args:
            state = self.resolve_token(args["resumptionToken"])
            prefix = state["prefix"]
            set_spec = state.get("set")
            from_, until = None, None
            if state.get("from"):
                from_ = parse_datestamp(state["from"])
            if state.get("until"):
                until = parse_datestamp(state["until"])
            position = state["pos"]
        else:
            prefix = args.get("metadataPrefix")
            if not prefix:
                raise OaiProtocolError("badArgument", "missing metadataPrefix")
            set_spec = args.get("set")
            from_, until = self._parse_window(args)
            position = 0
        if prefix not in EXPORT_FORMATS:
            raise OaiProtocolError("cannotDisseminateFormat", prefix)

        matches = [
            r for r in self._visible(now)
            if (from_ is None or r.served_datestamp >= from_)
            and (until is None or r.served_datestamp <= until)
            and (set_spec is None or r.collection_id == set_spec)
        ]
        if not matches:
            raise OaiProtocolError("noRecordsMatch", "no records in window")

        page = matches[position:position + self.config.page_size]
        next_pos = position + len(page)

        if verb == "ListIdentifiers":
            items = "".join(self._serialize_oai_header(r) for r in page)
        else:
            items = "".join(self._serialize_record(r, prefix) for r in page)

        token_el = ""
        if next_pos < len(matches):
            state = {"prefix": prefix, "set": set_spec,
                     "from": format_datestamp(from_) if from_ else None,
                     "until": format_datestamp(until) if until else None}
            token = self.mint_token(state, next_pos)
            token_el = (
                f'<resumptionToken completeListSize="{len(matches)}"'
                f' cursor="{position}">{escape(token)}</resumptionToken>')
        elif position > 0:
            # closing empty token on the final page of a paged list
            token_el = (f'<resumptionToken completeListSize="{len(matches)}"'
                        f' cursor="{position}"></resumptionToken>')

        body = f"<{verb}>{items}{token_el}</{verb}>"
        request_attrs = {"metadataPrefix": prefix} \
            if "resumptionToken" not in args else {}
        return self._envelope(verb, body, now, request_attrs)

    # -- record serialization (served datestamp, set = collection)

    def _serialize_oai_header(self, rec: StoredRecord) -> str:
        status = ' status="deleted"' if rec.deleted else ""
        return (
            f"<header{status}>"
            f"<identifier>{escape(rec.repo_identifier)}</identifier>"
            f"<datestamp>{format_datestamp(rec.served_datestamp)}</datestamp>"
            f"<setSpec>{escape(rec.collection_id)}</setSpec>"
            "</header>")

    def _serialize_record(self, rec: StoredRecord, prefix: str) -> str:
        header = self._serialize_oai_header(rec)
        if rec.deleted:
            return f"<record>{header}</record>"
        payload = (rec.exports or {}).get(prefix, b"")
        return (f"<record>{header}<metadata>{payload.decode('utf-8')}"
                "</metadata></record>")

    # ------------------------------------------------------------------
    # Transport adapter (in-process harvesting of this server)

    def handle_url(self, url: str) -> bytes:
        params = {k: v[0] for k, v in parse_qs(urlsplit(url).query).items()}
        verb = params.pop("verb", "")
        return self.handle_request(verb, params)

    def transport(self) -> "_ServerTransport":
        return _ServerTransport(self)


class _ServerTransport:
    """Loopback transport: lets the harvester and validator point at this
    process's own OAI server without a socket."""

    def __init__(self, server: OaiServer):
        self.server = server

    def get(self, url: str) -> bytes:
        return self.server.handle_url(url)
