"""Deterministic XML form for byte comparison and signing.

Canonicalization sorts attributes, strips insignificant whitespace and
fixes quoting (C14N with whitespace-only text removed). It preserves the
namespace *prefixes* of its input, so comparisons are prefix-sensitive;
the serializer pins the prefixes per direction, which keeps golden
comparisons stable.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

from .errors import MalformedXml

SOAP_ENV_NS = "http://schemas.xmlsoap.org/soap/envelope/"


def canonicalize(raw) -> bytes:
    """Canonical byte form of a well-formed XML document. Idempotent."""
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    if "<!DOCTYPE" in text or "<!ENTITY" in text:
        raise MalformedXml("DTD markup is not accepted")
    try:
        return ET.canonicalize(text, strip_text=True).encode("utf-8")
    except ET.ParseError as e:
        raise MalformedXml(str(e)) from None


def body_canonical(envelope_xml) -> bytes:
    """Canonical bytes of the Body subtree of a serialized envelope.

    This is the exact byte sequence message signatures cover: both the
    signer and the verifier call this on the same wire bytes, so header
    insertion or removal never invalidates a signature.
    """
    text = envelope_xml.decode("utf-8") if isinstance(envelope_xml, bytes) else envelope_xml
    if "<!DOCTYPE" in text or "<!ENTITY" in text:
        raise MalformedXml("DTD markup is not accepted")
    try:
        root = ET.fromstring(text)
    except ET.ParseError as e:
        raise MalformedXml(str(e)) from None
    body = root.find(f"{{{SOAP_ENV_NS}}}Body")
    if body is None:
        raise MalformedXml("envelope has no Body")
    return canonicalize(ET.tostring(body, encoding="unicode"))
