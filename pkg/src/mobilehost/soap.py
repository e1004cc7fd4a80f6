"""SOAP 1.1 envelope parsing and serialization.

The wire formats mirror the two directions of traffic exactly:

* requests use the ``SOAP-ENV`` prefix, declare the encoding namespace,
  carry ``SOAP-ENV:encodingStyle`` on the Body, and omit the XML
  declaration;
* responses and faults use the ``soap`` prefix and start with
  ``<?xml version="1.0" encoding="utf-8" ?>``.

Parsing accepts any prefix bound to the SOAP 1.1 envelope namespace.
Only inline parameter values are supported; multi-ref attributes
(``id`` and ``SOAP-ENC:root``) are preserved opaquely on calls, never
resolved.
"""

from __future__ import annotations

import enum
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import MalformedXml, NotSoap, UnsupportedType

SOAP_ENV_NS = "http://schemas.xmlsoap.org/soap/envelope/"
SOAP_ENC_NS = "http://schemas.xmlsoap.org/soap/encoding/"
XSI_NS = "http://www.w3.org/2001/XMLSchema-instance"
XSD_NS = "http://www.w3.org/2001/XMLSchema"

FAULT_CODES = ("VersionMismatch", "MustUnderstand", "Client", "Server")

_TOKEN_RE = re.compile(r"^[^\s<>&'\"/=]+$")


def _is_token(s: str) -> bool:
    return bool(s) and bool(_TOKEN_RE.match(s))


class XsdType(str, enum.Enum):
    """The closed set of XML-Schema types a parameter or result may use."""

    STRING = "string"
    INT = "int"
    DOUBLE = "double"
    BOOLEAN = "boolean"

    @property
    def xsd_name(self) -> str:
        return f"xsd:{self.value}"


@dataclass(frozen=True)
class QName:
    localName: str
    namespaceUri: str = ""

    def __post_init__(self) -> None:
        if not _is_token(self.localName):
            raise ValueError(f"invalid local name: {self.localName!r}")

    @property
    def clark(self) -> str:
        if self.namespaceUri:
            return f"{{{self.namespaceUri}}}{self.localName}"
        return self.localName

    @classmethod
    def from_clark(cls, tag: str) -> "QName":
        if tag.startswith("{"):
            uri, _, local = tag[1:].partition("}")
            return cls(local, uri)
        return cls(tag, "")


@dataclass(frozen=True)
class TypedValue:
    """A value together with its XSD type and the lexical form it travels as."""

    xsdType: XsdType
    lexical: str
    value: object

    @classmethod
    def of(cls, xsd_type: XsdType, value: object) -> "TypedValue":
        """Build from a native value, deriving the lexical form."""
        return cls(xsd_type, _render_lexical(xsd_type, value), _check_native(xsd_type, value))

    @classmethod
    def parse(cls, xsd_type: XsdType, lexical: str) -> "TypedValue":
        """Build from a lexical form, deriving the native value."""
        return cls(xsd_type, lexical, parse_lexical(xsd_type, lexical))


def parse_lexical(xsd_type: XsdType, lexical: str) -> object:
    try:
        if xsd_type is XsdType.STRING:
            return lexical
        if xsd_type is XsdType.INT:
            return int(lexical)
        if xsd_type is XsdType.DOUBLE:
            return float(lexical)
        if xsd_type is XsdType.BOOLEAN:
            if lexical in ("true", "1"):
                return True
            if lexical in ("false", "0"):
                return False
            raise ValueError(lexical)
    except ValueError:
        raise MalformedXml(
            f"invalid {xsd_type.xsd_name} lexical value: {lexical!r}"
        ) from None
    raise UnsupportedType(str(xsd_type))


def _render_lexical(xsd_type: XsdType, value: object) -> str:
    if xsd_type is XsdType.BOOLEAN:
        return "true" if value else "false"
    if xsd_type is XsdType.DOUBLE:
        return repr(float(value))  # shortest form that round-trips
    return str(value)


def _check_native(xsd_type: XsdType, value: object) -> object:
    expected = {
        XsdType.STRING: str,
        XsdType.INT: int,
        XsdType.DOUBLE: float,
        XsdType.BOOLEAN: bool,
    }[xsd_type]
    if xsd_type is XsdType.INT and isinstance(value, bool):
        raise ValueError("bool is not an xsd:int")
    if xsd_type is XsdType.DOUBLE and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, expected):
        raise ValueError(f"{value!r} is not a native {xsd_type.xsd_name}")
    if xsd_type is XsdType.DOUBLE and (math.isnan(value) or math.isinf(value)):
        raise ValueError("non-finite doubles are not supported")
    return value


@dataclass(frozen=True)
class SoapCall:
    operation: QName
    params: tuple  # of (name: str, TypedValue)
    id: Optional[str] = None
    rootAttr: Optional[str] = None  # the SOAP-ENC:root value, kept opaque

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", tuple(self.params))
        names = [n for n, _ in self.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in call")
        for n in names:
            if not _is_token(n):
                raise ValueError(f"invalid parameter name: {n!r}")


@dataclass(frozen=True)
class SoapResponseBody:
    operation: QName  # local name ends with "Response"
    resultName: str  # ends with "Result"
    result: TypedValue

    def __post_init__(self) -> None:
        if not self.operation.localName.endswith("Response"):
            raise ValueError("response operation must end with 'Response'")
        if not self.resultName.endswith("Result"):
            raise ValueError("result name must end with 'Result'")


@dataclass(frozen=True)
class SoapFault:
    faultcode: str
    faultstring: str
    detail: Optional[str] = None

    def __post_init__(self) -> None:
        if self.faultcode not in FAULT_CODES:
            raise ValueError(f"faultcode must be one of {FAULT_CODES}")


Body = Union[SoapCall, SoapResponseBody, SoapFault]


@dataclass(frozen=True)
class SoapEnvelope:
    body: Body
    headerEntries: tuple = field(default_factory=tuple)  # of (QName, canonical xml str)
    encodingStyle: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "headerEntries", tuple(self.headerEntries))

    def header(self, qname: QName) -> Optional[str]:
        for name, raw in self.headerEntries:
            if name == qname:
                return raw
        return None


# --- parsing ---------------------------------------------------------------


def _fragment_canonical(el: ET.Element) -> str:
    """Prefix-neutral canonical text of a detached element subtree."""
    from .canonical import canonicalize

    text = ET.tostring(el, encoding="unicode")
    return canonicalize(text.encode("utf-8")).decode("utf-8")


def make_header_entry(xml_text: str) -> tuple:
    """Normalize a header fragment into the (QName, canonical text) form
    parse_envelope produces, so constructed envelopes round-trip exactly."""
    try:
        el = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise MalformedXml(f"bad header fragment: {e}") from None
    return (QName.from_clark(el.tag), _fragment_canonical(el))


def _decode(raw) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedXml(f"payload is not UTF-8: {e}") from None


def _parse_xml(text: str) -> ET.Element:
    if "<!DOCTYPE" in text or "<!ENTITY" in text:
        raise MalformedXml("DTD markup is not accepted")
    try:
        return ET.fromstring(text)
    except ET.ParseError as e:
        raise MalformedXml(str(e)) from None


def parse_envelope(raw) -> SoapEnvelope:
    """Parse UTF-8 XML bytes into a structured SOAP 1.1 envelope."""
    root = _parse_xml(_decode(raw))
    if root.tag != f"{{{SOAP_ENV_NS}}}Envelope":
        raise NotSoap(f"root element is {root.tag}, not a SOAP 1.1 Envelope")

    header_el = None
    body_el = None
    for child in root:
        if child.tag == f"{{{SOAP_ENV_NS}}}Header" and header_el is None:
            header_el = child
        elif child.tag == f"{{{SOAP_ENV_NS}}}Body" and body_el is None:
            body_el = child
    if body_el is None:
        raise MalformedXml("envelope has no Body")

    headers = tuple(
        (QName.from_clark(h.tag), _fragment_canonical(h)) for h in (header_el or ())
    )

    encoding_style = body_el.get(f"{{{SOAP_ENV_NS}}}encodingStyle") or root.get(
        f"{{{SOAP_ENV_NS}}}encodingStyle"
    )

    entries = list(body_el)
    if not entries:
        raise MalformedXml("empty body")
    if len(entries) > 1:
        raise MalformedXml("multiple body entries are not supported")

    return SoapEnvelope(
        body=_parse_body(entries[0]),
        headerEntries=headers,
        encodingStyle=encoding_style,
    )


def _parse_body(el: ET.Element) -> Body:
    if el.tag == f"{{{SOAP_ENV_NS}}}Fault":
        return _parse_fault(el)
    qname = QName.from_clark(el.tag)
    local = qname.localName
    children = list(el)
    if local.endswith("Response") and len(local) > len("Response"):
        base = local[: -len("Response")]
        if len(children) == 1 and _local(children[0].tag) == base + "Result":
            result_el = children[0]
            if not list(result_el):
                return SoapResponseBody(
                    operation=qname,
                    resultName=base + "Result",
                    result=_parse_typed_element(result_el),
                )
    return _parse_call(qname, el, children)


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _parse_call(qname: QName, el: ET.Element, children: list) -> SoapCall:
    params = []
    seen = set()
    for child in children:
        name = _local(child.tag)
        if name in seen:
            raise MalformedXml(f"duplicate parameter: {name}")
        seen.add(name)
        if list(child):
            raise MalformedXml(f"parameter '{name}' has structured content")
        params.append((name, _parse_typed_element(child)))
    try:
        return SoapCall(
            operation=qname,
            params=tuple(params),
            id=el.get("id"),
            rootAttr=el.get(f"{{{SOAP_ENC_NS}}}root"),
        )
    except ValueError as e:
        raise MalformedXml(str(e)) from None


def _parse_typed_element(el: ET.Element) -> TypedValue:
    declared = el.get(f"{{{XSI_NS}}}type")
    if declared is None:
        xsd_type = XsdType.STRING  # untyped values travel as strings
    else:
        local = declared.rsplit(":", 1)[-1]
        try:
            xsd_type = XsdType(local)
        except ValueError:
            raise UnsupportedType(f"unsupported xsi:type: {declared}") from None
    return TypedValue.parse(xsd_type, el.text or "")


def _parse_fault(el: ET.Element) -> SoapFault:
    code = None
    string = ""
    detail = None
    for child in el:
        name = _local(child.tag)
        if name == "faultcode":
            code = (child.text or "").rsplit(":", 1)[-1]
        elif name == "faultstring":
            string = child.text or ""
        elif name == "detail":
            detail = child.text or ""
    if code is None:
        raise MalformedXml("fault has no faultcode")
    if code not in FAULT_CODES:
        raise MalformedXml(f"unknown faultcode: {code}")
    return SoapFault(faultcode=code, faultstring=string, detail=detail)


# --- serialization ----------------------------------------------------------

_XML_DECL = '<?xml version="1.0" encoding="utf-8" ?>\n'


def _esc_text(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _esc_attr(s: str) -> str:
    s = _esc_text(s).replace('"', "&quot;")
    return s.replace("\n", "&#10;").replace("\t", "&#9;").replace("\r", "&#13;")


def serialize_envelope(env: SoapEnvelope) -> bytes:
    """Render an envelope to UTF-8 XML. Requests and responses get the
    prefix conventions of their direction; parse_envelope inverts this."""
    if isinstance(env.body, SoapCall):
        return _serialize_request(env)
    return _serialize_response(env)


def _header_block(env: SoapEnvelope, prefix: str) -> str:
    if not env.headerEntries:
        return ""
    entries = "\n".join(raw for _, raw in env.headerEntries)
    return f"<{prefix}:Header>\n{entries}\n</{prefix}:Header>\n"


def _typed_leaf(name: str, tv: TypedValue, extra_attr: str = "") -> str:
    return (
        f"<{name}{extra_attr} xsi:type=\"{tv.xsdType.xsd_name}\">"
        f"{_esc_text(tv.lexical)}</{name}>"
    )


def _serialize_request(env: SoapEnvelope) -> bytes:
    call = env.body
    op = call.operation
    attrs = f' xmlns="{_esc_attr(op.namespaceUri)}"'
    if call.id is not None:
        attrs += f' id="{_esc_attr(call.id)}"'
    if call.rootAttr is not None:
        attrs += f' SOAP-ENC:root="{_esc_attr(call.rootAttr)}"'
    body_attr = (
        f' SOAP-ENV:encodingStyle="{_esc_attr(env.encodingStyle)}"'
        if env.encodingStyle
        else ""
    )
    params = "\n".join(
        _typed_leaf(name, tv, extra_attr=' xmlns=""') for name, tv in call.params
    )
    inner = f"<{op.localName}{attrs}>\n{params}\n</{op.localName}>" if call.params else f"<{op.localName}{attrs}></{op.localName}>"
    xml = (
        f'<SOAP-ENV:Envelope xmlns:xsi="{XSI_NS}" xmlns:xsd="{XSD_NS}"'
        f' xmlns:SOAP-ENC="{SOAP_ENC_NS}" xmlns:SOAP-ENV="{SOAP_ENV_NS}">\n'
        f"{_header_block(env, 'SOAP-ENV')}"
        f"<SOAP-ENV:Body{body_attr}>\n{inner}\n</SOAP-ENV:Body>\n"
        f"</SOAP-ENV:Envelope>"
    )
    return xml.encode("utf-8")


def _serialize_response(env: SoapEnvelope) -> bytes:
    body = env.body
    body_attr = (
        f' soap:encodingStyle="{_esc_attr(env.encodingStyle)}"'
        if env.encodingStyle
        else ""
    )
    if isinstance(body, SoapFault):
        detail = (
            f"\n<detail>{_esc_text(body.detail)}</detail>" if body.detail is not None else ""
        )
        inner = (
            f"<soap:Fault>\n<faultcode>{_esc_text(body.faultcode)}</faultcode>\n"
            f"<faultstring>{_esc_text(body.faultstring)}</faultstring>{detail}\n</soap:Fault>"
        )
    else:
        op = body.operation
        result = _typed_leaf(body.resultName, body.result)
        inner = (
            f'<{op.localName} xmlns="{_esc_attr(op.namespaceUri)}">\n'
            f"{result}\n</{op.localName}>"
        )
    xml = (
        f"{_XML_DECL}"
        f'<soap:Envelope xmlns:xsi="{XSI_NS}" xmlns:xsd="{XSD_NS}"'
        f' xmlns:soap="{SOAP_ENV_NS}">\n'
        f"{_header_block(env, 'soap')}"
        f"<soap:Body{body_attr}>\n{inner}\n</soap:Body>\n"
        f"</soap:Envelope>"
    )
    return xml.encode("utf-8")


def make_fault(code: str, message: str, detail: Optional[str] = None) -> SoapEnvelope:
    """Wrap an error in a fault envelope using one of the four 1.1 codes."""
    return SoapEnvelope(body=SoapFault(faultcode=code, faultstring=message, detail=detail))
