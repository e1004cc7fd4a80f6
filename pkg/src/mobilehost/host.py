"""Host lifecycle and the request pipeline.

A request travels: classify -> parse -> authenticate -> route ->
verify inbound signature (if present) -> decrypt (if marked) ->
validate -> execute -> coerce -> sign (if the service is secured) ->
respond. Every failure surfaces as a SOAP fault: caller mistakes as
Client faults, handler and host failures as Server faults. No input
byte sequence may leave the pipeline without a response.

Wire conventions owned here (see docs/wire-format.md):

* header entries live under the namespace ``urn:mobilehost:headers``:
  ``Auth`` (Login / PasswordProof / DeviceId children), ``Signature``
  (algorithm and digest attributes, Value child, optional SignerCert
  child) and the ``Encrypted`` marker;
* an encrypted request is a carrier call named ``EncryptedRequest`` in
  the service namespace with wrappedKey / iv / ciphertext parameters,
  flagged by the Encrypted marker header;
* signatures cover the canonical Body bytes of the serialized envelope
  they travel in, so header insertion never invalidates them;
* ``GET <endpointPath>?wsdl`` returns the stored WSDL and
  ``GET <endpointPath>?cert`` the service certificate text.
"""

from __future__ import annotations

import mimetypes
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import urlsplit

from . import security
from .canonical import body_canonical
from .errors import (
    DecryptFailure,
    DuplicateService,
    IoFailure,
    MalformedSignature,
    MalformedXml,
    MobileHostError,
    NotFound,
    NotSoap,
    UnsupportedType,
    ValidationError,
)
from .registry import Registry, RequestLogEntry, ServiceRecord
from .security import CipherEnvelope, KeyStore, SignatureBlock
from .service import (
    ServiceDescriptor,
    ServiceHandler,
    coerce_result,
    descriptor_fingerprint,
    validate_call,
)
from .soap import (
    QName,
    SoapCall,
    SoapEnvelope,
    SoapResponseBody,
    TypedValue,
    XsdType,
    make_fault,
    make_header_entry,
    parse_envelope,
    serialize_envelope,
    _esc_text,
    _esc_attr,
)
from .transport import InboundRequest, OutboundResponse, start_listener
from .wsdl import generate_wsdl, store_wsdl

HEADERS_NS = "urn:mobilehost:headers"
AUTH_HEADER = QName("Auth", HEADERS_NS)
SIGNATURE_HEADER = QName("Signature", HEADERS_NS)
ENCRYPTED_HEADER = QName("Encrypted", HEADERS_NS)
ENCRYPTED_OPERATION = "EncryptedRequest"

XML_CONTENT_TYPE = "text/xml; charset=utf-8"

_CODEC_ERRORS = (MalformedXml, NotSoap, UnsupportedType)


@dataclass(frozen=True)
class HostConfig:
    bindings: tuple
    dataDir: Path
    wsdlDir: Optional[Path] = None
    webRoot: Optional[Path] = None
    authRequired: bool = False
    workerPoolSize: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "bindings", tuple(self.bindings))
        object.__setattr__(self, "dataDir", Path(self.dataDir))
        wsdl_dir = Path(self.wsdlDir) if self.wsdlDir else self.dataDir / "wsdl"
        object.__setattr__(self, "wsdlDir", wsdl_dir)
        if self.webRoot is not None:
            object.__setattr__(self, "webRoot", Path(self.webRoot))
        if self.dataDir == self.wsdlDir:
            raise ValueError("dataDir and wsdlDir must be distinct")
        if self.workerPoolSize < 1:
            raise ValueError("workerPoolSize must be >= 1")


@dataclass(frozen=True)
class AuthHeader:
    login: str
    passwordProof: str
    deviceId: str


# --- header entry wire helpers ----------------------------------------------


def auth_header_xml(auth: AuthHeader) -> str:
    return (
        f'<Auth xmlns="{HEADERS_NS}">'
        f"<Login>{_esc_text(auth.login)}</Login>"
        f"<PasswordProof>{_esc_text(auth.passwordProof)}</PasswordProof>"
        f"<DeviceId>{_esc_text(auth.deviceId)}</DeviceId>"
        f"</Auth>"
    )


def parse_auth_header(raw_xml: str) -> AuthHeader:
    el = ET.fromstring(raw_xml)
    fields = {}
    for child in el:
        fields[child.tag.rsplit("}", 1)[-1]] = child.text or ""
    try:
        return AuthHeader(
            login=fields["Login"],
            passwordProof=fields["PasswordProof"],
            deviceId=fields["DeviceId"],
        )
    except KeyError as e:
        raise MalformedXml(f"Auth header missing {e.args[0]}") from None


def signature_header_xml(sig: SignatureBlock, signer_cert_text: Optional[str] = None) -> str:
    cert_part = (
        f"<SignerCert>{_esc_text(signer_cert_text)}</SignerCert>"
        if signer_cert_text
        else ""
    )
    return (
        f'<Signature xmlns="{HEADERS_NS}"'
        f' algorithm="{_esc_attr(sig.algorithm)}"'
        f' digest="{_esc_attr(sig.digestAlgorithm)}">'
        f"<Value>{_esc_text(sig.value)}</Value>{cert_part}"
        f"</Signature>"
    )


def parse_signature_header(raw_xml: str):
    """Return (SignatureBlock, signer certificate text or None)."""
    el = ET.fromstring(raw_xml)
    value = None
    cert_text = None
    for child in el:
        local = child.tag.rsplit("}", 1)[-1]
        if local == "Value":
            value = child.text or ""
        elif local == "SignerCert":
            cert_text = child.text or ""
    if value is None:
        raise MalformedSignature("Signature header has no Value")
    return (
        SignatureBlock(
            algorithm=el.get("algorithm") or security.SIGNATURE_ALGORITHM,
            digestAlgorithm=el.get("digest") or security.DIGEST_ALGORITHM,
            value=value,
        ),
        cert_text,
    )


def encrypted_marker_xml() -> str:
    return f'<Encrypted xmlns="{HEADERS_NS}">true</Encrypted>'


def attach_signature(
    envelope_xml: bytes,
    private_key,
    signer_cert_text: Optional[str] = None,
) -> bytes:
    """Re-serialize an envelope with a Signature header covering its
    canonical Body bytes."""
    env = parse_envelope(envelope_xml)
    bare = serialize_envelope(env)
    sig = security.sign_message(body_canonical(bare), private_key)
    entry = make_header_entry(signature_header_xml(sig, signer_cert_text))
    signed = SoapEnvelope(
        body=env.body,
        headerEntries=env.headerEntries + (entry,),
        encodingStyle=env.encodingStyle,
    )
    return serialize_envelope(signed)


def verify_envelope_signature(envelope_xml: bytes, cert: security.Certificate):
    """True/False per the embedded signature; None if there is none."""
    try:
        env = parse_envelope(envelope_xml)
    except _CODEC_ERRORS:
        return False
    raw = env.header(SIGNATURE_HEADER)
    if raw is None:
        return None
    try:
        block, _ = parse_signature_header(raw)
        return security.verify_signature(
            body_canonical(envelope_xml), block, cert.public_key()
        )
    except (MalformedSignature, MalformedXml):
        return False


def encrypt_request(plain_envelope: bytes, service_namespace: str,
                    cert: security.Certificate) -> bytes:
    """Wrap a serialized request for a secured service: the whole
    envelope becomes the ciphertext of an EncryptedRequest carrier call."""
    cipher = security.encrypt_message(plain_envelope, cert.public_key())
    carrier = SoapEnvelope(
        body=SoapCall(
            operation=QName(ENCRYPTED_OPERATION, service_namespace),
            params=(
                ("wrappedKey", TypedValue.of(XsdType.STRING, cipher.wrappedKey)),
                ("iv", TypedValue.of(XsdType.STRING, cipher.iv)),
                ("ciphertext", TypedValue.of(XsdType.STRING, cipher.ciphertext)),
            ),
        ),
        headerEntries=(make_header_entry(encrypted_marker_xml()),),
    )
    return serialize_envelope(carrier)


# --- the host -----------------------------------------------------------------


class Host:
    def __init__(self, cfg: HostConfig):
        self.cfg = cfg
        try:
            cfg.dataDir.mkdir(parents=True, exist_ok=True)
            cfg.wsdlDir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(f"cannot create host directories: {e}") from None
        self.registry = Registry.load_snapshot(cfg.dataDir)
        self.keystore = KeyStore(cfg.dataDir / "keys")
        self._handlers: dict = {}
        self._keys: dict = {}  # serviceName -> (KeyPair, Certificate)
        self._service_locks: dict = {}
        self._listeners: list = []
        self._started = False
        self._stopped = False
        for rec in self.registry.list_services():
            self._restore_service_state(rec)

    # --- lifecycle -------------------------------------------------------

    def _restore_service_state(self, rec: ServiceRecord) -> None:
        name = rec.descriptor.serviceName
        if rec.descriptor.exclusiveExecution:
            self._service_locks[name] = threading.Lock()
        if rec.keySetId and self.keystore.has(rec.keySetId):
            self._keys[name] = self.keystore.load(rec.keySetId)

    def start(self) -> None:
        if self._started:
            return
        started = []
        try:
            for binding in self.cfg.bindings:
                started.append(
                    start_listener(binding, self.handle_request,
                                   pool_size=self.cfg.workerPoolSize)
                )
        except Exception:
            for listener in started:
                listener.stop()
            raise
        self._listeners = started
        self._started = True

    def shutdown(self) -> None:
        """Stop listeners gracefully, then persist the registry."""
        if self._stopped:
            return
        for listener in self._listeners:
            listener.stop()
        self._listeners = []
        self.registry.snapshot(self.cfg.dataDir)
        self._started = False
        self._stopped = True

    def loopback(self):
        for listener in self._listeners:
            if listener.kind == "loopback":
                return listener
        return None

    def listener(self, kind: str):
        for listener in self._listeners:
            if listener.kind == kind:
                return listener
        return None

    def _endpoint_url(self, desc: ServiceDescriptor) -> str:
        for binding in self.cfg.bindings:
            if binding.kind == "http":
                addr = "localhost" if binding.address in ("0.0.0.0", "::") else binding.address
                return f"http://{addr}:{binding.port}{desc.endpointPath}"
        return f"http://localhost:5000{desc.endpointPath}"

    # --- service management ------------------------------------------------

    def create_service(self, desc: ServiceDescriptor, handler: ServiceHandler) -> ServiceRecord:
        """Register a service: key material iff secured, WSDL generated
        and stored, route live immediately. Re-creating a fingerprint-
        identical service just re-attaches the handler."""
        name = desc.serviceName
        try:
            existing = self.registry.lookup_service(name)
        except NotFound:
            existing = None
        if existing is not None:
            if descriptor_fingerprint(existing.descriptor) == descriptor_fingerprint(desc):
                self._handlers[name] = handler
                return existing
            raise DuplicateService(
                f"service {name} already exists with a different signature"
            )

        key_set_id = None
        if desc.securityEnabled:
            key_set_id = name
            if self.keystore.has(name):
                self._keys[name] = self.keystore.load(name)
            else:
                kp = security.generate_keypair()
                cert = security.issue_certificate(kp, subjectDN=f"{name}/")
                self.keystore.save(name, kp, cert)
                self._keys[name] = (kp, cert)

        doc = generate_wsdl(desc, self._endpoint_url(desc))
        store_wsdl(doc, self.cfg.wsdlDir)
        rec = ServiceRecord(
            descriptor=desc, wsdl=doc, keySetId=key_set_id, createdAt=time.time()
        )
        self.registry.register_service(rec)
        self._handlers[name] = handler
        if desc.exclusiveExecution:
            self._service_locks[name] = threading.Lock()
        return rec

    def attach_handler(self, service_name: str, handler: ServiceHandler) -> None:
        self.registry.lookup_service(service_name)  # NotFound if absent
        self._handlers[service_name] = handler

    def remove_service(self, name: str) -> None:
        self.registry.remove_service(name)
        self._handlers.pop(name, None)

    def service_certificate(self, name: str) -> security.Certificate:
        if name not in self._keys:
            raise NotFound(f"no key material for service: {name}")
        return self._keys[name][1]

    # --- pipeline ------------------------------------------------------------

    def handle_request(self, req: InboundRequest) -> OutboundResponse:
        try:
            if req.classification == "web":
                return self._handle_web(req)
            if req.classification == "malformed":
                return self._fault_response(
                    "Client", "malformed request", status=400
                )
            return self._handle_soap(req)
        except Exception:
            # absolute backstop: no input may go unanswered
            return self._fault_response("Server", "internal host error", status=500)

    def _fault_response(self, code: str, message: str, detail: Optional[str] = None,
                        status: int = 500, sign_for: Optional[str] = None) -> OutboundResponse:
        xml = serialize_envelope(make_fault(code, message, detail))
        if sign_for is not None and sign_for in self._keys:
            kp, _ = self._keys[sign_for]
            xml = attach_signature(xml, kp.privateKey)
        return OutboundResponse(status=status, contentType=XML_CONTENT_TYPE, body=xml)

    # --- web branch ---------------------------------------------------------

    def _handle_web(self, req: InboundRequest) -> OutboundResponse:
        if req.method == "GET" and req.query in ("wsdl", "cert"):
            try:
                rec = self.registry.lookup_by_path(req.path)
            except NotFound:
                return _plain(404, "no such service")
            if req.query == "wsdl":
                return OutboundResponse(200, XML_CONTENT_TYPE, rec.wsdl.xmlText)
            name = rec.descriptor.serviceName
            if name in self._keys:
                text = security.render_certificate_text(self._keys[name][1])
                return _plain(200, text)
            return _plain(404, "service has no certificate")
        if req.method == "GET":
            return self._serve_static(req.path)
        return _plain(404, "no such resource")

    def _serve_static(self, path: str) -> OutboundResponse:
        root = self.cfg.webRoot
        if root is None:
            return _plain(404, "not found")
        relative = path.lstrip("/") or "index.html"
        target = (root / relative).resolve()
        try:
            root_resolved = root.resolve()
            target.relative_to(root_resolved)
        except ValueError:
            return _plain(404, "not found")
        if not target.is_file():
            return _plain(404, "not found")
        content_type = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        return OutboundResponse(200, content_type, target.read_bytes())

    # --- soap branch -------------------------------------------------------

    def _handle_soap(self, req: InboundRequest) -> OutboundResponse:
        started = time.perf_counter()
        service_name = ""
        method_name = ""
        outcome = "serverFault"
        try:
            resp, service_name, method_name, outcome = self._soap_pipeline(req)
            return resp
        finally:
            self.registry.append_log(
                RequestLogEntry(
                    timestamp=time.time(),
                    serviceName=service_name,
                    methodName=method_name,
                    durationMicros=int((time.perf_counter() - started) * 1_000_000),
                    outcome=outcome,
                )
            )

    def _soap_pipeline(self, req: InboundRequest):
        service_name = ""
        method_name = ""

        # parse
        try:
            env = parse_envelope(req.payload)
        except _CODEC_ERRORS as e:
            return self._fault_response("Client", str(e)), "", "", "clientFault"
        if not isinstance(env.body, SoapCall):
            return (
                self._fault_response("Client", "request body must be a method call"),
                "", "", "clientFault",
            )
        call = env.body
        method_name = call.operation.localName

        # authenticate (credentials present and valid)
        auth = None
        if self.cfg.authRequired:
            raw = env.header(AUTH_HEADER)
            if raw is None:
                return (
                    self._fault_response("Client", "access denied",
                                         detail="missing Auth header"),
                    "", method_name, "denied",
                )
            try:
                auth = parse_auth_header(raw)
            except (MalformedXml, ET.ParseError):
                return (
                    self._fault_response("Client", "access denied",
                                         detail="unreadable Auth header"),
                    "", method_name, "denied",
                )

        # route
        path = req.path or _path_from_namespace(call.operation.namespaceUri)
        try:
            rec = self.registry.lookup_by_path(path) if path else None
        except NotFound:
            rec = None
        if rec is None:
            return (
                self._fault_response("Client", f"unknown service: {path or '(no path)'}"),
                "", method_name, "clientFault",
            )
        desc = rec.descriptor
        service_name = desc.serviceName
        secured = desc.securityEnabled and service_name in self._keys

        # authorize
        if auth is not None and not self.registry.check_access_proof(
            auth.login, auth.passwordProof, service_name
        ):
            return (
                self._fault_response("Client", "access denied", sign_for=None),
                service_name, method_name, "denied",
            )

        # inbound signature, verified when the sender attached one
        sig_raw = env.header(SIGNATURE_HEADER)
        if secured and sig_raw is not None:
            ok, why = self._verify_inbound_signature(req.payload, sig_raw)
            if not ok:
                return (
                    self._fault_response("Client", why, sign_for=service_name),
                    service_name, method_name, "clientFault",
                )

        # decrypt
        if secured and env.header(ENCRYPTED_HEADER) is not None:
            try:
                env, call = self._decrypt_carrier(call, service_name)
            except (DecryptFailure, *_CODEC_ERRORS) as e:
                return (
                    self._fault_response("Client", str(e), sign_for=service_name),
                    service_name, method_name, "clientFault",
                )
            method_name = call.operation.localName

        # validate
        try:
            sig = validate_call(desc, call)
        except ValidationError as e:
            return (
                self._fault_response("Client", str(e), sign_for=service_name),
                service_name, method_name, "clientFault",
            )

        # execute
        handler = self._handlers.get(service_name)
        if handler is None:
            return (
                self._fault_response("Server", "no handler attached to service",
                                     sign_for=service_name),
                service_name, method_name, "serverFault",
            )
        args = [value for _, value in call.params]
        lock = self._service_locks.get(service_name) if desc.exclusiveExecution else None
        try:
            if lock is not None:
                with lock:
                    raw_result = handler.executeMethod(sig.name, args)
            else:
                raw_result = handler.executeMethod(sig.name, args)
        except Exception as e:
            return (
                self._fault_response("Server", "handler failure", detail=str(e),
                                     sign_for=service_name),
                service_name, method_name, "serverFault",
            )

        # coerce and respond
        try:
            result = coerce_result(sig, raw_result)
        except MobileHostError as e:
            return (
                self._fault_response("Server", str(e), sign_for=service_name),
                service_name, method_name, "serverFault",
            )
        response = SoapEnvelope(
            body=SoapResponseBody(
                operation=QName(sig.name + "Response", desc.responseNamespaceUri),
                resultName=sig.name + "Result",
                result=result,
            )
        )
        xml = serialize_envelope(response)
        if secured:
            kp, _ = self._keys[service_name]
            xml = attach_signature(xml, kp.privateKey)
        return (
            OutboundResponse(200, XML_CONTENT_TYPE, xml),
            service_name, method_name, "ok",
        )

    def _verify_inbound_signature(self, payload: bytes, sig_raw: str):
        try:
            block, cert_text = parse_signature_header(sig_raw)
        except (MalformedSignature, ET.ParseError):
            return False, "unreadable Signature header"
        if not cert_text:
            return False, "signature without signer certificate"
        try:
            cert = security.parse_certificate_text(cert_text)
        except ValueError:
            return False, "unreadable signer certificate"
        if not security.verify_certificate(cert):
            return False, "invalid signer certificate"
        try:
            if not security.verify_signature(
                body_canonical(payload), block, cert.public_key()
            ):
                return False, "signature verification failed"
        except MalformedSignature:
            return False, "signature verification failed"
        return True, ""

    def _decrypt_carrier(self, call: SoapCall, service_name: str):
        params = dict((name, tv.lexical) for name, tv in call.params)
        if call.operation.localName != ENCRYPTED_OPERATION or set(params) != {
            "wrappedKey", "iv", "ciphertext"
        }:
            raise MalformedXml(
                "encrypted requests must be an EncryptedRequest carrier call"
            )
        kp, _ = self._keys[service_name]
        plain = security.decrypt_message(
            CipherEnvelope(
                wrappedKey=params["wrappedKey"],
                iv=params["iv"],
                ciphertext=params["ciphertext"],
            ),
            kp.privateKey,
        )
        env = parse_envelope(plain)
        if not isinstance(env.body, SoapCall):
            raise MalformedXml("decrypted payload is not a method call")
        return env, env.body


def _path_from_namespace(namespace_uri: str) -> str:
    return urlsplit(namespace_uri).path if namespace_uri else ""


def _plain(status: int, text: str) -> OutboundResponse:
    return OutboundResponse(status, "text/plain; charset=utf-8", text.encode("utf-8"))


def init_host(cfg: HostConfig) -> Host:
    """Load the registry and key store; listeners stay down until start()."""
    return Host(cfg)
