"""Operator and consumer command line.

Commands: serve, invoke, describe, keygen, cert show, users add.
Exit codes: 0 success, 1 remote fault or failed operation, 2 usage
error, 3 I/O or network error.
"""

from __future__ import annotations

import argparse
import http.client
import signal
import sys
import threading
from pathlib import Path
from urllib.parse import urlsplit

from . import security
from .errors import (
    BindFailure,
    DuplicateUser,
    IoFailure,
    MobileHostError,
    NotSoap,
    MalformedXml,
    UnsupportedType,
    UnsupportedWsdl,
)
from .host import (
    Host,
    HostConfig,
    attach_signature,
    encrypt_request,
    verify_envelope_signature,
)
from .manifest import load_manifest
from .notes import NotesHandler, load_seed_file, notes_descriptor
from .registry import Registry, make_user
from .security import KeyStore
from .soap import (
    QName,
    SoapCall,
    SoapEnvelope,
    SoapFault,
    TypedValue,
    XsdType,
    parse_envelope,
    serialize_envelope,
)
from .transport import BindingConfig
from .wsdl import parse_wsdl

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_USAGE = 2
EXIT_IO = 3

SOAP_ENCODING = "http://schemas.xmlsoap.org/soap/encoding/"


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (IoFailure, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobilehost",
        description="Run a mobile SOAP service host or talk to one.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run a host until interrupted")
    serve.add_argument("--bind", action="append", default=[],
                       help="http://host:port or tcp://host:port (repeatable)")
    serve.add_argument("--data-dir", default="data")
    serve.add_argument("--wsdl-dir", default=None)
    serve.add_argument("--web-root", default=None)
    serve.add_argument("--auth-required", action="store_true")
    serve.add_argument("--pool-size", type=int, default=32)
    serve.add_argument("--services", default=None, help="service manifest (JSON)")
    serve.add_argument("--demo-notes", action="store_true",
                       help="register the grades demo service")
    serve.add_argument("--demo-secure", action="store_true",
                       help="enable message security on the demo service")
    serve.add_argument("--notes-seed", default=None,
                       help="seed file for the demo service")
    serve.set_defaults(func=cmd_serve)

    invoke = sub.add_parser("invoke", help="call a method on a remote service")
    invoke.add_argument("url", help="service endpoint, e.g. http://host:5000/Svc.jws")
    invoke.add_argument("method")
    invoke.add_argument("params", nargs="*")
    invoke.add_argument("--cert", default=None,
                        help="service certificate file; verifies the response "
                             "signature and enables --encrypt")
    invoke.add_argument("--encrypt", action="store_true",
                        help="encrypt the request toward the service (needs --cert)")
    invoke.add_argument("--sign", action="store_true",
                        help="sign the request (needs --key and --signer-cert)")
    invoke.add_argument("--key", default=None, help="consumer private key file (PEM)")
    invoke.add_argument("--signer-cert", default=None,
                        help="consumer certificate file sent with a signed request")
    invoke.add_argument("--login", default=None)
    invoke.add_argument("--password", default=None)
    invoke.add_argument("--device", default="cli")
    invoke.add_argument("--timeout", type=float, default=10.0)
    invoke.set_defaults(func=cmd_invoke)

    describe = sub.add_parser("describe", help="fetch and print a service WSDL")
    describe.add_argument("url")
    describe.add_argument("--timeout", type=float, default=10.0)
    describe.set_defaults(func=cmd_describe)

    keygen = sub.add_parser("keygen", help="generate a keypair + certificate")
    keygen.add_argument("name")
    keygen.add_argument("--keys-dir", default="keys")
    keygen.add_argument("--bits", type=int, default=2048)
    keygen.add_argument("--subject", default="MobileHost/")
    keygen.add_argument("--days", type=int, default=security.DEFAULT_VALIDITY_DAYS)
    keygen.add_argument("--force", action="store_true")
    keygen.set_defaults(func=cmd_keygen)

    cert = sub.add_parser("cert", help="certificate operations")
    cert_sub = cert.add_subparsers(dest="cert_command", required=True)
    cert_show = cert_sub.add_parser("show", help="print a stored certificate")
    cert_show.add_argument("name")
    cert_show.add_argument("--keys-dir", default="keys")
    cert_show.set_defaults(func=cmd_cert_show)

    users = sub.add_parser("users", help="user database operations")
    users_sub = users.add_subparsers(dest="users_command", required=True)
    users_add = users_sub.add_parser("add", help="add a consumer login")
    users_add.add_argument("login")
    users_add.add_argument("--password", required=True)
    users_add.add_argument("--device", default="unknown")
    users_add.add_argument("--services", default="*",
                           help="comma-separated service names, or *")
    users_add.add_argument("--data-dir", default="data")
    users_add.set_defaults(func=cmd_users_add)

    return parser


# --- serve ---------------------------------------------------------------


def build_host(args) -> Host:
    bindings = [BindingConfig.from_url(b) for b in args.bind] or [
        BindingConfig(kind="http", address="127.0.0.1", port=5000)
    ]
    cfg = HostConfig(
        bindings=tuple(bindings),
        dataDir=Path(args.data_dir),
        wsdlDir=Path(args.wsdl_dir) if args.wsdl_dir else None,
        webRoot=Path(args.web_root) if args.web_root else None,
        authRequired=args.auth_required,
        workerPoolSize=args.pool_size,
    )
    host = Host(cfg)
    if args.services:
        for descriptor, handler in load_manifest(args.services):
            host.create_service(descriptor, handler)
    if args.demo_notes:
        seed = load_seed_file(args.notes_seed) if args.notes_seed else None
        handler = NotesHandler(seed) if seed is not None else NotesHandler()
        host.create_service(notes_descriptor(args.demo_secure), handler)
    return host


def cmd_serve(args) -> int:
    try:
        host = build_host(args)
        host.start()
    except (BindFailure, MobileHostError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    for binding in host.cfg.bindings:
        print(f"listening on {binding.kind}://{binding.address}:{binding.port}")
    print("ready", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, lambda *_: stop.set())
        except ValueError:
            pass  # not the main thread
    try:
        stop.wait()
    finally:
        host.shutdown()
    return EXIT_OK


# --- invoke ----------------------------------------------------------------


def http_post(url: str, body: bytes, timeout: float = 10.0) -> tuple:
    """POST a SOAP payload; returns (status, body bytes)."""
    parts = urlsplit(url)
    conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
    try:
        conn.request(
            "POST",
            parts.path or "/",
            body=body,
            headers={"Content-Type": "text/xml; charset=utf-8", "SOAPAction": '""'},
        )
        resp = conn.getresponse()
        return resp.status, resp.read()
    finally:
        conn.close()


def http_get(url: str, timeout: float = 10.0) -> tuple:
    parts = urlsplit(url)
    conn = http.client.HTTPConnection(parts.hostname, parts.port or 80, timeout=timeout)
    try:
        target = parts.path or "/"
        if parts.query:
            target += f"?{parts.query}"
        conn.request("GET", target)
        resp = conn.getresponse()
        return resp.status, resp.read()
    finally:
        conn.close()


def fetch_descriptor(url: str, timeout: float = 10.0):
    status, body = http_get(f"{url}?wsdl", timeout=timeout)
    if status != 200:
        raise IoFailure(f"WSDL fetch failed with status {status}")
    return parse_wsdl(body)


def build_call_envelope(descriptor, method: str, params: list) -> bytes:
    """Type positional string arguments against the WSDL signature and
    serialize the request. Unknown methods and extra arguments travel
    as strings so the host gets to issue the fault."""
    try:
        sig = descriptor.method(method)
        specs = list(sig.params)
    except MobileHostError:
        specs = []
    typed = []
    for i, raw in enumerate(params):
        if i < len(specs):
            name, xsd_type = specs[i].name, specs[i].xsdType
        else:
            name, xsd_type = f"arg{i}", XsdType.STRING
        typed.append((name, TypedValue.parse(xsd_type, raw)))
    call = SoapCall(
        operation=QName(method, descriptor.namespaceUri),
        params=tuple(typed),
        id="o0",
        rootAttr="1",
    )
    return serialize_envelope(SoapEnvelope(body=call, encodingStyle=SOAP_ENCODING))


def cmd_invoke(args) -> int:
    if args.encrypt and not args.cert:
        print("error: --encrypt requires --cert", file=sys.stderr)
        return EXIT_USAGE
    if args.sign and (not args.key or not args.signer_cert):
        print("error: --sign requires --key and --signer-cert", file=sys.stderr)
        return EXIT_USAGE
    try:
        descriptor = fetch_descriptor(args.url, timeout=args.timeout)
        payload = build_call_envelope(descriptor, args.method, args.params)
    except (MalformedXml, UnsupportedWsdl) as e:
        print(f"error: unusable WSDL: {e}", file=sys.stderr)
        return EXIT_IO
    except (OSError, IoFailure, MobileHostError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.login is not None:
        from .host import AuthHeader, auth_header_xml
        from .registry import password_proof
        from .soap import make_header_entry

        env = parse_envelope(payload)
        entry = make_header_entry(
            auth_header_xml(
                AuthHeader(args.login, password_proof(args.password or ""), args.device)
            )
        )
        payload = serialize_envelope(
            SoapEnvelope(body=env.body, headerEntries=env.headerEntries + (entry,),
                         encodingStyle=env.encodingStyle)
        )

    service_cert = None
    if args.cert:
        service_cert = security.parse_certificate_text(Path(args.cert).read_text())
    if args.encrypt:
        payload = encrypt_request(payload, descriptor.namespaceUri, service_cert)
    if args.sign:
        from cryptography.hazmat.primitives import serialization

        private_key = serialization.load_pem_private_key(
            Path(args.key).read_bytes(), password=None
        )
        payload = attach_signature(payload, private_key,
                                   Path(args.signer_cert).read_text())

    try:
        status, body = http_post(args.url, payload, timeout=args.timeout)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO

    try:
        envelope = parse_envelope(body)
    except (MalformedXml, NotSoap, UnsupportedType) as e:
        print(f"error: unreadable response (status {status}): {e}", file=sys.stderr)
        return EXIT_IO

    verdict_ok = True
    if service_cert is not None:
        verdict = verify_envelope_signature(body, service_cert)
        if verdict is None:
            print("signature: NONE", file=sys.stderr)
        else:
            print(f"signature: {'OK' if verdict else 'FAIL'}", file=sys.stderr)
            verdict_ok = bool(verdict)

    if isinstance(envelope.body, SoapFault):
        fault = envelope.body
        detail = f" ({fault.detail})" if fault.detail else ""
        print(f"FAULT {fault.faultcode}: {fault.faultstring}{detail}")
        return EXIT_FAULT
    print(envelope.body.result.lexical)
    return EXIT_OK if verdict_ok else EXIT_FAULT


def cmd_describe(args) -> int:
    try:
        status, body = http_get(f"{args.url}?wsdl", timeout=args.timeout)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    if status != 200:
        print(f"error: WSDL fetch failed with status {status}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(body.decode("utf-8"))
    return EXIT_OK


# --- key and user management --------------------------------------------------


def cmd_keygen(args) -> int:
    store = KeyStore(args.keys_dir)
    if store.has(args.name) and not args.force:
        print(f"error: key material for {args.name} exists (use --force)",
              file=sys.stderr)
        return EXIT_FAULT
    try:
        kp = security.generate_keypair(args.bits)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    cert = security.issue_certificate(kp, subjectDN=args.subject,
                                      validityDays=args.days)
    store.save(args.name, kp, cert)
    print(f"wrote {store.directory / (args.name + '.key')}")
    print(f"wrote {store.directory / (args.name + '.cert')}")
    return EXIT_OK


def cmd_cert_show(args) -> int:
    path = Path(args.keys_dir) / f"{args.name}.cert"
    if not path.exists():
        print(f"error: no certificate for {args.name} in {args.keys_dir}",
              file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(path.read_text())
    return EXIT_OK


def cmd_users_add(args) -> int:
    data_dir = Path(args.data_dir)
    registry = Registry.load_snapshot(data_dir)
    services = (
        {"*"}
        if args.services.strip() == "*"
        else {s.strip() for s in args.services.split(",") if s.strip()}
    )
    try:
        registry.add_user(make_user(args.login, args.password, args.device, services))
    except DuplicateUser as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAULT
    registry.snapshot(data_dir)
    print(f"added user {args.login}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
