"""Network listeners and request classification.

Three binding kinds share one dispatcher contract: the listener builds
an InboundRequest, hands it to a worker from a bounded pool, and writes
back whatever OutboundResponse the dispatcher returns.

* ``http``: HTTP/1.1 subset — GET and POST, Content-Length required on
  POST, one request per connection.
* ``rawTcp``: a single length-prefixed frame each way,
  ``[len: u32 big-endian][payload]``; stands in for stream transports
  without an addressing layer.
* ``loopback``: in-memory, for tests and embedding.

Stopping a listener is graceful: new connections are refused, requests
already accepted still get their response.
"""

from __future__ import annotations

import concurrent.futures
import socket
import struct
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .errors import BindFailure, PeerGone
from .soap import SOAP_ENV_NS

MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_PORT = 5000
DEFAULT_POOL_SIZE = 32

_FRAME_HEADER = struct.Struct(">I")

_REASONS = {
    200: "OK",
    400: "Bad Request",
    404: "Not Found",
    405: "Method Not Allowed",
    411: "Length Required",
    413: "Payload Too Large",
    500: "Internal Server Error",
}


@dataclass(frozen=True)
class BindingConfig:
    kind: str  # http | rawTcp | loopback
    address: str = "127.0.0.1"
    port: int = DEFAULT_PORT

    def __post_init__(self) -> None:
        if self.kind not in ("http", "rawTcp", "loopback"):
            raise ValueError(f"unknown binding kind: {self.kind}")
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")

    @classmethod
    def from_url(cls, url: str) -> "BindingConfig":
        """Parse CLI-style bindings: http://host:port or tcp://host:port."""
        scheme, sep, rest = url.partition("://")
        if not sep:
            raise ValueError(f"binding must look like http://host:port, got {url!r}")
        kind = {"http": "http", "tcp": "rawTcp", "loopback": "loopback"}.get(scheme)
        if kind is None:
            raise ValueError(f"unknown binding scheme: {scheme}")
        host, _, port_text = rest.partition(":")
        port = int(port_text) if port_text else DEFAULT_PORT
        return cls(kind=kind, address=host or "127.0.0.1", port=port)


@dataclass
class InboundRequest:
    transportKind: str
    peer: str
    path: str
    headers: Optional[Mapping]  # http only; None on raw transports
    payload: bytes
    classification: str  # soap | web | malformed
    query: str = ""
    method: str = ""
    _channel: object = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class OutboundResponse:
    status: int
    contentType: str
    body: bytes


Dispatcher = Callable[[InboundRequest], OutboundResponse]


def _looks_like_envelope(payload: bytes) -> bool:
    if len(payload) > MAX_PAYLOAD:
        return False
    try:
        text = payload.decode("utf-8")
        if "<!DOCTYPE" in text or "<!ENTITY" in text:
            return False
        root = ET.fromstring(text)
    except (UnicodeDecodeError, ET.ParseError):
        return False
    return root.tag == f"{{{SOAP_ENV_NS}}}Envelope"


def classify_request(
    payload: bytes,
    headers: Optional[Mapping] = None,
    method: Optional[str] = None,
) -> str:
    """soap | web | malformed, per transport semantics.

    With headers (HTTP): GET is web; a POST that declares XML (content
    type or SOAPAction) must carry an envelope, otherwise it is
    malformed; any other POST is web. Without headers the payload must
    be an envelope outright.
    """
    if len(payload) > MAX_PAYLOAD:
        return "malformed"
    if headers is None:
        return "soap" if _looks_like_envelope(payload) else "malformed"
    method = (method or "").upper()
    if method == "GET":
        return "web"
    if method != "POST":
        return "malformed"
    content_type = ""
    soap_action = False
    for k, v in headers.items():
        lk = k.lower()
        if lk == "content-type":
            content_type = v.lower()
        elif lk == "soapaction":
            soap_action = True
    declares_xml = "xml" in content_type or soap_action
    if declares_xml:
        return "soap" if _looks_like_envelope(payload) else "malformed"
    return "soap" if _looks_like_envelope(payload) else "web"


# --- framing (rawTcp) -------------------------------------------------------


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"frame exceeds {MAX_PAYLOAD} bytes")
    return _FRAME_HEADER.pack(len(payload)) + payload


def read_frame(sock_file) -> bytes:
    """Read one frame from a binary stream; raises PeerGone at EOF and
    ValueError on an oversized declared length."""
    header = sock_file.read(_FRAME_HEADER.size)
    if len(header) < _FRAME_HEADER.size:
        raise PeerGone("peer closed before frame header")
    (length,) = _FRAME_HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ValueError(f"declared frame length {length} exceeds maximum")
    payload = sock_file.read(length)
    if len(payload) < length:
        raise PeerGone("peer closed mid-frame")
    return payload


# --- listeners ---------------------------------------------------------------


class _SocketListener:
    """Shared accept-loop / worker-pool plumbing for socket transports."""

    kind = ""

    def __init__(self, cfg: BindingConfig, dispatcher: Dispatcher, pool_size: int):
        self.cfg = cfg
        self.dispatcher = dispatcher
        try:
            self._sock = socket.create_server(
                (cfg.address, cfg.port), backlog=128
            )
        except OSError as e:
            raise BindFailure(f"cannot bind {cfg.address}:{cfg.port}: {e}") from None
        self.port = self._sock.getsockname()[1]
        # closing a listening socket does not interrupt accept() everywhere,
        # so the acceptor polls and re-checks the stop flag
        self._sock.settimeout(0.1)
        self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=pool_size)
        self._stopping = threading.Event()
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break  # socket closed by stop()
            conn.settimeout(None)
            try:
                self._pool.submit(self._serve_connection, conn, addr)
            except RuntimeError:
                conn.close()  # pool already shut down

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        """Refuse new connections, then drain in-flight requests."""
        if self._stopping.is_set():
            return
        self._stopping.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._acceptor.join(timeout=5)
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class HttpListener(_SocketListener):
    kind = "http"

    def __init__(self, cfg, dispatcher, pool_size=DEFAULT_POOL_SIZE):
        super().__init__(cfg, dispatcher, pool_size)

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        conn.settimeout(30)
        peer = f"{addr[0]}:{addr[1]}"
        try:
            with conn, conn.makefile("rb") as rfile:
                status_only = self._read_request(rfile, peer)
                if isinstance(status_only, tuple):
                    status, message = status_only
                    _http_write(conn, status, "text/plain; charset=utf-8",
                                message.encode("utf-8"))
                    return
                req = status_only
                req._channel = conn
                try:
                    resp = self.dispatcher(req)
                except Exception:
                    resp = OutboundResponse(500, "text/plain; charset=utf-8",
                                            b"internal error")
                try:
                    send_response(req, resp.status, resp.body, resp.contentType)
                except PeerGone:
                    pass
        except (OSError, ValueError):
            pass  # peer went away or sent garbage beyond repair

    def _read_request(self, rfile, peer: str):
        request_line = rfile.readline(8192)
        if not request_line:
            raise PeerGone("empty request")
        try:
            method, target, version = request_line.decode("latin-1").strip().split(" ", 2)
        except ValueError:
            return (400, "malformed request line")
        if not version.startswith("HTTP/1."):
            return (400, "unsupported protocol version")
        headers = {}
        while True:
            line = rfile.readline(8192)
            if line in (b"\r\n", b"\n", b""):
                break
            name, sep, value = line.decode("latin-1").partition(":")
            if sep:
                headers[name.strip().lower()] = value.strip()
        method = method.upper()
        payload = b""
        if method == "POST":
            if "content-length" not in headers:
                return (411, "Content-Length required")
            try:
                length = int(headers["content-length"])
            except ValueError:
                return (400, "bad Content-Length")
            if length > MAX_PAYLOAD:
                return (413, "payload too large")
            payload = rfile.read(length)
            if len(payload) < length:
                raise PeerGone("peer closed mid-body")
        elif method != "GET":
            return (405, "only GET and POST are supported")
        path, _, query = target.partition("?")
        return InboundRequest(
            transportKind="http",
            peer=peer,
            path=path,
            headers=headers,
            payload=payload,
            classification=classify_request(payload, headers, method),
            query=query,
            method=method,
        )


class RawTcpListener(_SocketListener):
    kind = "rawTcp"

    def __init__(self, cfg, dispatcher, pool_size=DEFAULT_POOL_SIZE):
        super().__init__(cfg, dispatcher, pool_size)

    def _serve_connection(self, conn: socket.socket, addr) -> None:
        conn.settimeout(30)
        peer = f"{addr[0]}:{addr[1]}"
        try:
            with conn, conn.makefile("rb") as rfile:
                try:
                    payload = read_frame(rfile)
                except ValueError:
                    _frame_write(conn, b"frame too large")
                    return
                except PeerGone:
                    return
                req = InboundRequest(
                    transportKind="rawTcp",
                    peer=peer,
                    path="",
                    headers=None,
                    payload=payload,
                    classification=classify_request(payload),
                    _channel=conn,
                )
                try:
                    resp = self.dispatcher(req)
                except Exception:
                    resp = OutboundResponse(500, "text/xml; charset=utf-8", b"")
                try:
                    send_response(req, resp.status, resp.body, resp.contentType)
                except PeerGone:
                    pass
        except (OSError, ValueError):
            pass


class LoopbackListener:
    """In-memory binding: request() runs the payload through the same
    worker pool and returns the dispatcher's response."""

    kind = "loopback"

    def __init__(self, cfg: BindingConfig, dispatcher: Dispatcher,
                 pool_size: int = DEFAULT_POOL_SIZE):
        self.cfg = cfg
        self.dispatcher = dispatcher
        self.port = cfg.port
        self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=pool_size)
        self._stopping = threading.Event()

    def request(self, payload: bytes, path: str = "", peer: str = "loopback",
                timeout: Optional[float] = None) -> OutboundResponse:
        if self._stopping.is_set():
            raise PeerGone("listener stopped")
        req = InboundRequest(
            transportKind="loopback",
            peer=peer,
            path=path,
            headers=None,
            payload=payload,
            classification=classify_request(payload),
        )
        future = self._pool.submit(self.dispatcher, req)
        return future.result(timeout=timeout)

    def stop(self) -> None:
        self._stopping.set()
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_listener(cfg: BindingConfig, dispatcher: Dispatcher,
                   pool_size: int = DEFAULT_POOL_SIZE):
    """Start the listener matching cfg.kind; raises BindFailure if the
    port is taken."""
    if cfg.kind == "http":
        return HttpListener(cfg, dispatcher, pool_size)
    if cfg.kind == "rawTcp":
        return RawTcpListener(cfg, dispatcher, pool_size)
    return LoopbackListener(cfg, dispatcher, pool_size)


# --- responses ---------------------------------------------------------------


def send_response(req: InboundRequest, status: int, body: bytes,
                  content_type: str = "text/xml; charset=utf-8") -> None:
    """Write a response on the request's transport: a status line plus
    headers for http, one frame for rawTcp."""
    conn = req._channel
    if conn is None:
        raise PeerGone("request has no open channel")
    if req.transportKind == "http":
        _http_write(conn, status, content_type, body)
    else:
        _frame_write(conn, body)


def _http_write(conn, status: int, content_type: str, body: bytes) -> None:
    reason = _REASONS.get(status, "Unknown")
    head = (
        f"HTTP/1.1 {status} {reason}\r\n"
        f"Content-Type: {content_type}\r\n"
        f"Content-Length: {len(body)}\r\n"
        f"Connection: close\r\n\r\n"
    ).encode("latin-1")
    try:
        conn.sendall(head + body)
    except OSError as e:
        raise PeerGone(str(e)) from None


def _frame_write(conn, body: bytes) -> None:
    try:
        conn.sendall(encode_frame(body))
    except OSError as e:
        raise PeerGone(str(e)) from None
