"""Service and user databases plus the bounded request log.

Lookups are concurrent; writes are serialized under one lock, so a
reader observes the state before or after a registration, never a torn
record. Snapshots copy the state under the lock and write outside it.

Snapshot layout: ``services.db`` and ``users.db`` (JSON, human
readable) plus a ``checksums`` file; a checksum mismatch or truncated
table refuses to load.
"""

from __future__ import annotations

import collections
import hashlib
import hmac
import json
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import (
    CorruptSnapshot,
    DuplicateService,
    DuplicateUser,
    IoFailure,
    NotFound,
    PathConflict,
)
from .service import ServiceDescriptor, descriptor_from_dict, descriptor_to_dict
from .wsdl import WsdlDocument

SERVICES_FILE = "services.db"
USERS_FILE = "users.db"
CHECKSUM_FILE = "checksums"
DEFAULT_LOG_CAPACITY = 1024

OUTCOMES = ("ok", "clientFault", "serverFault", "denied")


@dataclass(frozen=True)
class ServiceRecord:
    descriptor: ServiceDescriptor
    wsdl: WsdlDocument
    keySetId: Optional[str]
    createdAt: float

    def __post_init__(self) -> None:
        if self.descriptor.securityEnabled != (self.keySetId is not None):
            raise ValueError("keySetId must be present iff securityEnabled")


@dataclass(frozen=True)
class UserRecord:
    login: str
    salt: bytes
    passwordDigest: bytes
    deviceId: str
    allowedServices: frozenset  # service names, or {"*"}

    def __post_init__(self) -> None:
        object.__setattr__(self, "allowedServices", frozenset(self.allowedServices))


@dataclass(frozen=True)
class RequestLogEntry:
    timestamp: float
    serviceName: str
    methodName: str
    durationMicros: int
    outcome: str

    def __post_init__(self) -> None:
        if self.durationMicros < 0:
            raise ValueError("durationMicros must be >= 0")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")


def password_proof(password: str) -> str:
    """Salt-less digest of the password; what a consumer sends over the wire."""
    return hashlib.sha256(password.encode("utf-8")).hexdigest()


def _stored_digest(salt: bytes, proof_hex: str) -> bytes:
    return hashlib.sha256(salt + bytes.fromhex(proof_hex)).digest()


def make_user(login: str, password: str, device_id: str, allowed_services) -> UserRecord:
    """Create a record with a fresh 16-byte salt; the plaintext never persists."""
    salt = secrets.token_bytes(16)
    return UserRecord(
        login=login,
        salt=salt,
        passwordDigest=_stored_digest(salt, password_proof(password)),
        deviceId=device_id,
        allowedServices=frozenset(allowed_services),
    )


class Registry:
    def __init__(self, log_capacity: int = DEFAULT_LOG_CAPACITY):
        self._lock = threading.RLock()
        self._by_name: dict = {}
        self._by_path: dict = {}
        self._users: dict = {}
        self._log = collections.deque(maxlen=log_capacity)

    # --- services ---------------------------------------------------------

    def register_service(self, rec: ServiceRecord) -> None:
        with self._lock:
            name = rec.descriptor.serviceName
            path = rec.descriptor.endpointPath
            if name in self._by_name:
                raise DuplicateService(f"service already registered: {name}")
            if path in self._by_path:
                raise PathConflict(f"endpoint path already in use: {path}")
            self._by_name[name] = rec
            self._by_path[path] = rec

    def lookup_service(self, name: str) -> ServiceRecord:
        with self._lock:
            try:
                return self._by_name[name]
            except KeyError:
                raise NotFound(f"unknown service: {name}") from None

    def lookup_by_path(self, path: str) -> ServiceRecord:
        with self._lock:
            try:
                return self._by_path[path]
            except KeyError:
                raise NotFound(f"unknown service path: {path}") from None

    def remove_service(self, name: str) -> None:
        with self._lock:
            rec = self._by_name.pop(name, None)
            if rec is None:
                raise NotFound(f"unknown service: {name}")
            self._by_path.pop(rec.descriptor.endpointPath, None)

    def list_services(self) -> list:
        with self._lock:
            return list(self._by_name.values())

    # --- users --------------------------------------------------------------

    def add_user(self, user: UserRecord) -> None:
        with self._lock:
            if user.login in self._users:
                raise DuplicateUser(f"user already exists: {user.login}")
            self._users[user.login] = user

    def get_user(self, login: str) -> Optional[UserRecord]:
        with self._lock:
            return self._users.get(login)

    def list_users(self) -> list:
        with self._lock:
            return list(self._users.values())

    def check_access_proof(self, login: str, proof_hex: str, service_name: str) -> bool:
        user = self.get_user(login)
        if user is None:
            return False
        try:
            derived = _stored_digest(user.salt, proof_hex)
        except ValueError:
            return False
        if not hmac.compare_digest(derived, user.passwordDigest):
            return False
        return "*" in user.allowedServices or service_name in user.allowedServices

    def check_access(self, login: str, password: str, service_name: str) -> bool:
        return self.check_access_proof(login, password_proof(password), service_name)

    # --- request log ----------------------------------------------------------

    def append_log(self, entry: RequestLogEntry) -> None:
        with self._lock:
            self._log.append(entry)

    def log_entries(self) -> list:
        with self._lock:
            return list(self._log)

    def metrics_summary(self) -> dict:
        """Per-service {count, meanDurationMicros, faultRate} over the ring."""
        with self._lock:
            entries = list(self._log)
        summary: dict = {}
        for e in entries:
            s = summary.setdefault(
                e.serviceName, {"count": 0, "_total": 0, "_faults": 0}
            )
            s["count"] += 1
            s["_total"] += e.durationMicros
            if e.outcome in ("clientFault", "serverFault"):
                s["_faults"] += 1
        for s in summary.values():
            s["meanDurationMicros"] = round(s.pop("_total") / s["count"])
            s["faultRate"] = s.pop("_faults") / s["count"]
        return summary

    # --- persistence ------------------------------------------------------------

    def snapshot(self, directory) -> None:
        directory = Path(directory)
        with self._lock:
            services = list(self._by_name.values())
            users = list(self._users.values())
        services_blob = json.dumps(
            {
                "services": [
                    {
                        "descriptor": descriptor_to_dict(r.descriptor),
                        "wsdl": r.wsdl.xmlText.decode("utf-8"),
                        "keySetId": r.keySetId,
                        "createdAt": r.createdAt,
                    }
                    for r in sorted(services, key=lambda r: r.descriptor.serviceName)
                ]
            },
            indent=1,
            sort_keys=True,
        )
        users_blob = json.dumps(
            {
                "users": [
                    {
                        "login": u.login,
                        "salt": u.salt.hex(),
                        "passwordDigest": u.passwordDigest.hex(),
                        "deviceId": u.deviceId,
                        "allowedServices": sorted(u.allowedServices),
                    }
                    for u in sorted(users, key=lambda u: u.login)
                ]
            },
            indent=1,
            sort_keys=True,
        )
        try:
            directory.mkdir(parents=True, exist_ok=True)
            _write_atomic(directory / SERVICES_FILE, services_blob)
            _write_atomic(directory / USERS_FILE, users_blob)
            checks = "".join(
                f"{hashlib.sha256(blob.encode('utf-8')).hexdigest()}  {name}\n"
                for name, blob in ((SERVICES_FILE, services_blob), (USERS_FILE, users_blob))
            )
            _write_atomic(directory / CHECKSUM_FILE, checks)
        except OSError as e:
            raise IoFailure(f"cannot write snapshot in {directory}: {e}") from None

    @classmethod
    def load_snapshot(cls, directory, log_capacity: int = DEFAULT_LOG_CAPACITY) -> "Registry":
        directory = Path(directory)
        reg = cls(log_capacity=log_capacity)
        services_path = directory / SERVICES_FILE
        users_path = directory / USERS_FILE
        if not services_path.exists() and not users_path.exists():
            return reg

        checks = _load_checksums(directory / CHECKSUM_FILE)
        services_blob = _read_checked(services_path, checks)
        users_blob = _read_checked(users_path, checks)

        try:
            for item in json.loads(services_blob)["services"]:
                desc = descriptor_from_dict(item["descriptor"])
                rec = ServiceRecord(
                    descriptor=desc,
                    wsdl=WsdlDocument(
                        xmlText=item["wsdl"].encode("utf-8"), descriptor=desc
                    ),
                    keySetId=item["keySetId"],
                    createdAt=item["createdAt"],
                )
                reg.register_service(rec)
            for item in json.loads(users_blob)["users"]:
                reg.add_user(
                    UserRecord(
                        login=item["login"],
                        salt=bytes.fromhex(item["salt"]),
                        passwordDigest=bytes.fromhex(item["passwordDigest"]),
                        deviceId=item["deviceId"],
                        allowedServices=frozenset(item["allowedServices"]),
                    )
                )
        except (KeyError, ValueError, TypeError) as e:
            raise CorruptSnapshot(f"snapshot tables are unreadable: {e}") from None
        return reg


def _write_atomic(path: Path, content: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    tmp.replace(path)


def _load_checksums(path: Path) -> dict:
    if not path.exists():
        raise CorruptSnapshot("snapshot has tables but no checksums file")
    checks = {}
    try:
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            digest, _, name = line.partition("  ")
            checks[name] = digest
    except OSError as e:
        raise IoFailure(str(e)) from None
    return checks


def _read_checked(path: Path, checks: dict) -> str:
    if not path.exists():
        raise CorruptSnapshot(f"missing snapshot table: {path.name}")
    try:
        blob = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise CorruptSnapshot(f"cannot read {path.name}: {e}") from None
    digest = hashlib.sha256(blob.encode("utf-8")).hexdigest()
    if checks.get(path.name) != digest:
        raise CorruptSnapshot(f"checksum mismatch for {path.name}")
    return blob
