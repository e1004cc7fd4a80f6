"""Message-level security: per-service RSA keypairs, detached body
signatures, hybrid encryption and self-signed textual certificates.

The certificate is a text rendering, not DER: fields are printed in a
fixed line order (banner, type, serial as colon-separated octets,
subject and issuer DNs, start and final dates, RSA modulus and exponent
as decimal digit runs, then the self-signature). The rendering is
bit-exact and parses back to an equal certificate.
"""

from __future__ import annotations

import base64
import os
import stat
import time
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.exceptions import InvalidSignature

from .errors import DecryptFailure, IoFailure, MalformedSignature

SIGNATURE_ALGORITHM = "RSA-SHA256"
DIGEST_ALGORITHM = "SHA-256"
ALLOWED_KEY_BITS = (2048, 3072, 4096)
DEFAULT_VALIDITY_DAYS = 10

_DAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun",
           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
_DIGIT_WRAP = 43  # digits per line in modulus/signature runs


@dataclass(frozen=True)
class KeyPair:
    publicKey: rsa.RSAPublicKey
    privateKey: rsa.RSAPrivateKey
    bits: int

    @property
    def modulus(self) -> int:
        return self.publicKey.public_numbers().n

    @property
    def exponent(self) -> int:
        return self.publicKey.public_numbers().e


@dataclass(frozen=True)
class SignatureBlock:
    algorithm: str
    digestAlgorithm: str
    value: str  # base64


@dataclass(frozen=True)
class CipherEnvelope:
    wrappedKey: str  # base64, session key under recipient public key
    iv: str  # base64
    ciphertext: str  # base64


@dataclass(frozen=True)
class Certificate:
    versionLabel: str  # literal "X.509v1"
    serial: bytes
    subjectDN: str
    issuerDN: str
    notBefore: datetime  # UTC, second resolution
    notAfter: datetime
    modulus: int
    exponent: int
    signatureAlgorithm: str  # "RSA"
    signature: bytes

    def public_key(self) -> rsa.RSAPublicKey:
        return rsa.RSAPublicNumbers(self.exponent, self.modulus).public_key()


def generate_keypair(bits: int = 2048) -> KeyPair:
    if bits not in ALLOWED_KEY_BITS:
        raise ValueError(f"key size must be one of {ALLOWED_KEY_BITS}")
    priv = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    return KeyPair(publicKey=priv.public_key(), privateKey=priv, bits=bits)


def sign_message(message: bytes, private_key: rsa.RSAPrivateKey) -> SignatureBlock:
    sig = private_key.sign(message, padding.PKCS1v15(), hashes.SHA256())
    return SignatureBlock(
        algorithm=SIGNATURE_ALGORITHM,
        digestAlgorithm=DIGEST_ALGORITHM,
        value=base64.b64encode(sig).decode("ascii"),
    )


def verify_signature(
    message: bytes, sig: SignatureBlock, public_key: rsa.RSAPublicKey
) -> bool:
    try:
        raw = base64.b64decode(sig.value, validate=True)
    except Exception:
        raise MalformedSignature("signature value is not valid base64") from None
    try:
        public_key.verify(raw, message, padding.PKCS1v15(), hashes.SHA256())
        return True
    except InvalidSignature:
        return False


def encrypt_message(plaintext: bytes, recipient: rsa.RSAPublicKey) -> CipherEnvelope:
    """Hybrid scheme: fresh AES-256-GCM session key per message, wrapped
    under the recipient's public key with OAEP."""
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    session_key = os.urandom(32)
    iv = os.urandom(12)
    ciphertext = AESGCM(session_key).encrypt(iv, plaintext, None)
    wrapped = recipient.encrypt(
        session_key,
        padding.OAEP(
            mgf=padding.MGF1(algorithm=hashes.SHA256()),
            algorithm=hashes.SHA256(),
            label=None,
        ),
    )
    b64 = lambda b: base64.b64encode(b).decode("ascii")
    return CipherEnvelope(wrappedKey=b64(wrapped), iv=b64(iv), ciphertext=b64(ciphertext))


def decrypt_message(env: CipherEnvelope, private_key: rsa.RSAPrivateKey) -> bytes:
    try:
        wrapped = base64.b64decode(env.wrappedKey, validate=True)
        iv = base64.b64decode(env.iv, validate=True)
        ciphertext = base64.b64decode(env.ciphertext, validate=True)
        session_key = private_key.decrypt(
            wrapped,
            padding.OAEP(
                mgf=padding.MGF1(algorithm=hashes.SHA256()),
                algorithm=hashes.SHA256(),
                label=None,
            ),
        )
        return AESGCM(session_key).decrypt(iv, ciphertext, None)
    except Exception:
        raise DecryptFailure() from None


# --- certificates ----------------------------------------------------------


def _format_cert_date(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    return (
        f"{_DAYS[dt.weekday()]} {_MONTHS[dt.month - 1]} {dt.day:02d} "
        f"{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d} UTC {dt.year}"
    )


def _parse_cert_date(text: str) -> datetime:
    parts = text.split()
    if len(parts) != 6 or parts[4] != "UTC" or parts[1] not in _MONTHS:
        raise ValueError(f"bad certificate date: {text!r}")
    month = _MONTHS.index(parts[1]) + 1
    hh, mm, ss = (int(x) for x in parts[3].split(":"))
    return datetime(int(parts[5]), month, int(parts[2]), hh, mm, ss, tzinfo=timezone.utc)


def _wrap_digits(number: int) -> str:
    digits = str(number)
    return "\n".join(
        digits[i : i + _DIGIT_WRAP] for i in range(0, len(digits), _DIGIT_WRAP)
    )


def _tbs_text(cert_fields: dict) -> str:
    """The byte-stable field rendering the self-signature covers."""
    return (
        f"Type: {cert_fields['versionLabel']}\n"
        f"Serial number: {_serial_text(cert_fields['serial'])}\n"
        f"SubjectDN: {cert_fields['subjectDN']}\n"
        f"IssuerDN: {cert_fields['issuerDN']}\n"
        f"Start Date: {_format_cert_date(cert_fields['notBefore'])}\n"
        f"Final Date: {_format_cert_date(cert_fields['notAfter'])}\n"
        f"Public Key: RSA\n"
        f"modulus:\n{_wrap_digits(cert_fields['modulus'])}\n"
        f"public exponent:{cert_fields['exponent']}\n"
        f"Signature Algorithm: RSA"
    )


def _serial_text(serial: bytes) -> str:
    return ":".join(f"{b:02x}" for b in serial)


def make_serial(now_ms: int | None = None) -> bytes:
    """Serial = ASCII bytes of a decimal token derived from the clock."""
    if now_ms is None:
        now_ms = time.time_ns() // 1_000_000
    return str(now_ms % 1_000_000).encode("ascii")


def issue_certificate(
    kp: KeyPair,
    subjectDN: str,
    validityDays: int = DEFAULT_VALIDITY_DAYS,
    *,
    not_before: datetime | None = None,
    serial: bytes | None = None,
) -> Certificate:
    """Issue a self-signed certificate over the keypair's public half."""
    if validityDays < 1:
        raise ValueError("validityDays must be >= 1")
    if not_before is None:
        not_before = datetime.now(timezone.utc).replace(microsecond=0)
    not_after = not_before + timedelta(days=validityDays)
    fields = {
        "versionLabel": "X.509v1",
        "serial": serial if serial is not None else make_serial(),
        "subjectDN": subjectDN,
        "issuerDN": subjectDN,
        "notBefore": not_before,
        "notAfter": not_after,
        "modulus": kp.modulus,
        "exponent": kp.exponent,
    }
    sig = kp.privateKey.sign(
        _tbs_text(fields).encode("utf-8"), padding.PKCS1v15(), hashes.SHA256()
    )
    return Certificate(
        versionLabel=fields["versionLabel"],
        serial=fields["serial"],
        subjectDN=subjectDN,
        issuerDN=subjectDN,
        notBefore=not_before,
        notAfter=not_after,
        modulus=kp.modulus,
        exponent=kp.exponent,
        signatureAlgorithm="RSA",
        signature=sig,
    )


def verify_certificate(cert: Certificate) -> bool:
    """Check the self-signature under the embedded public key."""
    fields = {
        "versionLabel": cert.versionLabel,
        "serial": cert.serial,
        "subjectDN": cert.subjectDN,
        "issuerDN": cert.issuerDN,
        "notBefore": cert.notBefore,
        "notAfter": cert.notAfter,
        "modulus": cert.modulus,
        "exponent": cert.exponent,
    }
    try:
        cert.public_key().verify(
            cert.signature,
            _tbs_text(fields).encode("utf-8"),
            padding.PKCS1v15(),
            hashes.SHA256(),
        )
        return True
    except InvalidSignature:
        return False


def render_certificate_text(cert: Certificate) -> str:
    fields = {
        "versionLabel": cert.versionLabel,
        "serial": cert.serial,
        "subjectDN": cert.subjectDN,
        "issuerDN": cert.issuerDN,
        "notBefore": cert.notBefore,
        "notAfter": cert.notAfter,
        "modulus": cert.modulus,
        "exponent": cert.exponent,
    }
    sig_number = int.from_bytes(cert.signature, "big")
    return (
        "----- Begin Certificate -----\n"
        + _tbs_text(fields)
        + "\n"
        + f"Signature:\n{_wrap_digits(sig_number)}\n"
        + "----- End Certificate -----\n"
    )


def parse_certificate_text(text: str) -> Certificate:
    """Companion parser for render_certificate_text output."""
    lines = text.strip().splitlines()
    if not lines or lines[0] != "----- Begin Certificate -----":
        raise ValueError("missing certificate banner")
    if lines[-1] != "----- End Certificate -----":
        raise ValueError("missing end banner")

    def take(prefix: str, line: str) -> str:
        if not line.startswith(prefix):
            raise ValueError(f"expected {prefix!r}, got {line!r}")
        return line[len(prefix):]

    i = 1
    version = take("Type: ", lines[i]); i += 1
    serial_hex = take("Serial number: ", lines[i]); i += 1
    serial = bytes(int(t, 16) for t in serial_hex.split(":")) if serial_hex else b""
    subject = take("SubjectDN: ", lines[i]); i += 1
    issuer = take("IssuerDN: ", lines[i]); i += 1
    start = _parse_cert_date(take("Start Date: ", lines[i])); i += 1
    final = _parse_cert_date(take("Final Date: ", lines[i])); i += 1
    take("Public Key: RSA", lines[i]); i += 1
    take("modulus:", lines[i]); i += 1
    modulus_digits = []
    while i < len(lines) and lines[i].isdigit():
        modulus_digits.append(lines[i]); i += 1
    exponent = int(take("public exponent:", lines[i])); i += 1
    take("Signature Algorithm: RSA", lines[i]); i += 1
    take("Signature:", lines[i]); i += 1
    sig_digits = []
    while i < len(lines) and lines[i].isdigit():
        sig_digits.append(lines[i]); i += 1
    if not modulus_digits or not sig_digits:
        raise ValueError("certificate is missing modulus or signature digits")
    modulus = int("".join(modulus_digits))
    sig_number = int("".join(sig_digits))
    key_bytes = (modulus.bit_length() + 7) // 8
    return Certificate(
        versionLabel=version,
        serial=serial,
        subjectDN=subject,
        issuerDN=issuer,
        notBefore=start,
        notAfter=final,
        modulus=modulus,
        exponent=exponent,
        signatureAlgorithm="RSA",
        signature=sig_number.to_bytes(key_bytes, "big"),
    )


# --- key store ---------------------------------------------------------------


class KeyStore:
    """Directory of per-service key material: <name>.key (restricted
    private PEM) and <name>.cert (certificate text)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _key_path(self, name: str) -> Path:
        return self.directory / f"{name}.key"

    def _cert_path(self, name: str) -> Path:
        return self.directory / f"{name}.cert"

    def has(self, name: str) -> bool:
        return self._key_path(name).exists() and self._cert_path(name).exists()

    def save(self, name: str, kp: KeyPair, cert: Certificate) -> None:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            pem = kp.privateKey.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
            key_path = self._key_path(name)
            key_path.write_bytes(pem)
            os.chmod(key_path, stat.S_IRUSR | stat.S_IWUSR)
            self._cert_path(name).write_text(render_certificate_text(cert))
        except OSError as e:
            raise IoFailure(f"cannot write key material for {name}: {e}") from None

    def load(self, name: str) -> tuple:
        try:
            pem = self._key_path(name).read_bytes()
            cert_text = self._cert_path(name).read_text()
        except OSError as e:
            raise IoFailure(f"cannot read key material for {name}: {e}") from None
        priv = serialization.load_pem_private_key(pem, password=None)
        cert = parse_certificate_text(cert_text)
        kp = KeyPair(publicKey=priv.public_key(), privateKey=priv, bits=priv.key_size)
        return kp, cert
