"""Sealed envelopes, remote-attestation handshake, and session keys.

The untrusted zone only ever sees `SealedEnvelope` bytes: AES-256-GCM over
the payload with the envelope header as associated data.  Session keys are
established by an X25519 key agreement gated on an Ed25519 quote signed by
the attestation root, and exist only in client memory and inside the
boundary process.
"""

from __future__ import annotations

import hashlib
import os
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

ENVELOPE_VERSION = 1
HEADER_LEN = 1 + 16 + 32 + 8 + 12  # version, key_id, client_id_hash, sequence, nonce
TAG_LEN = 16
NONCE_LEN = 12
KEY_ID_LEN = 16
QUOTE_LEN = 32 + 16 + 32 + 64  # measurement, nonce, enclave pubkey, signature

# Direction codes form the top 4 nonce bytes; sequence the bottom 8.
DIR_TO_ENCLAVE = 1
DIR_TO_CLIENT = 2

MAX_SEQUENCE = 2**64 - 1


class SecureChannelError(Exception):
    """Base class for envelope and attestation failures."""


class MalformedEnvelope(SecureChannelError):
    pass


class AuthFailure(SecureChannelError):
    pass


class ReplayDetected(SecureChannelError):
    pass


class UnknownKeyId(SecureChannelError):
    pass


class SequenceExhausted(SecureChannelError):
    pass


class BadSignature(SecureChannelError):
    pass


class MeasurementMismatch(SecureChannelError):
    pass


class StaleNonce(SecureChannelError):
    pass


def client_id_hash(client_id: str) -> bytes:
    return hashlib.sha256(client_id.encode("utf-8")).digest()


@dataclass(frozen=True)
class SealedEnvelope:
    """Binary layout (big-endian): version(1) | key_id(16) | client_id_hash(32)
    | sequence(8) | nonce(12) | ciphertext+tag."""

    version: int
    key_id: bytes
    client_id_hash: bytes
    sequence: int
    nonce: bytes
    ciphertext: bytes

    def header(self) -> bytes:
        return (struct.pack(">B", self.version) + self.key_id + self.client_id_hash
                + struct.pack(">Q", self.sequence) + self.nonce)

    def encode(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def decode(cls, raw: bytes) -> "SealedEnvelope":
        if len(raw) < HEADER_LEN + TAG_LEN:
            raise MalformedEnvelope(f"envelope too short: {len(raw)} bytes")
        version = raw[0]
        if version != ENVELOPE_VERSION:
            raise MalformedEnvelope(f"unsupported envelope version {version}")
        key_id = raw[1:17]
        cid_hash = raw[17:49]
        (sequence,) = struct.unpack(">Q", raw[49:57])
        nonce = raw[57:69]
        return cls(version, key_id, cid_hash, sequence, nonce, raw[69:])

    @property
    def size(self) -> int:
        return HEADER_LEN + len(self.ciphertext)


@dataclass
class SessionKey:
    """256-bit key plus its id; never serialized outside the trusted ends."""

    key: bytes
    key_id: bytes
    established_at: float
    peer_measurement: bytes


def _nonce(direction: int, sequence: int) -> bytes:
    return struct.pack(">I", direction) + struct.pack(">Q", sequence)


def derive_session_key(shared_secret: bytes, measurement: bytes,
                       enclave_pub: bytes, verifier_pub: bytes) -> SessionKey:
    """Keyed derivation bound to the measurement and both ephemeral pubkeys."""
    info = b"cardiogrid-session" + measurement + enclave_pub + verifier_pub
    key = HKDF(algorithm=SHA256(), length=32, salt=None, info=info).derive(shared_secret)
    key_id = hashlib.sha256(b"cardiogrid-key-id" + key).digest()[:KEY_ID_LEN]
    return SessionKey(key=key, key_id=key_id, established_at=time.time(),
                      peer_measurement=measurement)


class SealingContext:
    """Per-(client, direction) sealer with an atomic monotonic sequence.

    Takes the 32-byte client id hash rather than the id itself: the reply
    side of the boundary only ever sees the hash.
    """

    def __init__(self, session: SessionKey, cid_hash: bytes, direction: int,
                 start_sequence: int = 0):
        if len(cid_hash) != 32:
            raise ValueError("cid_hash must be 32 bytes")
        self._session = session
        self._cid_hash = cid_hash
        self._direction = direction
        self._sequence = start_sequence
        self._aead = AESGCM(session.key)
        self._lock = threading.Lock()

    @property
    def last_sequence(self) -> int:
        return self._sequence

    def seal(self, payload: bytes) -> SealedEnvelope:
        with self._lock:
            if self._sequence >= MAX_SEQUENCE:
                raise SequenceExhausted("sequence space exhausted for this key")
            self._sequence += 1
            seq = self._sequence
        nonce = _nonce(self._direction, seq)
        env = SealedEnvelope(ENVELOPE_VERSION, self._session.key_id, self._cid_hash,
                             seq, nonce, b"")
        ciphertext = self._aead.encrypt(nonce, payload, env.header())
        return SealedEnvelope(ENVELOPE_VERSION, self._session.key_id, self._cid_hash,
                              seq, nonce, ciphertext)


class EnvelopeOpener:
    """Holds session keys and per-(key, direction) replay registers."""

    def __init__(self):
        self._keys: dict[bytes, SessionKey] = {}
        self._last_seen: dict[tuple[bytes, int], int] = {}
        self._lock = threading.Lock()

    def add_key(self, session: SessionKey) -> None:
        with self._lock:
            self._keys[session.key_id] = session

    def has_key(self, key_id: bytes) -> bool:
        return key_id in self._keys

    def session_for(self, key_id: bytes) -> Optional[SessionKey]:
        return self._keys.get(key_id)

    def open(self, envelope: SealedEnvelope, direction: int) -> bytes:
        """Return the plaintext iff the tag verifies and the sequence is fresh."""
        session = self._keys.get(envelope.key_id)
        if session is None:
            raise UnknownKeyId(f"no session for key_id {envelope.key_id.hex()[:8]}")
        reg = (envelope.key_id, direction)
        with self._lock:
            last = self._last_seen.get(reg, 0)
        if envelope.sequence <= last:
            raise ReplayDetected(f"sequence {envelope.sequence} <= last seen {last}")
        if envelope.nonce != _nonce(direction, envelope.sequence):
            raise AuthFailure("nonce does not match direction/sequence")
        try:
            payload = AESGCM(session.key).decrypt(envelope.nonce, envelope.ciphertext,
                                                  envelope.header())
        except InvalidTag:
            raise AuthFailure("AEAD tag verification failed") from None
        with self._lock:
            # Re-check under the lock: another thread may have advanced it.
            if envelope.sequence <= self._last_seen.get(reg, 0):
                raise ReplayDetected(f"sequence {envelope.sequence} raced a newer open")
            self._last_seen[reg] = envelope.sequence
        return payload


@dataclass(frozen=True)
class AttestationQuote:
    """Signed code-measurement over a challenge nonce and ephemeral pubkey."""

    measurement: bytes
    challenge_nonce: bytes
    enclave_pubkey: bytes
    signature: bytes

    def encode(self) -> bytes:
        return self.measurement + self.challenge_nonce + self.enclave_pubkey + self.signature

    @classmethod
    def decode(cls, raw: bytes) -> "AttestationQuote":
        if len(raw) != QUOTE_LEN:
            raise MalformedEnvelope(f"quote must be {QUOTE_LEN} bytes, got {len(raw)}")
        return cls(raw[0:32], raw[32:48], raw[48:80], raw[80:144])

    def signed_payload(self) -> bytes:
        return self.measurement + self.challenge_nonce + self.enclave_pubkey


def generate_attestation_root() -> tuple[bytes, bytes]:
    """Create a root signing keypair standing in for the attestation service.

    Returns (private_seed_32, public_32) raw byte strings.
    """
    priv = Ed25519PrivateKey.generate()
    seed = priv.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
    pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return seed, pub


def attest(root_private: bytes, measurement: bytes, challenge_nonce: bytes,
           verifier_pubkey: bytes) -> tuple[AttestationQuote, SessionKey]:
    """Enclave side: produce a quote over the fresh nonce and derive the key.

    A fresh X25519 keypair is generated per call, so two quotes for the same
    measurement never share a signature.
    """
    if len(challenge_nonce) != 16:
        raise ValueError("challenge nonce must be 16 bytes")
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    signer = Ed25519PrivateKey.from_private_bytes(root_private)
    quote = AttestationQuote(measurement, challenge_nonce, eph_pub, b"")
    signature = signer.sign(quote.signed_payload())
    quote = AttestationQuote(measurement, challenge_nonce, eph_pub, signature)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(verifier_pubkey))
    session = derive_session_key(shared, measurement, eph_pub, verifier_pubkey)
    return quote, session


def verify_quote(quote: AttestationQuote, expected_measurement: bytes,
                 issued_nonce: bytes, root_public: bytes,
                 verifier_private: X25519PrivateKey) -> SessionKey:
    """Verifier side: check signature, measurement, and nonce, then derive.

    The three failure modes raise distinct exceptions so logs can tell a
    forged quote from stale or mismatched code identity.
    """
    try:
        Ed25519PublicKey.from_public_bytes(root_public).verify(
            quote.signature, quote.signed_payload())
    except InvalidSignature:
        raise BadSignature("quote not signed by the attestation root") from None
    if quote.measurement != expected_measurement:
        raise MeasurementMismatch(
            f"measurement {quote.measurement.hex()[:12]} != expected "
            f"{expected_measurement.hex()[:12]}")
    if quote.challenge_nonce != issued_nonce:
        raise StaleNonce("quote does not echo the issued challenge nonce")
    verifier_pub = verifier_private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = verifier_private.exchange(X25519PublicKey.from_public_bytes(quote.enclave_pubkey))
    return derive_session_key(shared, quote.measurement, quote.enclave_pubkey, verifier_pub)


def new_challenge() -> bytes:
    return os.urandom(16)
