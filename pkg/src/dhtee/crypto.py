"""Signing keys plus the key agreement that feeds post-attestation sessions.

Ed25519 for signatures (32-byte keys, 64-byte signatures), X25519 for key
agreement, HKDF-SHA256 for session derivation and ChaCha20-Poly1305 for
channel traffic. Every key is derived from caller-supplied seed bytes so a
simulation run is reproducible end to end.
"""
from __future__ import annotations

from functools import lru_cache

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .codec import record

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 12
SESSION_INFO = b"dhtee/session/v1"


class MalformedSignature(ValueError):
    pass


class InvalidPublicShare(ValueError):
    pass


class AuthenticationFailure(Exception):
    pass


@record
class SigningKeyPair:
    public: bytes
    secret: bytes

    def __repr__(self):
        return f"SigningKeyPair(public={self.public.hex()[:16]}..)"


@record
class KeyAgreementShare:
    public_share: bytes
    secret_scalar: bytes

    def __repr__(self):
        return f"KeyAgreementShare(public_share={self.public_share.hex()[:16]}..)"


@record
class SessionKey:
    key: bytes
    transcript_hash: bytes


def _raw_public(key) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def _check_seed(seed: bytes) -> bytes:
    if len(seed) != 32:
        raise ValueError(f"seed must be 32 bytes, got {len(seed)}")
    return bytes(seed)


@lru_cache(maxsize=4096)
def _signer(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


@lru_cache(maxsize=4096)
def _verifier(public: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public)


def keygen(seed: bytes) -> SigningKeyPair:
    secret = _check_seed(seed)
    return SigningKeyPair(_raw_public(_signer(secret).public_key()), secret)


def sign(secret: bytes, message: bytes) -> bytes:
    return _signer(secret).sign(message)


@lru_cache(maxsize=65536)
def _verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        _verifier(public).verify(signature, message)
    except InvalidSignature:
        return False
    return True


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid signature on ``message`` under ``public``.

    Raises MalformedSignature when the key or signature has the wrong shape;
    callers at the protocol layer treat that as a failed check (see
    :func:`check_signature`).
    """
    if len(signature) != SIGNATURE_SIZE:
        raise MalformedSignature(f"signature must be {SIGNATURE_SIZE} bytes")
    if len(public) != PUBLIC_KEY_SIZE:
        raise MalformedSignature(f"public key must be {PUBLIC_KEY_SIZE} bytes")
    try:
        return _verify(bytes(public), bytes(message), bytes(signature))
    except ValueError as exc:
        raise MalformedSignature(str(exc)) from exc


def check_signature(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        return verify(public, message, signature)
    except MalformedSignature:
        return False


def ka_generate(seed: bytes) -> KeyAgreementShare:
    secret = _check_seed(seed)
    priv = X25519PrivateKey.from_private_bytes(secret)
    return KeyAgreementShare(_raw_public(priv.public_key()), secret)


def ka_shared(my: KeyAgreementShare, their_public: bytes) -> bytes:
    if len(their_public) != PUBLIC_KEY_SIZE:
        raise InvalidPublicShare(f"share must be {PUBLIC_KEY_SIZE} bytes")
    priv = X25519PrivateKey.from_private_bytes(my.secret_scalar)
    try:
        return priv.exchange(X25519PublicKey.from_public_bytes(bytes(their_public)))
    except ValueError as exc:
        # low-order points yield an all-zero secret
        raise InvalidPublicShare(str(exc)) from exc


def derive_session(shared_secret: bytes, transcript_hash: bytes) -> SessionKey:
    key = HKDF(
        algorithm=hashes.SHA256(), length=32, salt=transcript_hash, info=SESSION_INFO
    ).derive(shared_secret)
    return SessionKey(key, transcript_hash)


def seal(key: SessionKey, nonce: bytes, plaintext: bytes) -> bytes:
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    return ChaCha20Poly1305(key.key).encrypt(nonce, plaintext, key.transcript_hash)


def unseal(key: SessionKey, nonce: bytes, ciphertext: bytes) -> bytes:
    """Inverse of :func:`seal`; raises AuthenticationFailure on any mutation."""
    if len(nonce) != NONCE_SIZE:
        raise AuthenticationFailure("bad nonce length")
    try:
        return ChaCha20Poly1305(key.key).decrypt(nonce, ciphertext, key.transcript_hash)
    except InvalidTag as exc:
        raise AuthenticationFailure("ciphertext failed authentication") from exc
