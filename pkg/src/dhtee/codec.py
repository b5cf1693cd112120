"""Canonical byte encoding plus the SHA-256 Merkle tree built on it.

Byte layout
-----------
Every signed or hashed record is encoded by :func:`encode`:

* a record (any class decorated with :func:`record`) encodes as the
  length-prefixed class name followed by each field, in declaration order,
  each length-prefixed;
* a length prefix is 4 bytes, big-endian; the reserved prefix
  ``0xFFFFFFFF`` marks an absent (``None``) field and carries no body;
* ``bytes`` encode as themselves, ``str`` as UTF-8, ``bool`` as one byte,
  ``int`` as 8 bytes big-endian two's complement, enums by their value;
* sequences encode as a 4-byte element count followed by each element,
  length-prefixed. An empty sequence is therefore ``00 00 00 00``;
* mappings encode as a 4-byte entry count followed by length-prefixed
  key/value pairs sorted by encoded key.

Merkle trees hash pairs as ``sha256(left || right)`` with no domain prefix.
A level with an odd number of nodes pairs its last node with itself.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
from typing import Iterable, Sequence

DIGEST_SIZE = 32
ABSENT = 0xFFFFFFFF

RECORD_TYPES: dict[str, type] = {}


class EmptyLeaves(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


def record(cls=None, *, frozen: bool = True):
    """Class decorator: make ``cls`` a dataclass and register it for encoding."""

    def wrap(c):
        c = dataclasses.dataclass(frozen=frozen)(c)
        RECORD_TYPES[c.__name__] = c
        return c

    return wrap if cls is None else wrap(cls)


def _prefix(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


def _field(value) -> bytes:
    if value is None:
        return struct.pack(">I", ABSENT)
    return _prefix(encode(value))


def encode(value) -> bytes:
    """Deterministic, injective encoding of a registered record or primitive."""
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        name = type(value).__name__
        if RECORD_TYPES.get(name) is not type(value):
            raise TypeError(f"{name} is not a registered record type")
        parts = [_prefix(name.encode())]
        parts.extend(_field(getattr(value, f.name)) for f in dataclasses.fields(value))
        return b"".join(parts)
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value)
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, bool):
        return b"\x01" if value else b"\x00"
    if isinstance(value, enum.Enum):
        return encode(value.value)
    if isinstance(value, int):
        return value.to_bytes(8, "big", signed=True)
    if isinstance(value, (list, tuple)):
        return struct.pack(">I", len(value)) + b"".join(_field(v) for v in value)
    if isinstance(value, dict):
        items = sorted((encode(k), v) for k, v in value.items())
        return struct.pack(">I", len(items)) + b"".join(
            _prefix(k) + _field(v) for k, v in items
        )
    raise TypeError(f"cannot encode {type(value).__name__}")


def hash_of(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest(value) -> bytes:
    """``hash_of(encode(value))``."""
    return hash_of(encode(value))


@record
class MerkleStep:
    sibling: bytes
    sibling_on_left: bool


@record
class MerkleProof:
    leaf_index: int
    path: tuple[MerkleStep, ...]
    root: bytes


def _next_level(level: Sequence[bytes]) -> list[bytes]:
    out = []
    for i in range(0, len(level), 2):
        left = level[i]
        right = level[i + 1] if i + 1 < len(level) else left
        out.append(hash_of(left + right))
    return out


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        raise EmptyLeaves("merkle_root needs at least one leaf")
    level = list(leaves)
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


def merkle_prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise IndexOutOfRange(f"leaf index {index} outside 0..{len(leaves) - 1}")
    level = list(leaves)
    pos = index
    path = []
    while len(level) > 1:
        if pos % 2:
            path.append(MerkleStep(level[pos - 1], True))
        else:
            sib = level[pos + 1] if pos + 1 < len(level) else level[pos]
            path.append(MerkleStep(sib, False))
        level = _next_level(level)
        pos //= 2
    return MerkleProof(index, tuple(path), level[0])


def verify_merkle(proof: MerkleProof, leaf: bytes) -> bool:
    """Fold ``leaf`` along ``proof.path`` and compare with ``proof.root``.

    Side flags must agree with the bits of ``leaf_index``; otherwise the
    self-paired node of an odd level would verify with either flag.
    """
    if proof.leaf_index < 0 or proof.leaf_index >> len(proof.path):
        return False
    cur = leaf
    for depth, step in enumerate(proof.path):
        if step.sibling_on_left != bool((proof.leaf_index >> depth) & 1):
            return False
        if len(step.sibling) != DIGEST_SIZE:
            return False
        cur = hash_of(step.sibling + cur) if step.sibling_on_left else hash_of(cur + step.sibling)
    return cur == proof.root


def tree_depth(leaf_count: int) -> int:
    return (leaf_count - 1).bit_length() if leaf_count > 0 else 0


def concat_digests(parts: Iterable[bytes]) -> bytes:
    return hash_of(b"".join(parts))
