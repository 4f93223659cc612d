"""Ledger value types: identities, blocks, channels and their world state.

Canonical block encoding (little-endian):

    u8   block type (0 genesis, 1 local, 2 global)
    u16  channel id length, then UTF-8 channel id
    i64  round
    16B  creator id
    32B  parent hash
    u64  n_k
    u32  payload length, then payload as f8 values in flattening order
    u32  meta length, then canonical JSON (0 length means no meta)
    u64  logical timestamp
    64B  Ed25519 signature

The block hash is SHA-256 over the whole encoding. The signature covers the
same fields minus parent hash, timestamp and the signature itself, because
clients sign before the orderer places the block.
"""

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from app.core.errors import LedgerFormatError, NumericError, RejectedInputError
from app.models.nn import GradientVector, ModelParams, ModelSpec
from app.schemas.experiment import ChannelHyperparams

ID_BYTES = 16
HASH_BYTES = 32
SIGNATURE_BYTES = 64
ZERO_HASH = bytes(HASH_BYTES)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


class BlockType(IntEnum):
    genesis = 0
    local = 1
    global_ = 2

    @property
    def label(self) -> str:
        return "global" if self is BlockType.global_ else self.name


@dataclass(frozen=True, eq=False)
class Identity:
    """A network member. Only the owner holds the signing key."""

    id: bytes
    signing_key: Ed25519PrivateKey
    role: str = "client"

    @property
    def verify_key(self) -> Ed25519PublicKey:
        return self.signing_key.public_key()

    @property
    def hex(self) -> str:
        return self.id.hex()

    def sign(self, message: bytes) -> bytes:
        return self.signing_key.sign(message)


def verify_signature(public_key: Ed25519PublicKey, signature: bytes, message: bytes) -> bool:
    try:
        public_key.verify(signature, message)
        return True
    except InvalidSignature:
        return False


@dataclass(frozen=True, eq=False)
class Block:
    block_type: BlockType
    channel_id: str
    round: int
    creator: bytes
    payload: GradientVector
    n_k: int = 0
    meta: Optional[Dict[str, Any]] = None
    parent_hash: bytes = ZERO_HASH
    timestamp: int = 0
    signature: bytes = bytes(SIGNATURE_BYTES)

    def _body(self, include_placement: bool) -> bytes:
        channel = self.channel_id.encode("utf-8")
        meta = canonical_json(self.meta).encode("utf-8") if self.meta is not None else b""
        payload = np.asarray(self.payload.values, dtype="<f8").tobytes()
        parts = [
            struct.pack("<BH", int(self.block_type), len(channel)),
            channel,
            struct.pack("<q", self.round),
            self.creator,
        ]
        if include_placement:
            parts.append(self.parent_hash)
        parts += [
            struct.pack("<QI", self.n_k, len(self.payload)),
            payload,
            struct.pack("<I", len(meta)),
            meta,
        ]
        if include_placement:
            parts.append(struct.pack("<Q", self.timestamp))
        return b"".join(parts)

    def signing_bytes(self) -> bytes:
        return self._body(include_placement=False)

    def encode(self) -> bytes:
        return self._body(include_placement=True) + self.signature

    @property
    def hash(self) -> bytes:
        return hashlib.sha256(self.encode()).digest()

    def signed_by(self, identity: Identity) -> "Block":
        return replace(self, creator=identity.id, signature=identity.sign(self.signing_bytes()))

    def placed(self, parent_hash: bytes, timestamp: int) -> "Block":
        return replace(self, parent_hash=parent_hash, timestamp=timestamp)

    @classmethod
    def decode(cls, data: bytes, spec_fingerprint: str, block_index: Optional[int] = None) -> "Block":
        """Parse one canonical encoding; the whole buffer must be consumed."""
        try:
            offset = 0
            type_code, channel_len = struct.unpack_from("<BH", data, offset)
            offset += 3
            block_type = BlockType(type_code)
            channel_id = data[offset:offset + channel_len].decode("utf-8")
            if len(channel_id.encode("utf-8")) != channel_len:
                raise ValueError("truncated channel id")
            offset += channel_len
            (round_index,) = struct.unpack_from("<q", data, offset)
            offset += 8
            creator = data[offset:offset + ID_BYTES]
            parent_hash = data[offset + ID_BYTES:offset + ID_BYTES + HASH_BYTES]
            offset += ID_BYTES + HASH_BYTES
            n_k, payload_len = struct.unpack_from("<QI", data, offset)
            offset += 12
            payload_end = offset + 8 * payload_len
            if payload_end > len(data):
                raise ValueError("truncated payload")
            values = np.frombuffer(data[offset:payload_end], dtype="<f8").astype(np.float64)
            offset = payload_end
            (meta_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            meta_bytes = data[offset:offset + meta_len]
            if len(meta_bytes) != meta_len:
                raise ValueError("truncated meta")
            meta = json.loads(meta_bytes.decode("utf-8")) if meta_len else None
            offset += meta_len
            (timestamp,) = struct.unpack_from("<Q", data, offset)
            offset += 8
            signature = data[offset:offset + SIGNATURE_BYTES]
            offset += SIGNATURE_BYTES
            if offset != len(data) or len(signature) != SIGNATURE_BYTES:
                raise ValueError("frame length does not match its contents")
            payload = GradientVector(values, spec_fingerprint)
        except (struct.error, ValueError, NumericError, UnicodeDecodeError) as e:
            raise LedgerFormatError(f"malformed block: {e}", block_index=block_index) from e
        block = cls(
            block_type=block_type,
            channel_id=channel_id,
            round=round_index,
            creator=creator,
            payload=payload,
            n_k=n_k,
            meta=meta,
            parent_hash=parent_hash,
            timestamp=timestamp,
            signature=signature,
        )
        try:
            canonical = block.encode()
        except ValueError as e:
            raise LedgerFormatError(f"malformed block meta: {e}", block_index=block_index) from e
        if canonical != data:
            raise LedgerFormatError("block encoding is not canonical", block_index=block_index)
        return block


@dataclass
class WorldState:
    global_params: ModelParams
    queued_local: int = 0
    last_global_index: int = 0


@dataclass
class Channel:
    """One FL task with its own append-only chain."""

    channel_id: str
    model_spec: ModelSpec
    hyperparams: ChannelHyperparams
    chain: List[Block]
    world_state: WorldState
    _pending: List[Tuple[int, Block]] = field(default_factory=list, repr=False)
    _counter: int = field(default=0, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def descriptor(self) -> Dict[str, Any]:
        return {
            "channel_id": self.channel_id,
            "model_spec": self.model_spec.to_dict(),
            "hyperparams": self.hyperparams.model_dump(mode="json"),
        }

    @property
    def descriptor_sha256(self) -> str:
        return descriptor_digest(self.descriptor)

    @property
    def head_hash(self) -> bytes:
        return self.chain[-1].hash

    @property
    def queue_length(self) -> int:
        with self._lock:
            return len(self._pending)

    def enqueue(self, block: Block) -> int:
        with self._lock:
            self._counter += 1
            self._pending.append((self._counter, block))
            return len(self._pending)

    def drain(self) -> List[Tuple[int, Block]]:
        with self._lock:
            pending, self._pending = self._pending, []
            return pending

    def queued_local_blocks(self) -> List[Block]:
        """Committed local blocks not yet consumed by a global block."""
        return [
            b for b in self.chain[self.world_state.last_global_index + 1:]
            if b.block_type == BlockType.local
        ]

    def global_blocks(self) -> List[Block]:
        return [b for b in self.chain if b.block_type != BlockType.local]


def descriptor_digest(descriptor: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(descriptor).encode("utf-8")).hexdigest()


def params_from_block(block: Block, spec: ModelSpec) -> ModelParams:
    if block.block_type == BlockType.local:
        raise RejectedInputError("local blocks carry updates, not model parameters")
    return ModelParams(spec, block.payload.values)
