"""Channel persistence file.

Layout (little-endian):

    "BEAS"  magic
    u16     format version
    u32     descriptor length, then canonical JSON channel descriptor
    u32     member count, then per member: 16B id, 32B raw Ed25519 public key, u8 role
    frames  u32 length + canonical block encoding, in chain order, until EOF

The header is not signed itself. The genesis block commits to the descriptor
digest and every genesis or global block to the member-table digest.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from pydantic import ValidationError

from app.core.errors import BeasError, LedgerFormatError
from app.models.ledger import ID_BYTES, Block, Channel, canonical_json
from app.models.nn import ModelSpec
from app.schemas.experiment import ChannelHyperparams
from app.services.ledger_service import ROLES, LedgerService, member_table_bytes, replay_world_state

logger = logging.getLogger(__name__)

MAGIC = b"BEAS"
FORMAT_VERSION = 1
LEDGER_SUFFIX = ".beas"
KEY_BYTES = 32
MEMBER_ENTRY_BYTES = ID_BYTES + KEY_BYTES + 1


def encode_channel(channel: Channel, network: LedgerService) -> bytes:
    descriptor = canonical_json(channel.descriptor).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(descriptor)), descriptor]
    parts += [struct.pack("<I", len(network.members)), member_table_bytes(network.members, network.roles)]
    for block in channel.chain:
        encoded = block.encode()
        parts += [struct.pack("<I", len(encoded)), encoded]
    return b"".join(parts)


def save_channel(channel: Channel, network: LedgerService, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_channel(channel, network))
    logger.info(f"Wrote ledger for channel '{channel.channel_id}' to {path} ({len(channel.chain)} blocks)")
    return path


def decode_channel(data: bytes) -> Tuple[LedgerService, Channel]:
    """Rebuild a channel and its membership registry from file bytes."""
    if data[:4] != MAGIC:
        raise LedgerFormatError("bad magic, not a BEAS ledger file")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise LedgerFormatError(f"unsupported ledger format version {version}")
        offset = 6
        (descriptor_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        raw_descriptor = data[offset:offset + descriptor_len]
        descriptor = json.loads(raw_descriptor.decode("utf-8"))
        offset += descriptor_len
        spec = ModelSpec.from_dict(descriptor["model_spec"])
        hyperparams = ChannelHyperparams.model_validate(descriptor["hyperparams"])
        channel_id = descriptor["channel_id"]

        network = LedgerService()
        (n_members,) = struct.unpack_from("<I", data, offset)
        offset += 4
        table = data[offset:offset + n_members * MEMBER_ENTRY_BYTES]
        if len(table) != n_members * MEMBER_ENTRY_BYTES:
            raise LedgerFormatError("truncated member table")
        for start in range(0, len(table), MEMBER_ENTRY_BYTES):
            member_id = table[start:start + ID_BYTES]
            raw_key = table[start + ID_BYTES:start + ID_BYTES + KEY_BYTES]
            role = table[start + ID_BYTES + KEY_BYTES]
            network.add_member(member_id, Ed25519PublicKey.from_public_bytes(raw_key), ROLES[role])
        offset += len(table)
        if member_table_bytes(network.members, network.roles) != table:
            raise LedgerFormatError("member table is not sorted or repeats an id")
    except LedgerFormatError:
        raise
    except (
        struct.error, ValueError, KeyError, TypeError, IndexError, AttributeError, ValidationError, BeasError
    ) as e:
        raise LedgerFormatError(f"malformed ledger header: {e}") from e

    chain = []
    while offset < len(data):
        index = len(chain)
        if offset + 4 > len(data):
            raise LedgerFormatError("truncated frame length", block_index=index)
        (frame_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        frame = data[offset:offset + frame_len]
        if len(frame) != frame_len:
            raise LedgerFormatError("truncated block frame", block_index=index)
        chain.append(Block.decode(frame, spec.fingerprint, block_index=index))
        offset += frame_len

    try:
        world_state = replay_world_state(channel_id, spec, chain)
    except BeasError as e:
        raise LedgerFormatError(str(e), block_index=0) from e
    channel = Channel(
        channel_id=channel_id,
        model_spec=spec,
        hyperparams=hyperparams,
        chain=chain,
        world_state=world_state,
    )
    if canonical_json(channel.descriptor).encode("utf-8") != raw_descriptor:
        raise LedgerFormatError("channel descriptor does not re-encode to the stored bytes")
    network.attach_channel(channel)
    return network, channel


def load_channel(path: Union[str, Path]) -> Tuple[LedgerService, Channel]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        logger.error(f"Error reading ledger {path}: {e}")
        raise
    return decode_channel(data)
