"""In-process permissioned ledger: membership, endorsement, ordering, commitment."""

import hashlib
import logging
import struct
import threading
from typing import Dict, List, Optional

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from app.core.errors import DuplicateChannelError, EndorsementError, RejectedInputError
from app.models.ledger import (
    ID_BYTES,
    ZERO_HASH,
    Block,
    BlockType,
    Channel,
    Identity,
    WorldState,
    params_from_block,
    verify_signature,
)
from app.models.nn import GradientVector, ModelParams, ModelSpec
from app.schemas.experiment import ChannelHyperparams
from app.schemas.ledger import BlockSummary, ChainAudit, ChannelSummary

logger = logging.getLogger(__name__)

ROLES = ("client", "peer")


def member_table_bytes(members: Dict[bytes, Ed25519PublicKey], roles: Dict[bytes, str]) -> bytes:
    """Sorted membership entries: 16B id, 32B raw public key, u8 role index."""
    parts = []
    for member_id in sorted(members):
        raw_key = members[member_id].public_bytes(Encoding.Raw, PublicFormat.Raw)
        parts += [member_id, raw_key, struct.pack("<B", ROLES.index(roles.get(member_id, "client")))]
    return b"".join(parts)


def member_table_digest(members: Dict[bytes, Ed25519PublicKey], roles: Dict[bytes, str]) -> str:
    return hashlib.sha256(member_table_bytes(members, roles)).hexdigest()


class LedgerService:
    """A network of registered members and the channels they share."""

    def __init__(self):
        self.members: Dict[bytes, Ed25519PublicKey] = {}
        self.roles: Dict[bytes, str] = {}
        self.channels: Dict[str, Channel] = {}
        self._registry_lock = threading.Lock()

    def register_identity(self, rng: np.random.Generator, role: str = "client") -> Identity:
        """Fresh Ed25519 keypair and unique 16-byte id, both drawn from `rng`."""
        with self._registry_lock:
            while True:
                member_id = rng.bytes(ID_BYTES)
                if member_id not in self.members:
                    break
            identity = Identity(member_id, Ed25519PrivateKey.from_private_bytes(rng.bytes(32)), role)
            self.members[member_id] = identity.verify_key
            self.roles[member_id] = role
        logger.debug(f"Registered {role} {identity.hex}")
        return identity

    def add_member(self, member_id: bytes, public_key: Ed25519PublicKey, role: str = "client") -> None:
        """Record a member known only by its public key (ledger reload)."""
        self.members[member_id] = public_key
        self.roles[member_id] = role

    def is_member(self, member_id: bytes) -> bool:
        return member_id in self.members

    @property
    def members_sha256(self) -> str:
        return member_table_digest(self.members, self.roles)

    def create_channel(
        self,
        channel_id: str,
        spec: ModelSpec,
        hyperparams: ChannelHyperparams,
        creator: Identity,
        genesis_params: ModelParams,
    ) -> Channel:
        """
        Set up a channel and commit its genesis block.

        Args:
            channel_id: Unique channel name
            spec: Model architecture for the task
            hyperparams: Training parameters fixed for the channel
            creator: Registered identity uploading the initial model
            genesis_params: Initial global model

        Returns:
            The channel, with world_state.global_params = genesis_params
        """
        if channel_id in self.channels:
            raise DuplicateChannelError(f"channel '{channel_id}' already exists")
        if not self.is_member(creator.id):
            raise EndorsementError(f"creator {creator.hex} is not registered")
        if genesis_params.fingerprint != spec.fingerprint:
            raise RejectedInputError("genesis parameters do not match the channel spec")

        channel = Channel(
            channel_id=channel_id,
            model_spec=spec,
            hyperparams=hyperparams,
            chain=[],
            world_state=WorldState(global_params=genesis_params),
        )
        genesis = Block(
            block_type=BlockType.genesis,
            channel_id=channel_id,
            round=0,
            creator=creator.id,
            payload=genesis_params.as_vector(),
            meta={"descriptor_sha256": channel.descriptor_sha256, "members_sha256": self.members_sha256},
        ).signed_by(creator)
        channel.chain.append(genesis.placed(ZERO_HASH, 0))
        self.channels[channel_id] = channel
        logger.info(f"Created channel '{channel_id}' ({spec.parameter_count} parameters)")
        return channel

    def attach_channel(self, channel: Channel) -> None:
        if channel.channel_id in self.channels:
            raise DuplicateChannelError(f"channel '{channel.channel_id}' already exists")
        self.channels[channel.channel_id] = channel

    def _endorse(self, channel: Channel, block: Block) -> None:
        """Endorsement policy: known creator, matching shape, valid signature."""
        if block.channel_id != channel.channel_id:
            raise EndorsementError(f"block addressed to channel '{block.channel_id}'")
        public_key = self.members.get(block.creator)
        if public_key is None:
            raise EndorsementError(f"unknown creator {block.creator.hex()}")
        if block.payload.spec_fingerprint != channel.model_spec.fingerprint:
            raise EndorsementError("update fingerprint does not match the channel model spec")
        if len(block.payload) != channel.model_spec.parameter_count:
            raise EndorsementError(
                f"update has {len(block.payload)} values, channel expects "
                f"{channel.model_spec.parameter_count}"
            )
        if block.n_k < 1:
            raise EndorsementError(f"dataset size claim must be >= 1, got {block.n_k}")
        if not verify_signature(public_key, block.signature, block.signing_bytes()):
            raise EndorsementError("invalid creator signature")

    def propose_local_block(
        self, channel: Channel, update: GradientVector, n_k: int, creator: Identity, round_index: int
    ) -> Block:
        """Client side: build and sign a local block."""
        return Block(
            block_type=BlockType.local,
            channel_id=channel.channel_id,
            round=round_index,
            creator=creator.id,
            payload=update,
            n_k=int(n_k),
        ).signed_by(creator)

    def submit_block(self, channel: Channel, block: Block) -> Block:
        """Endorse a signed local block and place it in the ordering queue."""
        if block.block_type != BlockType.local:
            raise EndorsementError("only local blocks are submitted for ordering")
        try:
            self._endorse(channel, block)
        except EndorsementError as e:
            logger.debug(f"Endorsement rejected on '{channel.channel_id}': {e.reason}")
            raise
        channel.enqueue(block)
        return block

    def submit_local_block(
        self, channel: Channel, update: GradientVector, n_k: int, creator: Identity, round_index: int
    ) -> Block:
        block = self.propose_local_block(channel, update, n_k, creator, round_index)
        return self.submit_block(channel, block)

    def order_and_commit(self, channel: Channel) -> List[Block]:
        """Commit queued blocks in (round, creator, submission counter) order."""
        pending = channel.drain()
        ordered = sorted(pending, key=lambda item: (item[1].round, item[1].creator, item[0]))
        committed = []
        for _, block in ordered:
            placed = block.placed(channel.head_hash, len(channel.chain))
            channel.chain.append(placed)
            committed.append(placed)
        channel.world_state.queued_local += len(committed)
        return committed

    def commit_global_block(
        self,
        channel: Channel,
        params: ModelParams,
        meta: dict,
        creator: Identity,
        round_index: int,
    ) -> Block:
        """Append a merged global model; consumes every queued local block.

        The block meta also commits to the current member table.
        """
        if channel.queue_length:
            raise RejectedInputError("order pending local blocks before merging")
        if not self.is_member(creator.id):
            raise EndorsementError(f"creator {creator.hex} is not registered")
        if params.fingerprint != channel.model_spec.fingerprint:
            raise RejectedInputError("merged parameters do not match the channel spec")
        block = Block(
            block_type=BlockType.global_,
            channel_id=channel.channel_id,
            round=round_index,
            creator=creator.id,
            payload=params.as_vector(),
            meta={**meta, "members_sha256": self.members_sha256},
        ).signed_by(creator)
        placed = block.placed(channel.head_hash, len(channel.chain))
        channel.chain.append(placed)
        channel.world_state = WorldState(
            global_params=params, queued_local=0, last_global_index=len(channel.chain) - 1
        )
        return placed

    def latest_global(self, channel: Channel) -> Block:
        return channel.chain[channel.world_state.last_global_index]

    def verify_chain(self, channel: Channel) -> ChainAudit:
        return verify_blocks(channel, self.members, self.roles)


def _fail(channel: Channel, index: int, reason: str) -> ChainAudit:
    return ChainAudit(
        channel_id=channel.channel_id, ok=False, length=len(channel.chain),
        first_bad_index=index, reason=reason,
    )


def verify_blocks(
    channel: Channel,
    members: Dict[bytes, Ed25519PublicKey],
    roles: Optional[Dict[bytes, str]] = None,
) -> ChainAudit:
    """
    Recompute every hash link and signature of a channel's chain.

    Also checks block placement (single genesis at 0, logical timestamps),
    that every global block consumes exactly the local blocks committed since
    the previous global block, that the world state matches replay, and that
    the member table equals the one committed by the latest global block.
    Members registered after that block fail the last check until the next merge.
    """
    spec = channel.model_spec
    if not channel.chain:
        return _fail(channel, 0, "chain is empty")

    expected_parent = ZERO_HASH
    pending_locals: List[str] = []
    last_global = 0
    committed_members = None
    for index, block in enumerate(channel.chain):
        if block.parent_hash != expected_parent:
            return _fail(channel, index, "parent hash does not match the previous block")
        if block.timestamp != index:
            return _fail(channel, index, f"timestamp {block.timestamp} out of sequence")
        if (index == 0) != (block.block_type == BlockType.genesis):
            return _fail(channel, index, "genesis block must appear exactly once, at position 0")
        if block.channel_id != channel.channel_id:
            return _fail(channel, index, f"block belongs to channel '{block.channel_id}'")
        public_key = members.get(block.creator)
        if public_key is None:
            return _fail(channel, index, f"unknown creator {block.creator.hex()}")
        if not verify_signature(public_key, block.signature, block.signing_bytes()):
            return _fail(channel, index, "invalid signature")
        if len(block.payload) != spec.parameter_count:
            return _fail(channel, index, "payload length does not match the model spec")

        if block.block_type == BlockType.local:
            pending_locals.append(block.hash.hex())
        else:
            meta = block.meta or {}
            if block.block_type == BlockType.genesis:
                if meta.get("descriptor_sha256") != channel.descriptor_sha256:
                    return _fail(channel, index, "genesis does not commit to the channel descriptor")
            elif meta.get("consumed") != pending_locals:
                return _fail(channel, index, "merge metadata does not list the queued local blocks")
            committed_members = meta.get("members_sha256")
            if committed_members is None:
                return _fail(channel, index, "block does not commit to the member table")
            pending_locals = []
            last_global = index
        expected_parent = block.hash

    replayed = channel.chain[last_global].payload.values
    if not np.array_equal(replayed, channel.world_state.global_params.values):
        return _fail(channel, last_global, "world state differs from chain replay")
    if committed_members != member_table_digest(members, roles or {}):
        return _fail(channel, last_global, "member table differs from the one committed on chain")
    return ChainAudit(channel_id=channel.channel_id, ok=True, length=len(channel.chain))


def replay_world_state(channel_id: str, spec: ModelSpec, chain: List[Block]) -> WorldState:
    """Rebuild a world state from committed blocks."""
    last_global = max(
        (i for i, b in enumerate(chain) if b.block_type != BlockType.local), default=None
    )
    if last_global is None:
        raise RejectedInputError(f"channel '{channel_id}' has no genesis block")
    queued = sum(1 for b in chain[last_global + 1:] if b.block_type == BlockType.local)
    return WorldState(
        global_params=params_from_block(chain[last_global], spec),
        queued_local=queued,
        last_global_index=last_global,
    )


def block_summary(channel: Channel, index: int, head: int = 8) -> BlockSummary:
    """Readable view of the block at `index`; negative indices count from the head."""
    if not -len(channel.chain) <= index < len(channel.chain):
        raise RejectedInputError(
            f"block {index} outside channel '{channel.channel_id}' of length {len(channel.chain)}"
        )
    position = index % len(channel.chain)
    block = channel.chain[position]
    return BlockSummary(
        index=position,
        block_type=block.block_type.label,
        channel_id=block.channel_id,
        round=block.round,
        creator=block.creator.hex(),
        parent_hash=block.parent_hash.hex(),
        block_hash=block.hash.hex(),
        n_k=block.n_k,
        payload_length=len(block.payload.values),
        payload_norm=block.payload.norm(),
        payload_head=[float(v) for v in block.payload.values[:head]],
        meta=block.meta,
        timestamp=block.timestamp,
    )


def channel_summary(network: LedgerService, channel: Channel) -> ChannelSummary:
    return ChannelSummary(
        channel_id=channel.channel_id,
        model_spec=channel.model_spec.to_dict(),
        hyperparams=channel.hyperparams.model_dump(mode="json"),
        length=len(channel.chain),
        head_hash=channel.head_hash.hex(),
        global_blocks=len(channel.global_blocks()),
        queued_local_blocks=channel.world_state.queued_local,
        members=len(network.members),
    )
