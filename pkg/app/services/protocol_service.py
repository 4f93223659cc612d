"""Round orchestration: partitioning, cluster scheduling, local training, merging."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.errors import (
    AttackAbortedError,
    BeasError,
    ConfigurationError,
    RejectedInputError,
)
from app.core.rng import SeedStreams
from app.models.aggregation import FgHistory, LocalUpdate, MergeOutcome, UpdateSet
from app.models.attack import AnomalyReference
from app.models.client import ClientState
from app.models.ledger import Block, Channel, Identity
from app.models.nn import Batch, GradientVector, ModelParams, ModelSpec
from app.schemas.experiment import (
    BackdoorAttack,
    BackdoorSpec,
    ExperimentConfig,
    LabelFlipAttack,
    NoAttack,
    dataset_input_dim,
)
from app.schemas.reports import MetricsRecord, RoundReport, RunSummary
from app.services.aggregation_service import model_aggregate
from app.services.attack_service import (
    backdoor_accuracy,
    constrain_and_scale,
    poison_labels,
)
from app.services.dataset_service import load_dataset
from app.services.ledger_service import LedgerService
from app.services.ledger_store import LEDGER_SUFFIX, save_channel
from app.services.metrics_service import write_metrics, write_summary
from app.services.privacy_service import apply_policy
from app.services.training_service import evaluate, init_params, local_train

logger = logging.getLogger(__name__)


def partition_indices(
    labels: np.ndarray, n_clients: int, alpha: float, rng: np.random.Generator
) -> List[np.ndarray]:
    """Per-class Dirichlet(alpha) split of example indices over clients."""
    if n_clients < 1:
        raise ConfigurationError(f"need at least one client, got {n_clients}")
    if alpha <= 0:
        raise ConfigurationError(f"dirichlet alpha must be > 0, got {alpha}")
    if len(labels) < n_clients:
        raise ConfigurationError(
            f"dataset of {len(labels)} examples is smaller than n_clients={n_clients}"
        )

    assigned: List[List[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx_c = np.flatnonzero(labels == c)
        rng.shuffle(idx_c)
        proportions = rng.dirichlet(np.full(n_clients, alpha))
        splits = np.floor(proportions * len(idx_c)).astype(np.int64)
        remainder = len(idx_c) - splits.sum()
        order = np.argsort(-(proportions * len(idx_c) - splits), kind="stable")
        splits[order[:remainder]] += 1
        start = 0
        for k in range(n_clients):
            assigned[k].extend(idx_c[start:start + splits[k]].tolist())
            start += splits[k]

    # empty-client guard
    for k in range(n_clients):
        if not assigned[k]:
            donor = max(range(n_clients), key=lambda j: (len(assigned[j]), -j))
            assigned[k].append(assigned[donor].pop())
    return [np.sort(np.asarray(indices, dtype=np.int64)) for indices in assigned]


def partition_dataset(dataset: Batch, n_clients: int, alpha: float, rng: np.random.Generator) -> List[Batch]:
    indices = partition_indices(dataset.class_indices(), n_clients, alpha, rng)
    return [dataset.subset(part) for part in indices]


def next_cluster(client: ClientState) -> Batch:
    """Next unused shard; reshuffles shard order once every shard has been used."""
    if client.cursor >= len(client.shards):
        client.shard_order = client.rng.permutation(len(client.shards)).tolist()
        client.cursor = 0
        client.passes += 1
    shard = client.shards[client.shard_order[client.cursor]]
    client.cursor += 1
    return client.data.subset(shard)


@dataclass
class ClientOutcome:
    client_id: str
    block: Optional[Block] = None
    examples_touched: int = 0
    error: Optional[str] = None


class ProtocolService:
    """Drives one channel: a tick schedules every live client once."""

    def __init__(
        self,
        network: LedgerService,
        channel: Channel,
        clients: Sequence[ClientState],
        peers: Sequence[Identity],
        test_set: Batch,
        backdoor: Optional[BackdoorSpec] = None,
        n_k_source: str = "dataset",
        max_workers: int = 1,
        record_wallclock: bool = False,
    ):
        if not peers:
            raise ConfigurationError("at least one endorsing peer is required")
        self.network = network
        self.channel = channel
        self.clients = list(clients)
        self.peers = list(peers)
        self.test_set = test_set
        self.backdoor = backdoor
        self.n_k_source = n_k_source
        self.max_workers = max(1, max_workers)
        self.record_wallclock = record_wallclock
        defense = channel.hyperparams.defense
        self.fg_history = FgHistory(defense.fg_history_rounds) if defense.use_foolsgold else None
        self.last_outcome: Optional[MergeOutcome] = None

    @property
    def hyperparams(self):
        return self.channel.hyperparams

    def _honest_update(self, base: ModelParams, cluster: Batch) -> GradientVector:
        hp = self.hyperparams
        _, update = local_train(base, cluster, hp.epochs, hp.lr, hp.batch_size)
        return update

    def client_update(self, client: ClientState, base: ModelParams, round_index: int) -> Tuple[GradientVector, int]:
        """
        Local work for one client in one round, before DP.

        Returns:
            (update, examples touched)
        """
        cluster = next_cluster(client)
        if len(cluster) > self.hyperparams.c:
            raise RejectedInputError(
                f"cluster of {len(cluster)} examples exceeds c={self.hyperparams.c}"
            )
        behavior = client.behavior if client.is_attacking(round_index) else None

        if isinstance(behavior, LabelFlipAttack):
            poisoned = poison_labels(cluster, behavior, client.attack_rng)
            return self._honest_update(base, poisoned), len(cluster)

        if isinstance(behavior, BackdoorAttack):
            benign = self._honest_update(base, cluster)
            try:
                update = constrain_and_scale(
                    base, cluster, behavior.backdoor, AnomalyReference(base, benign),
                    self.hyperparams.batch_size, client.attack_rng,
                )
            except AttackAbortedError as e:
                logger.warning(f"Client {client.index} attack aborted, submitting honest update: {e}")
                update = benign
            return update, len(cluster)

        return self._honest_update(base, cluster), len(cluster)

    def _run_client(self, client: ClientState, base: ModelParams, round_index: int) -> ClientOutcome:
        outcome = ClientOutcome(client_id=client.id)
        try:
            update, touched = self.client_update(client, base, round_index)
            shared = apply_policy(update, self.hyperparams.dp, client.dp_rng)
            n_k = len(client.data) if self.n_k_source == "dataset" else touched
            outcome.block = self.network.submit_local_block(
                self.channel, shared, n_k, client.identity, round_index
            )
            outcome.examples_touched = touched
            logger.debug(f"Client {client.index} submitted round {round_index} update (|u|={shared.norm():.4g})")
        except BeasError as e:
            logger.warning(f"Client {client.index} skipped in round {round_index}: {e}")
            outcome.error = str(e)
        return outcome

    def run_round(self, round_index: int) -> RoundReport:
        """One tick: train, apply DP, submit, order and commit, merge if the queue reached t."""
        started = time.perf_counter()
        base = self.channel.world_state.global_params
        live = [c for c in self.clients if c.alive]

        if self.max_workers > 1 and len(live) > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                outcomes = list(pool.map(lambda c: self._run_client(c, base, round_index), live))
        else:
            outcomes = [self._run_client(c, base, round_index) for c in live]

        committed = self.network.order_and_commit(self.channel)
        report = RoundReport(
            round=round_index,
            failed=sorted(o.client_id for o in outcomes if o.error is not None),
            max_examples_touched=max((o.examples_touched for o in outcomes), default=0),
        )
        submitted = {f"{b.creator.hex()}/{b.round}" for b in committed}

        if self.channel.world_state.queued_local >= self.hyperparams.t:
            consumed = {f"{b.creator.hex()}/{b.round}" for b in self.channel.queued_local_blocks()}
            merged = self.maybe_merge(round_index)
            if merged is None:
                report.merge_deferred = True
            else:
                _, outcome = merged
                submitted |= consumed
                report.merged = True
                report.merged_ids = [] if outcome.aborted else outcome.selected
                report.rejected = outcome.rejected
                report.fg_weights = outcome.fg_weights
                report.accuracy, report.loss = evaluate(outcome.params, self.test_set)
                if self.backdoor is not None:
                    report.backdoor_accuracy = backdoor_accuracy(outcome.params, self.test_set, self.backdoor)
        report.submitted = sorted(submitted)

        if self.record_wallclock:
            report.wallclock_ms = int(round((time.perf_counter() - started) * 1000))
        return report

    def maybe_merge(self, round_index: int) -> Optional[Tuple[Block, MergeOutcome]]:
        """
        Merge every queued local block into a new global block.

        Returns None when fewer than t blocks are queued, or when Multi-KRUM
        cannot run on this many updates (2f+2 >= n); the merge is then
        retried on a later round.
        """
        queued = self.channel.queued_local_blocks()
        hp = self.hyperparams
        if len(queued) < hp.t:
            return None
        defense = hp.defense
        if defense.use_multikrum and 2 * defense.f + 2 >= len(queued):
            logger.warning(
                f"Merge deferred in round {round_index}: multi-krum needs 2f+2 < n "
                f"(f={defense.f}, n={len(queued)})"
            )
            return None

        updates = UpdateSet([
            LocalUpdate(
                client_id=b.creator.hex(), update=b.payload, n_k=b.n_k,
                round=b.round, block_hash=b.hash.hex(),
            )
            for b in queued
        ])
        base = self.channel.world_state.global_params
        outcome = model_aggregate(updates, base, defense, self.fg_history, round_index)

        peer = self.peers[len(self.channel.global_blocks()) % len(self.peers)]
        block = self.network.commit_global_block(
            self.channel, outcome.params, outcome.meta([b.hash.hex() for b in queued]), peer, round_index
        )
        self.last_outcome = outcome
        return block, outcome

    @staticmethod
    def metrics_record(report: RoundReport) -> MetricsRecord:
        return MetricsRecord(
            round=report.round,
            global_accuracy=report.accuracy,
            global_loss=report.loss,
            backdoor_accuracy=report.backdoor_accuracy,
            blocks_merged=len(report.merged_ids),
            blocks_rejected=len(report.rejected),
            fg_min_weight=min(report.fg_weights.values()) if report.fg_weights else None,
            wallclock_ms=report.wallclock_ms,
        )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    network: LedgerService
    channel: Channel
    clients: List[ClientState]
    genesis_accuracy: float
    genesis_loss: float
    dataset_name: str = ""
    reports: List[RoundReport] = field(default_factory=list)
    records: List[MetricsRecord] = field(default_factory=list)
    ledger_path: Optional[Path] = None

    @property
    def final_params(self) -> ModelParams:
        return self.channel.world_state.global_params

    def summary(self) -> RunSummary:
        accuracies = [r.global_accuracy for r in self.records]
        backdoor = [r.backdoor_accuracy for r in self.records if r.backdoor_accuracy is not None]
        return RunSummary(
            dataset=self.dataset_name,
            n_clients=self.config.n_clients,
            rounds=len(self.reports),
            global_blocks=len(self.records),
            final_accuracy=accuracies[-1] if accuracies else self.genesis_accuracy,
            best_accuracy=max(accuracies, default=self.genesis_accuracy),
            final_backdoor_accuracy=backdoor[-1] if backdoor else None,
            overall_ms=sum(r.wallclock_ms for r in self.reports),
        )


def build_model_spec(config: ExperimentConfig, n_classes: int) -> ModelSpec:
    input_dim = dataset_input_dim(config.dataset)
    return ModelSpec((input_dim, *config.model.hidden, n_classes), config.model.activation)


def run_experiment(
    config: ExperimentConfig,
    output_dir: Optional[Union[str, Path]] = None,
    max_workers: Optional[int] = None,
) -> ExperimentResult:
    """
    Run a full simulation from a validated config.

    Args:
        config: Experiment description; its seed drives every random stream
        output_dir: Where metrics, summary and the ledger file go (None writes nothing)
        max_workers: Client-training threads; defaults to settings.max_workers

    Returns:
        ExperimentResult with one report per round and one record per global block
    """
    streams = SeedStreams(config.seed)
    split = load_dataset(config.dataset, streams.stream("dataset"))
    spec = build_model_spec(config, split.n_classes)
    parts = partition_dataset(split.train, config.n_clients, config.dirichlet_alpha, streams.stream("partition"))

    network = LedgerService()
    identity_rng = streams.stream("identity")
    peers = [network.register_identity(identity_rng, role="peer") for _ in range(config.n_endorsing_peers)]

    attack = config.attack
    clients = []
    for index, data in enumerate(parts):
        adversarial = not isinstance(attack, NoAttack) and 1 <= index <= attack.n_adversaries
        clients.append(ClientState(
            index=index,
            identity=network.register_identity(identity_rng),
            data=data,
            cluster_size=config.c,
            rng=streams.stream("client", index),
            dp_rng=streams.stream("dp", index),
            attack_rng=streams.stream("attack", index),
            behavior=attack if adversarial else None,
            peer=peers[index % len(peers)],
        ))

    genesis = init_params(spec, streams.stream("init"))
    if config.genesis_pretrain_epochs:
        genesis, _ = local_train(
            genesis, next_cluster(clients[0]), config.genesis_pretrain_epochs, config.lr, config.batch_size
        )
    channel = network.create_channel(config.name, spec, config.hyperparams(), clients[0].identity, genesis)

    backdoor = attack.backdoor if isinstance(attack, BackdoorAttack) else None
    service = ProtocolService(
        network, channel, clients, peers, split.test,
        backdoor=backdoor,
        n_k_source=config.n_k_source,
        max_workers=max_workers or settings.max_workers,
        record_wallclock=config.record_wallclock,
    )

    genesis_accuracy, genesis_loss = evaluate(genesis, split.test)
    logger.info(
        f"Starting '{config.name}': {config.n_clients} clients, {spec.parameter_count} parameters, "
        f"genesis accuracy {genesis_accuracy:.4f}"
    )
    result = ExperimentResult(
        config=config, network=network, channel=channel, clients=clients,
        genesis_accuracy=genesis_accuracy, genesis_loss=genesis_loss, dataset_name=split.name,
    )
    out = Path(output_dir) if output_dir is not None else None

    for round_index in range(1, config.rounds + 1):
        report = service.run_round(round_index)
        result.reports.append(report)
        if not report.merged:
            continue
        record = service.metrics_record(report)
        result.records.append(record)
        logger.info(
            f"Round {round_index}: global block {len(result.records)}, accuracy {record.global_accuracy:.4f}, "
            f"loss {record.global_loss:.4f}, merged {record.blocks_merged}, rejected {record.blocks_rejected}"
        )
        if out is not None:
            write_metrics(result.records, out)
        if config.target_accuracy is not None and record.global_accuracy >= config.target_accuracy:
            logger.info(f"Target accuracy {config.target_accuracy} reached in round {round_index}")
            break

    if out is not None:
        write_metrics(result.records, out)
        write_summary(result.summary(), out)
        result.ledger_path = save_channel(channel, network, out / f"{channel.channel_id}{LEDGER_SUFFIX}")
    logger.info(f"Finished '{config.name}' after {len(result.reports)} rounds, {len(result.records)} global blocks")
    return result
