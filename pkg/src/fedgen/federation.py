"""Federated round loop, client updates, aggregation and baseline strategies.

The server side (:class:`Server`, :func:`aggregate`) only ever handles
:class:`ClientUpdateResult` objects, which carry parameters and sample counts
but no token data. Client-side code owns the datasets and any private state.

Strategies
----------
FedGenEdge       clients train a LoRA adapter on the frozen backbone; adapters are averaged.
FedAvgFull       clients train every backbone weight; full models are averaged.
LocalOnly        each client trains its own adapter; nothing is communicated.
FedPer           last block, final norm and output head stay on the client; the rest is averaged.
Ditto            FedGenEdge for the global adapter plus a private adapter pulled towards it.
CentralizedLora  one adapter trained on the pooled data of all clients.
CentralizedFull  every backbone weight trained on the pooled data.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, pooled_client
from .errors import ConfigError, ProtocolError, ShapeError
from .linalg import make_rng
from .lora import LoraAdapter, LoraConfig, count_for_shapes, init_adapter
from .metrics import CommLedger, RoundRecord
from .model import (AdamWState, Backbone, ModelConfig, adamw_step, backbone_shapes, iter_batches,
                    linear_shapes, loss_and_grads, perplexity, to_samples, total_params)

log = logging.getLogger(__name__)

STRATEGIES = ("FedGenEdge", "FedAvgFull", "LocalOnly", "FedPer", "Ditto", "CentralizedLora", "CentralizedFull")
ADAPTER_STRATEGIES = frozenset({"FedGenEdge", "LocalOnly", "Ditto", "CentralizedLora"})
CENTRALIZED = frozenset({"CentralizedLora", "CentralizedFull"})
# Strategies whose per-client models differ, so "global" quality is the client average.
CLIENT_MODEL_STRATEGIES = frozenset({"LocalOnly", "FedPer"})
UPLOADING = frozenset({"FedGenEdge", "FedAvgFull", "FedPer", "Ditto"})

DEFAULT_DITTO_LAMBDA = 0.1

STREAM_ADAPTER_INIT = 5
STREAM_SELECTION = 6
STREAM_CLIENT = 7
STREAM_PERSONALIZE = 8


@dataclass
class FederationConfig:
    n_clients: int = 20
    participation: float = 0.1
    rounds: int = 50
    local_epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    strategy: str = "FedGenEdge"
    strategy_params: dict = field(default_factory=dict)
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    parallel_clients: int = 1

    def __post_init__(self):
        problems = []
        if self.n_clients < 1:
            problems.append(f"n_clients must be >= 1, got {self.n_clients}")
        if not 0 < self.participation <= 1:
            problems.append(f"participation must lie in (0, 1], got {self.participation}")
        if self.rounds < 0:
            problems.append(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            problems.append(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.lr < 0:
            problems.append(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.strategy not in STRATEGIES:
            problems.append(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.ditto_lambda < 0:
            problems.append(f"ditto_lambda must be >= 0, got {self.ditto_lambda}")
        if self.parallel_clients < 1:
            problems.append(f"parallel_clients must be >= 1, got {self.parallel_clients}")
        if problems:
            raise ConfigError(problems)

    @property
    def ditto_lambda(self) -> float:
        return float(self.strategy_params.get("ditto_lambda", DEFAULT_DITTO_LAMBDA))

    def optimizer(self) -> AdamWState:
        return AdamWState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                          weight_decay=self.weight_decay)


def clients_per_round(n_clients: int, participation: float) -> int:
    """``max(C * K, 1)`` with C*K rounded half-up to an integer."""
    m = (Decimal(repr(float(participation))) * n_clients).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(int(m), 1)


def select_clients(rng: np.random.Generator, n_clients: int, participation: float) -> list[int]:
    """Uniform sample without replacement, returned in ascending id order."""
    m = min(clients_per_round(n_clients, participation), n_clients)
    return sorted(int(k) for k in rng.choice(n_clients, size=m, replace=False))


def private_weight_names(config: ModelConfig) -> tuple[str, ...]:
    """FedPer's personalization layers: last block, final norm, output head."""
    last = f"layers.{config.n_layers - 1}."
    return tuple(n for n in backbone_shapes(config) if n.startswith(last) or n.startswith("ln_f.") or n == "head")


def uplink_params(strategy: str, model_config: ModelConfig, lora_config: LoraConfig) -> int:
    """Parameters one participating client uploads per round."""
    if strategy in ("FedGenEdge", "Ditto"):
        return count_for_shapes(lora_config, linear_shapes(model_config))
    if strategy == "FedAvgFull":
        return total_params(model_config)
    if strategy == "FedPer":
        shapes = backbone_shapes(model_config)
        return total_params(model_config) - sum(math.prod(shapes[n]) for n in private_weight_names(model_config))
    return 0


# -- client side -----------------------------------------------------------


@dataclass
class ClientUpdateResult:
    """What a client sends back: parameters and its sample count, never data."""
    client_id: int
    updated_params: dict[str, np.ndarray]
    n_k: int
    local_train_loss_trace: list[float]
    uplink_params: int
    steps: int

    @property
    def uplink_bytes(self) -> int:
        return 4 * self.uplink_params


def local_train(backbone: Backbone, adapter: LoraAdapter | None, samples: Sequence[np.ndarray],
                epochs: int, config: FederationConfig, rng: np.random.Generator,
                weight_names: Sequence[str] = (), prox_lambda: float = 0.0,
                anchor: Mapping[str, np.ndarray] | None = None):
    """Mini-batch AdamW on either the adapter or the named backbone weights.

    With ``weight_names`` empty only the adapter is trained and the backbone
    is read-only. ``prox_lambda`` adds ``(lambda / 2) * ||p - anchor||^2`` to
    the objective. Returns ``(params, per_epoch_mean_loss, steps)``.
    """
    train_adapter = not weight_names
    if train_adapter and adapter is None:
        raise ProtocolError("adapter training needs an adapter")
    if train_adapter:
        params = {k: v.copy() for k, v in adapter.to_dict().items()}
    else:
        params = {n: np.array(backbone.weights[n]) for n in weight_names}
    opt = config.optimizer()
    trace, steps = [], 0
    for _ in range(epochs):
        losses = []
        for batch in iter_batches(samples, config.batch_size, rng):
            if train_adapter:
                value, _, ag = loss_and_grads(backbone, LoraAdapter.from_dict(adapter.config, params), batch)
                grads = ag.to_dict()
            else:
                value, grads, _ = loss_and_grads(backbone.with_weights(params), adapter, batch,
                                                 weights=weight_names, adapter_grads=False)
            if prox_lambda:
                grads = {k: g + prox_lambda * (params[k] - anchor[k]) for k, g in grads.items()}
            params = adamw_step(opt, params, grads)
            losses.append(value)
            steps += 1
        if losses:
            trace.append(float(np.mean(losses)))
    return params, trace, steps


def client_update(client: ClientDataset, backbone: Backbone, global_params: Mapping[str, np.ndarray],
                  config: FederationConfig, lora_config: LoraConfig | None = None,
                  round_index: int = 0, private: Mapping[str, np.ndarray] | None = None):
    """Run one client's local round for the configured strategy.

    Returns ``(result, new_private_state)``. The result carries what the
    client uploads; the private state (LocalOnly and Ditto adapters, FedPer
    personalization layers) never leaves the client.
    """
    samples = to_samples(client.train, backbone.config.context_len)
    n_k = len(samples)
    strategy = config.strategy
    rng = make_rng(config.seed, STREAM_CLIENT, round_index, client.client_id)
    E = config.local_epochs
    upload = uplink_params(strategy, backbone.config, lora_config) if strategy in UPLOADING else 0
    new_private = private

    if strategy in ("FedGenEdge", "CentralizedLora", "Ditto"):
        adapter = LoraAdapter.from_dict(lora_config, global_params)
        params, trace, steps = local_train(backbone, adapter, samples, E, config, rng)
        if strategy == "Ditto":
            mine = LoraAdapter.from_dict(lora_config, private if private is not None else global_params)
            prng = make_rng(config.seed, STREAM_CLIENT, round_index, client.client_id, 1)
            new_private, _, _ = local_train(backbone, mine, samples, E, config, prng,
                                            prox_lambda=config.ditto_lambda, anchor=global_params)
    elif strategy == "LocalOnly":
        adapter = LoraAdapter.from_dict(lora_config, private if private is not None else global_params)
        new_private, trace, steps = local_train(backbone, adapter, samples, E, config, rng)
        params = {}
    elif strategy in ("FedAvgFull", "CentralizedFull"):
        start = backbone.with_weights(global_params)
        params, trace, steps = local_train(start, None, samples, E, config, rng,
                                           weight_names=sorted(backbone.weights))
    elif strategy == "FedPer":
        start = backbone.with_weights({**global_params, **(private or {})})
        names = sorted(backbone.weights)
        trained, trace, steps = local_train(start, None, samples, E, config, rng, weight_names=names)
        private_names = set(private_weight_names(backbone.config))
        params = {k: v for k, v in trained.items() if k not in private_names}
        new_private = {k: v for k, v in trained.items() if k in private_names}
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    result = ClientUpdateResult(client.client_id, params, n_k, trace, upload, steps)
    return result, new_private


# -- server side -----------------------------------------------------------


def aggregation_weights(results: Sequence[ClientUpdateResult]) -> np.ndarray:
    if not results:
        raise ProtocolError("cannot aggregate an empty round")
    n = np.array([r.n_k for r in results], dtype=np.float64)
    total = n.sum()
    if total <= 0:
        raise ProtocolError("degenerate round: participating clients hold no samples")
    return n / total


def aggregate(results: Sequence[ClientUpdateResult]) -> dict[str, np.ndarray]:
    """Sample-size weighted average ``sum_k (n_k / sum_j n_j) * theta_k``.

    Results are reduced in ascending client-id order, written as the first
    client's parameters plus weighted offsets so identical inputs come back
    bit-for-bit unchanged.
    """
    results = sorted(results, key=lambda r: r.client_id)
    w = aggregation_weights(results)
    base = results[0].updated_params
    for r in results[1:]:
        if r.updated_params.keys() != base.keys():
            raise ShapeError(f"client {r.client_id} uploaded different parameter names")
        for k, v in r.updated_params.items():
            if v.shape != base[k].shape:
                raise ShapeError(f"client {r.client_id} uploaded {k!r} with shape {v.shape}, "
                                 f"expected {base[k].shape}")
    out = {}
    for k, ref in base.items():
        acc = np.zeros_like(ref)
        for wk, r in zip(w[1:], results[1:]):
            acc += wk * (r.updated_params[k] - ref)
        out[k] = ref + acc
    return out


class Server:
    """Holds the global parameters and the ledger; never touches client data."""

    def __init__(self, global_params: dict[str, np.ndarray], ledger: CommLedger, broadcast_params: int):
        self.round = 0
        self.global_params = global_params
        self.ledger = ledger
        self.broadcast_params = broadcast_params

    def broadcast(self, client_ids: Sequence[int]) -> dict[str, np.ndarray]:
        for k in client_ids:
            self.ledger.record_download(self.round, k, self.broadcast_params)
        return self.global_params

    def receive(self, results: Sequence[ClientUpdateResult], record: bool = True) -> None:
        results = sorted(results, key=lambda r: r.client_id)
        if record:
            for r in results:
                self.ledger.record_upload(self.round, r.client_id, r.uplink_params)
        if results:
            self.global_params = aggregate(results)

    def end_round(self) -> None:
        self.round += 1


# -- driver ----------------------------------------------------------------


@dataclass
class TrainingResult:
    strategy: str
    backbone: Backbone
    lora_config: LoraConfig | None
    global_params: dict[str, np.ndarray]
    records: list[RoundRecord]
    ledger: CommLedger
    client_states: dict[int, dict[str, np.ndarray]]
    initial_params: dict[str, np.ndarray]

    @property
    def global_adapter(self) -> LoraAdapter | None:
        if self.strategy in ADAPTER_STRATEGIES:
            return LoraAdapter.from_dict(self.lora_config, self.global_params)
        return None

    def global_model(self) -> tuple[Backbone, LoraAdapter | None]:
        """Backbone and adapter of the shared global model."""
        if self.strategy in ADAPTER_STRATEGIES:
            return self.backbone, self.global_adapter
        return self.backbone.with_weights(self.global_params), None

    def client_model(self, client_id: int) -> tuple[Backbone, LoraAdapter | None]:
        """The model a client would use after training (its private one if any)."""
        state = self.client_states.get(client_id)
        if self.strategy in ("LocalOnly", "Ditto"):
            params = state if state is not None else self.initial_params
            return self.backbone, LoraAdapter.from_dict(self.lora_config, params)
        if self.strategy == "FedPer":
            return self.backbone.with_weights({**self.global_params, **(state or {})}), None
        return self.global_model()

    def final_global_perplexity(self, sequences, n_clients: int) -> float:
        """Global-model perplexity, or the client-model average where no global model exists."""
        if self.strategy in CLIENT_MODEL_STRATEGIES:
            return float(np.mean([perplexity(*self.client_model(k), sequences) for k in range(n_clients)]))
        return perplexity(*self.global_model(), sequences)


def initial_global_params(strategy: str, backbone: Backbone, lora_config: LoraConfig | None,
                          seed: int) -> dict[str, np.ndarray]:
    if strategy in ADAPTER_STRATEGIES:
        if lora_config is None:
            raise ConfigError(f"strategy {strategy} needs a LoRA configuration")
        rng = make_rng(seed, STREAM_ADAPTER_INIT)
        return init_adapter(lora_config, backbone.linear_shapes(), rng).to_dict()
    names = set(backbone.weights)
    if strategy == "FedPer":
        names -= set(private_weight_names(backbone.config))
    return {n: np.array(backbone.weights[n]) for n in sorted(names)}


def run_training(clients: Sequence[ClientDataset], backbone: Backbone, config: FederationConfig,
                 lora_config: LoraConfig | None = None, eval_sequences=None) -> TrainingResult:
    """Synchronous rounds of select / broadcast / local update / aggregate.

    ``eval_sequences`` is the held-out global test set scored after every
    round; without it the recorded perplexity is NaN.
    """
    strategy = config.strategy
    pooled = None
    if strategy in CENTRALIZED:
        pooled = pooled_client(clients)
        clients = [pooled]
        n_clients, participation = 1, 1.0
    else:
        n_clients, participation = len(clients), config.participation
        if n_clients != config.n_clients:
            raise ConfigError(f"config expects {config.n_clients} clients, got {len(clients)}")
    by_id = {c.client_id: c for c in clients}
    if sorted(by_id) != list(range(n_clients)):
        raise ConfigError("client ids must be 0..K-1")
    start_checksum = backbone.checksum()

    initial = initial_global_params(strategy, backbone, lora_config, config.seed)
    ledger = CommLedger()
    broadcast = uplink_params(strategy, backbone.config, lora_config) if strategy in UPLOADING else 0
    server = Server(dict(initial), ledger, broadcast)
    private: dict[int, dict[str, np.ndarray]] = {}
    if strategy == "FedPer":
        keep = private_weight_names(backbone.config)
        private = {k: {n: np.array(backbone.weights[n]) for n in keep} for k in range(n_clients)}
    select_rng = make_rng(config.seed, STREAM_SELECTION)
    records = []

    def job(k):
        c = round_data.get(k, by_id[k])
        if not c.train:
            log.warning("round %d: client %d has no training data; skipped", server.round, k)
            return None
        return client_update(c, backbone, global_now, config, lora_config, server.round, private.get(k))

    for t in range(config.rounds):
        selected = select_clients(select_rng, n_clients, participation)
        round_data = {}
        if pooled is not None:
            round_data[0] = centralized_round_data(select_rng, pooled, config.participation)
        global_now = server.broadcast(selected if strategy in UPLOADING else ())
        try:
            if config.parallel_clients > 1 and len(selected) > 1:
                with ThreadPoolExecutor(max_workers=config.parallel_clients) as pool:
                    outcomes = list(pool.map(job, selected))
            else:
                outcomes = [job(k) for k in selected]
        except Exception as exc:
            raise type(exc)(f"round {t}: {exc}") from exc
        done = [(k, o) for k, o in zip(selected, outcomes) if o is not None]
        results = [r for _, (r, _) in done]
        for k, (_, state) in done:
            if state is not None:
                private[k] = state
        if strategy in UPLOADING or strategy in CENTRALIZED:
            try:
                server.receive(results, record=strategy in UPLOADING)
            except Exception as exc:
                raise type(exc)(f"round {t}: {exc}") from exc

        losses = [r.local_train_loss_trace[-1] for r in results if r.local_train_loss_trace]
        ppl = float("nan")
        if eval_sequences is not None:
            partial = TrainingResult(strategy, backbone, lora_config, server.global_params, records,
                                     ledger, private, initial)
            if strategy in CLIENT_MODEL_STRATEGIES:
                ppl = float(np.mean([perplexity(*partial.client_model(r.client_id), eval_sequences)
                                     for r in results])) if results else float("nan")
            else:
                ppl = perplexity(*partial.global_model(), eval_sequences)
        records.append(RoundRecord(
            round=t,
            global_eval_perplexity=ppl,
            mean_local_train_loss=float(np.mean(losses)) if losses else float("nan"),
            participating_clients=tuple(r.client_id for r in results),
            cumulative_uplink_bytes=ledger.total_upload,
        ))
        log.info("round %d: clients=%s ppl=%.4f", t, list(selected), ppl)
        server.end_round()

    if backbone.checksum() != start_checksum:
        raise ProtocolError("frozen backbone was modified during training")
    return TrainingResult(strategy, backbone, lora_config, server.global_params, records, ledger,
                          private, initial)


def centralized_round_data(rng: np.random.Generator, pooled: ClientDataset,
                           fraction: float) -> ClientDataset:
    """A uniform ``fraction`` of the pooled training documents for one round.

    Gives the centralized references the same expected per-round sample
    budget as a federated round with participation ``fraction``.
    """
    n = len(pooled.train)
    if n == 0:
        return pooled
    m = min(clients_per_round(n, fraction), n)
    pick = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    return ClientDataset(pooled.client_id, [pooled.train[i] for i in pick], [],
                         [pooled.train_ids[i] for i in pick], [], pooled.topic_histogram)


def simulate_ledger(config: FederationConfig, model_config: ModelConfig,
                    lora_config: LoraConfig | None) -> CommLedger:
    """Upload ledger a run would produce, without training.

    Uses the same selection stream and per-client payload as
    :func:`run_training`, so the byte totals match a real run exactly
    (assuming no client is skipped for lack of data).
    """
    ledger = CommLedger()
    if config.strategy not in UPLOADING:
        return ledger
    payload = uplink_params(config.strategy, model_config, lora_config)
    rng = make_rng(config.seed, STREAM_SELECTION)
    for t in range(config.rounds):
        for k in select_clients(rng, config.n_clients, config.participation):
            ledger.record_upload(t, k, payload)
    return ledger


def personalize(client: ClientDataset, backbone: Backbone, final_global_adapter: LoraAdapter,
                config: FederationConfig, epochs: int = 1) -> LoraAdapter:
    """Fine-tune a copy of the global adapter on one client's training split.

    The optimizer state starts fresh. The global adapter is not modified.
    """
    samples = to_samples(client.train, backbone.config.context_len)
    if not samples:
        return final_global_adapter.copy()
    rng = make_rng(config.seed, STREAM_PERSONALIZE, client.client_id)
    params, _, _ = local_train(backbone, final_global_adapter, samples, epochs, config, rng)
    return LoraAdapter.from_dict(final_global_adapter.config, params)


def personalize_full(client: ClientDataset, backbone: Backbone, config: FederationConfig,
                     epochs: int = 1) -> Backbone:
    """Full-weight counterpart of :func:`personalize` for non-adapter strategies."""
    samples = to_samples(client.train, backbone.config.context_len)
    if not samples:
        return backbone
    rng = make_rng(config.seed, STREAM_PERSONALIZE, client.client_id)
    params, _, _ = local_train(backbone, None, samples, epochs, config, rng,
                               weight_names=sorted(backbone.weights))
    return backbone.with_weights(params)
