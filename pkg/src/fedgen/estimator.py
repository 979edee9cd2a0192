"""scikit-learn style wrappers around the federation engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import CharVocab, ClientDataset
from .errors import DomainError
from .federation import FederationConfig, personalize, run_training
from .linalg import make_rng
from .lora import LoraAdapter, LoraConfig
from .model import Backbone, attention_targets, forward, generate, perplexity, softmax


class CharTokenizer(BaseEstimator, TransformerMixin):
    """Character vocabulary learned from texts; transforms text to id arrays."""

    def fit(self, X, y=None):
        texts = _check_texts(X)
        self.vocab_ = CharVocab.from_texts(texts)
        self.vocab_size_ = self.vocab_.size
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        return [self.vocab_.encode(t) for t in _check_texts(X)]

    def inverse_transform(self, X):
        check_is_fitted(self, "vocab_")
        return [self.vocab_.decode(ids) for ids in X]


def _check_texts(X) -> list[str]:
    if isinstance(X, str):
        raise TypeError("expected an iterable of strings, got a single string")
    texts = list(X)
    if not all(isinstance(t, str) for t in texts):
        raise TypeError("every element must be a string")
    return texts


def _check_sequences(X, vocab_size: int) -> list[np.ndarray]:
    seqs = [np.asarray(s, dtype=np.int64) for s in X]
    if not seqs:
        raise DomainError("expected at least one token sequence")
    for s in seqs:
        if s.ndim != 1 or s.size == 0:
            raise DomainError("each sequence must be a non-empty 1-D array of token ids")
        if s.min() < 0 or s.max() >= vocab_size:
            raise DomainError(f"token ids must lie in [0, {vocab_size})")
    return seqs


def _check_clients(X) -> list[ClientDataset]:
    clients = list(X)
    if not clients or not all(isinstance(c, ClientDataset) for c in clients):
        raise TypeError("fit expects a non-empty list of ClientDataset")
    return clients


class FederatedLoraLM(BaseEstimator):
    """Language model fine-tuned by federated training on a frozen backbone.

    ``fit`` takes a list of :class:`ClientDataset` (one per client). The
    fitted model exposes perplexity, next-token probabilities and sampling.
    """

    def __init__(self, backbone: Backbone | None = None, strategy: str = "FedGenEdge", rank: int = 8,
                 scaling: float = 16.0, targets=("wq", "wv"), rounds: int = 50, local_epochs: int = 5,
                 participation: float = 0.1, lr: float = 1e-4, batch_size: int = 32,
                 weight_decay: float = 0.01, ditto_lambda: float = 0.1, seed: int = 0,
                 parallel_clients: int = 1):
        self.backbone = backbone
        self.strategy = strategy
        self.rank = rank
        self.scaling = scaling
        self.targets = targets
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.participation = participation
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.ditto_lambda = ditto_lambda
        self.seed = seed
        self.parallel_clients = parallel_clients

    def _federation_config(self, n_clients: int) -> FederationConfig:
        return FederationConfig(
            n_clients=n_clients, participation=self.participation, rounds=self.rounds,
            local_epochs=self.local_epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
            strategy=self.strategy, strategy_params={"ditto_lambda": self.ditto_lambda},
            weight_decay=self.weight_decay, parallel_clients=self.parallel_clients)

    def _lora_config(self) -> LoraConfig:
        resolved = dict.fromkeys(attention_targets(self.backbone.config, self.targets))
        return LoraConfig(self.rank, float(self.scaling), tuple(sorted(resolved)))

    def fit(self, X, y=None, eval_sequences=None):
        if not isinstance(self.backbone, Backbone):
            raise TypeError("FederatedLoraLM needs a pretrained Backbone as `backbone`")
        clients = _check_clients(X)
        self.fed_config_ = self._federation_config(len(clients))
        self.lora_config_ = self._lora_config()
        self.result_ = run_training(clients, self.backbone, self.fed_config_, self.lora_config_, eval_sequences)
        self.records_ = self.result_.records
        self.ledger_ = self.result_.ledger
        self.model_ = self.result_.global_model()
        return self

    @property
    def global_adapter_(self) -> LoraAdapter | None:
        check_is_fitted(self, "result_")
        return self.result_.global_adapter

    def perplexity(self, X) -> float:
        check_is_fitted(self, "model_")
        seqs = _check_sequences(X, self.backbone.config.vocab_size)
        return perplexity(*self.model_, seqs)

    def score(self, X, y=None) -> float:
        """Negative perplexity, so that larger is better."""
        return -self.perplexity(X)

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each sequence (last ``context_len`` tokens)."""
        check_is_fitted(self, "model_")
        seqs = _check_sequences(X, self.backbone.config.vocab_size)
        ctx = self.backbone.config.context_len
        out = []
        for s in seqs:
            logits, _ = forward(*self.model_, s[-ctx:][None, :])
            out.append(softmax(logits[0, -1]))
        return np.array(out)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def generate(self, prompt, length: int, temperature: float = 0.0, seed: int | None = None) -> list[int]:
        check_is_fitted(self, "model_")
        rng = make_rng(self.seed if seed is None else seed, 21) if temperature > 0 else None
        return generate(*self.model_, prompt, length, temperature, rng)

    def personalize(self, client: ClientDataset, epochs: int = 1) -> LoraAdapter:
        """One client's copy of the global adapter after ``epochs`` local epochs."""
        check_is_fitted(self, "result_")
        adapter = self.result_.global_adapter
        if adapter is None:
            raise DomainError(f"strategy {self.strategy} has no global adapter to personalize")
        return personalize(client, self.backbone, adapter, self.fed_config_, epochs)
