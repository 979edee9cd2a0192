"""Corpora, character vocabularies and Dirichlet Non-IID partitioning."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, PartitionError
from .linalg import dirichlet_sample, make_rng

VOWELS = "aeiou"
# Signature consonants. Topics draw disjoint runs of this pool while there is
# room (10 topics of 5), then wrap around.
SIGNATURE_POOL = "bcdfghjklmnpqrstvwxyz" + "BCDFGHJKLMNPQRSTVWXYZ" + "0123456789"
SIGNATURE_SIZE = 5
FUNCTION_WORDS = ("the", "of", "and", "to", "in", "a", "is", "on")
TOPIC_WORDS = 12
FUNCTION_WORD_RATE = 0.25
PERIOD_RATE = 0.08
TRAIN_FRACTION = 0.8

STREAM_PARTITION = 2


@dataclass(frozen=True)
class CharVocab:
    chars: tuple[str, ...]

    @classmethod
    def from_texts(cls, texts) -> "CharVocab":
        return cls(tuple(sorted(set("".join(texts)))))

    @property
    def size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
        except KeyError as exc:
            raise DomainError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)


@dataclass
class Document:
    topic: int
    tokens: np.ndarray


@dataclass
class Corpus:
    documents: list[Document]
    vocab: CharVocab
    n_topics: int

    def __post_init__(self):
        for i, doc in enumerate(self.documents):
            if len(doc.tokens) == 0:
                raise DomainError(f"document {i} is empty")
            if not 0 <= doc.topic < self.n_topics:
                raise DomainError(f"document {i} has topic {doc.topic} outside [0, {self.n_topics})")

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def labels(self) -> np.ndarray:
        return np.array([d.topic for d in self.documents], dtype=np.int64)

    @property
    def sequences(self) -> list[np.ndarray]:
        return [d.tokens for d in self.documents]

    def subset(self, indices) -> "Corpus":
        return Corpus([self.documents[i] for i in indices], self.vocab, self.n_topics)

    def to_bytes(self) -> bytes:
        """Canonical byte encoding, used to check determinism."""
        parts = ["".join(self.vocab.chars).encode("utf-8")]
        for d in self.documents:
            parts.append(np.int64(d.topic).tobytes() + np.asarray(d.tokens, "<i8").tobytes())
        return b"\x00".join(parts)


def synthetic_vocab(n_topics: int) -> CharVocab:
    used = set(" ." + VOWELS + "".join(FUNCTION_WORDS))
    for t in range(n_topics):
        used.update(_signature(t))
    return CharVocab(tuple(sorted(used)))


def _signature(topic: int) -> str:
    n = len(SIGNATURE_POOL)
    return "".join(SIGNATURE_POOL[(topic * SIGNATURE_SIZE + j) % n] for j in range(SIGNATURE_SIZE))


def _topic_words(rng: np.random.Generator, signature: str) -> list[str]:
    words = []
    for _ in range(TOPIC_WORDS):
        length = int(rng.integers(2, 7))
        chars = [signature[rng.integers(len(signature))] if rng.random() < 0.7
                 else VOWELS[rng.integers(len(VOWELS))] for _ in range(length)]
        words.append("".join(chars))
    return words


def synth_corpus(n_topics: int, docs_per_topic: int, doc_len: int, rng: np.random.Generator) -> Corpus:
    """Topic-labelled synthetic text.

    Each topic owns a small word list spelled mostly from its own signature
    consonants, so topics have clearly different character statistics while
    sharing spaces, vowels and a handful of common words. Word frequencies
    within a topic follow a Zipf law.
    """
    for name, value in (("n_topics", n_topics), ("docs_per_topic", docs_per_topic), ("doc_len", doc_len)):
        if value < 1:
            raise DomainError(f"{name} must be positive, got {value}")
    vocab = synthetic_vocab(n_topics)
    lexicons = [_topic_words(rng, _signature(t)) for t in range(n_topics)]
    zipf = 1.0 / np.arange(1, TOPIC_WORDS + 1)
    zipf /= zipf.sum()
    documents = []
    for topic in range(n_topics):
        words = lexicons[topic]
        for _ in range(docs_per_topic):
            pieces, length = [], 0
            while length <= doc_len:  # the joined text is one separator shorter
                if rng.random() < FUNCTION_WORD_RATE:
                    w = FUNCTION_WORDS[rng.integers(len(FUNCTION_WORDS))]
                else:
                    w = words[rng.choice(TOPIC_WORDS, p=zipf)]
                if rng.random() < PERIOD_RATE:
                    w += "."
                pieces.append(w)
                length += len(w) + 1
            text = " ".join(pieces)[:doc_len]
            documents.append(Document(topic, vocab.encode(text)))
    return Corpus(documents, vocab, n_topics)


def load_corpus(directory) -> Corpus:
    """One UTF-8 file per topic (sorted by name), one document per non-empty line."""
    directory = Path(directory)
    files = sorted(p for p in directory.glob("*.txt") if p.is_file())
    if not files:
        raise DomainError(f"no .txt topic files found in {directory}")
    raw = []
    for topic, path in enumerate(files):
        lines = [ln.rstrip("\n") for ln in path.read_text(encoding="utf-8").splitlines()]
        raw.extend((topic, ln) for ln in lines if ln.strip())
    vocab = CharVocab.from_texts(text for _, text in raw)
    return Corpus([Document(t, vocab.encode(text)) for t, text in raw], vocab, len(files))


def split_corpus(corpus: Corpus, public_fraction: float, test_fraction: float,
                 rng: np.random.Generator) -> tuple[Corpus, Corpus, Corpus]:
    """Stratified split into (public pretraining, federated pool, global test)."""
    if public_fraction < 0 or test_fraction < 0 or public_fraction + test_fraction >= 1:
        raise DomainError("public and test fractions must be non-negative and sum below 1")
    public, pool, test = [], [], []
    labels = corpus.labels
    for topic in range(corpus.n_topics):
        idx = rng.permutation(np.flatnonzero(labels == topic))
        n_pub = int(round(public_fraction * len(idx)))
        n_test = int(round(test_fraction * len(idx)))
        public.extend(idx[:n_pub])
        test.extend(idx[n_pub:n_pub + n_test])
        pool.extend(idx[n_pub + n_test:])
    return tuple(corpus.subset(sorted(int(i) for i in part)) for part in (public, pool, test))


# -- partitioning ----------------------------------------------------------


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int
    concentration: float = 0.3
    seed: int = 0
    min_samples_per_client: int = 2

    def __post_init__(self):
        problems = []
        if self.n_clients < 1:
            problems.append(f"n_clients must be >= 1, got {self.n_clients}")
        if not self.concentration > 0:
            problems.append(f"concentration must be positive, got {self.concentration}")
        if self.min_samples_per_client < 1:
            problems.append(f"min_samples_per_client must be >= 1, got {self.min_samples_per_client}")
        if problems:
            raise ConfigError(problems)


@dataclass
class ClientDataset:
    client_id: int
    train: list[np.ndarray]
    test: list[np.ndarray]
    train_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)
    topic_histogram: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    mixture: np.ndarray | None = None

    @property
    def n_k(self) -> int:
        return len(self.train)


def partition(corpus: Corpus, config: PartitionConfig) -> list[ClientDataset]:
    """Dirichlet topic-mixture partition with per-client 80/20 splits.

    Every client ``k`` draws topic proportions ``p_k ~ Dir(concentration)``.
    Each document of topic ``l`` then goes to client ``k`` with probability
    ``p_k[l] / sum_j p_j[l]`` (one multinomial draw per topic), so a client's
    share of a topic follows its own drawn proportion. Clients left below
    ``min_samples_per_client`` take documents from the largest client, picking
    the topic they weight most. Documents are never split or duplicated.
    """
    K, L, N = config.n_clients, corpus.n_topics, len(corpus)
    need = K * config.min_samples_per_client
    if N < need:
        raise PartitionError(
            f"{N} documents cannot give {K} clients {config.min_samples_per_client} each "
            f"(need at least {need})")
    rng = make_rng(config.seed, STREAM_PARTITION)
    mixtures = np.array([dirichlet_sample(rng, config.concentration, L) for _ in range(K)])
    labels = corpus.labels
    assigned: list[list[int]] = [[] for _ in range(K)]
    for topic in range(L):
        docs = rng.permutation(np.flatnonzero(labels == topic))
        col = mixtures[:, topic]
        col = col / col.sum() if col.sum() > 0 else np.full(K, 1.0 / K)
        counts = rng.multinomial(len(docs), col)
        start = 0
        for k in range(K):
            assigned[k].extend(int(i) for i in docs[start:start + counts[k]])
            start += counts[k]

    while True:
        sizes = [len(a) for a in assigned]
        short = [k for k in range(K) if sizes[k] < config.min_samples_per_client]
        if not short:
            break
        k = short[0]
        donor = int(np.argmax(sizes))
        pick = max(range(len(assigned[donor])),
                   key=lambda i: (mixtures[k][labels[assigned[donor][i]]], -i))
        assigned[k].append(assigned[donor].pop(pick))

    clients = []
    for k, docs in enumerate(assigned):
        order = [docs[i] for i in rng.permutation(len(docs))]
        n = len(order)
        n_test = min(max(1, int(math.floor((1 - TRAIN_FRACTION) * n + 0.5))), n - 1) if n >= 2 else 0
        test_ids = sorted(order[:n_test])
        train_ids = sorted(order[n_test:])
        hist = np.bincount(labels[docs], minlength=L) if docs else np.zeros(L, dtype=np.int64)
        clients.append(ClientDataset(
            client_id=k,
            train=[corpus.documents[i].tokens for i in train_ids],
            test=[corpus.documents[i].tokens for i in test_ids],
            train_ids=train_ids,
            test_ids=test_ids,
            topic_histogram=hist,
            mixture=mixtures[k],
        ))
    return clients


def pooled_client(clients: Sequence[ClientDataset], client_id: int = 0) -> ClientDataset:
    """All clients' data merged into one dataset (centralized baselines)."""
    hist = np.sum([c.topic_histogram for c in clients], axis=0)
    return ClientDataset(
        client_id=client_id,
        train=[s for c in clients for s in c.train],
        test=[s for c in clients for s in c.test],
        train_ids=[i for c in clients for i in c.train_ids],
        test_ids=[i for c in clients for i in c.test_ids],
        topic_histogram=hist,
    )


def total_variation(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


def unigram_distribution(sequences, vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for s in sequences:
        counts += np.bincount(np.asarray(s), minlength=vocab_size)
    return counts / counts.sum()


@dataclass
class HeterogeneityReport:
    histograms: np.ndarray
    mixtures: np.ndarray
    max_topic_share: np.ndarray
    mean_pairwise_tv: float

    def to_dict(self) -> dict:
        return {
            "histograms": self.histograms.tolist(),
            "max_topic_share": [float(x) for x in self.max_topic_share],
            "mean_pairwise_tv": self.mean_pairwise_tv,
        }


def heterogeneity_report(partitions: Sequence[ClientDataset]) -> HeterogeneityReport:
    """Per-client topic histograms and mean pairwise total-variation distance."""
    if not partitions:
        raise DomainError("heterogeneity report needs at least one client")
    hists = np.array([c.topic_histogram for c in partitions], dtype=np.float64)
    totals = hists.sum(1, keepdims=True)
    mix = np.divide(hists, totals, out=np.zeros_like(hists), where=totals > 0)
    pairs = list(itertools.combinations(range(len(partitions)), 2))
    tv = float(np.mean([total_variation(mix[i], mix[j]) for i, j in pairs])) if pairs else 0.0
    return HeterogeneityReport(hists.astype(np.int64), mix, mix.max(1), tv)


def partition_manifest(partitions: Sequence[ClientDataset]) -> dict:
    """JSON-ready audit trail: which corpus documents each client holds."""
    return {
        "clients": [
            {
                "client_id": c.client_id,
                "train": [int(i) for i in c.train_ids],
                "test": [int(i) for i in c.test_ids],
                "topic_histogram": [int(x) for x in c.topic_histogram],
            }
            for c in partitions
        ]
    }
