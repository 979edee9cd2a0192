"""Communication ledger, round records, personalization statistics, emitters.

Wire accounting counts 32 bits per transmitted parameter regardless of the
64-bit arithmetic used internally. Only client-to-server traffic counts as
upload cost; server broadcasts are tracked separately as downlink.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

WIRE_BITS_PER_PARAM = 32

ROUNDS_HEADER = ("round", "ppl_global", "mean_local_loss", "clients", "cum_uplink_bytes")
LEDGER_HEADER = ("round", "client_id", "params", "bytes")
PERSONALIZATION_HEADER = ("client_id", "ppl_global", "ppl_personalized", "ppl_local_only", "gain")
GAIN_BINS = 10


def comm_cost(params: int) -> int:
    """Bits needed to upload ``params`` parameters."""
    if params < 0:
        raise DomainError(f"parameter count must be non-negative, got {params}")
    return WIRE_BITS_PER_PARAM * int(params)


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    client_id: int
    params: int
    bytes: int


@dataclass
class CommLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    downlink: list[LedgerEntry] = field(default_factory=list)
    wire_bits_per_param: int = WIRE_BITS_PER_PARAM

    def _entry(self, round_index: int, client_id: int, params: int) -> LedgerEntry:
        return LedgerEntry(round_index, client_id, int(params),
                           int(params) * self.wire_bits_per_param // 8)

    def record_upload(self, round_index: int, client_id: int, params: int) -> LedgerEntry:
        entry = self._entry(round_index, client_id, params)
        self.entries.append(entry)
        return entry

    def record_download(self, round_index: int, client_id: int, params: int) -> LedgerEntry:
        entry = self._entry(round_index, client_id, params)
        self.downlink.append(entry)
        return entry

    @property
    def total_upload(self) -> int:
        return sum(e.bytes for e in self.entries)

    @property
    def total_download(self) -> int:
        return sum(e.bytes for e in self.downlink)


def total_upload(ledger: CommLedger) -> int:
    return ledger.total_upload


def reduction_ratio(ledger_a: CommLedger, ledger_b: CommLedger) -> float:
    """``1 - upload(a) / upload(b)``, computed exactly then rounded once."""
    denom = ledger_b.total_upload
    if denom == 0:
        raise DomainError("reference ledger uploaded nothing; reduction ratio is undefined")
    return float(1 - Fraction(ledger_a.total_upload, denom))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_eval_perplexity: float
    mean_local_train_loss: float
    participating_clients: tuple[int, ...]
    cumulative_uplink_bytes: int


@dataclass(frozen=True)
class ClientPersonalization:
    client_id: int
    ppl_global: float
    ppl_personalized: float
    ppl_local_only: float

    @property
    def gain(self) -> float:
        """Perplexity reduction from personalizing the global model."""
        return self.ppl_global - self.ppl_personalized


@dataclass
class PersonalizationReport:
    rows: list[ClientPersonalization]
    mean_ppl_global: float
    mean_ppl_personalized: float
    mean_ppl_local_only: float
    mean_gain: float
    fraction_improved: float
    gain_histogram: list[int]
    gain_bin_edges: list[float]

    def to_dict(self) -> dict:
        return {
            "clients": len(self.rows),
            "mean_ppl_global": _round6(self.mean_ppl_global),
            "mean_ppl_personalized": _round6(self.mean_ppl_personalized),
            "mean_ppl_local_only": _round6(self.mean_ppl_local_only),
            "mean_gain": _round6(self.mean_gain),
            "fraction_improved": _round6(self.fraction_improved),
            "gain_histogram": list(self.gain_histogram),
            "gain_bin_edges": [_round6(e) for e in self.gain_bin_edges],
        }


def personalization_stats(rows: Sequence[ClientPersonalization]) -> PersonalizationReport:
    if not rows:
        raise DomainError("personalization report needs at least one client")
    for r in rows:
        for name in ("ppl_global", "ppl_personalized", "ppl_local_only"):
            value = getattr(r, name)
            if value is None or not math.isfinite(value):
                raise DomainError(f"client {r.client_id} is missing {name}; report is incomplete")
    gains = np.array([r.gain for r in rows])
    counts, edges = np.histogram(gains, bins=GAIN_BINS)
    return PersonalizationReport(
        rows=list(rows),
        mean_ppl_global=float(np.mean([r.ppl_global for r in rows])),
        mean_ppl_personalized=float(np.mean([r.ppl_personalized for r in rows])),
        mean_ppl_local_only=float(np.mean([r.ppl_local_only for r in rows])),
        mean_gain=float(gains.mean()),
        fraction_improved=float((gains > 0).sum()) / len(rows),
        gain_histogram=[int(c) for c in counts],
        gain_bin_edges=[float(e) for e in edges],
    )


# -- emitters --------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".6g")


def _round6(value: float) -> float:
    return float(_fmt(value))


def _rows(obj) -> tuple[tuple[str, ...], list[tuple]]:
    if isinstance(obj, CommLedger):
        return LEDGER_HEADER, [(e.round, e.client_id, e.params, e.bytes) for e in obj.entries]
    if isinstance(obj, PersonalizationReport):
        return PERSONALIZATION_HEADER, [
            (r.client_id, r.ppl_global, r.ppl_personalized, r.ppl_local_only, r.gain) for r in obj.rows
        ]
    records = list(obj)
    if all(isinstance(r, RoundRecord) for r in records):
        return ROUNDS_HEADER, [
            (r.round, r.global_eval_perplexity, r.mean_local_train_loss,
             ";".join(str(c) for c in r.participating_clients), r.cumulative_uplink_bytes)
            for r in records
        ]
    raise TypeError(f"cannot emit object of type {type(obj).__name__}")


def _json_payload(obj):
    header, rows = _rows(obj)
    items = [
        {k: (v if isinstance(v, str) else (_round6(v) if isinstance(v, float) else int(v)))
         for k, v in zip(header, row)}
        for row in rows
    ]
    if isinstance(obj, CommLedger):
        return {"wire_bits_per_param": obj.wire_bits_per_param,
                "total_upload_bytes": obj.total_upload,
                "total_download_bytes": obj.total_download,
                "entries": items}
    if isinstance(obj, PersonalizationReport):
        return {"summary": obj.to_dict(), "clients": items}
    return {"rounds": items}


def emit(obj, path, fmt: str = "csv") -> Path:
    """Write records, a ledger or a personalization report as CSV or JSON.

    Output depends only on the values: fixed column order, floats printed
    with 6 significant digits, ``\\n`` line endings.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            header, rows = _rows(obj)
            with path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows([[v if isinstance(v, str) else _fmt(v) for v in row] for row in rows])
        elif fmt == "json":
            write_json(path, _json_payload(obj))
        else:
            raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_csv(path, header: Sequence[str]) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(header):
            raise DomainError(f"{path}: header {reader.fieldnames} does not match {list(header)}")
        return list(reader)


def load_rounds(path) -> list[RoundRecord]:
    return [
        RoundRecord(
            round=int(r["round"]),
            global_eval_perplexity=float(r["ppl_global"]),
            mean_local_train_loss=float(r["mean_local_loss"]),
            participating_clients=tuple(int(c) for c in r["clients"].split(";") if c),
            cumulative_uplink_bytes=int(r["cum_uplink_bytes"]),
        )
        for r in _read_csv(path, ROUNDS_HEADER)
    ]


def load_ledger(path) -> CommLedger:
    ledger = CommLedger()
    for r in _read_csv(path, LEDGER_HEADER):
        entry = LedgerEntry(int(r["round"]), int(r["client_id"]), int(r["params"]), int(r["bytes"]))
        ledger.entries.append(entry)
    return ledger


def load_personalization(path) -> list[ClientPersonalization]:
    return [
        ClientPersonalization(int(r["client_id"]), float(r["ppl_global"]),
                              float(r["ppl_personalized"]), float(r["ppl_local_only"]))
        for r in _read_csv(path, PERSONALIZATION_HEADER)
    ]


def ablation_rows(values: Iterable, summaries: Iterable[dict]) -> list[dict]:
    """Flatten per-value run summaries into rows for the sweep table."""
    return [{"value": v, **s} for v, s in zip(values, summaries)]
