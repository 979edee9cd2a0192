"""``fedgen`` command line: pretrain, run, ablate, gradcheck, personalize, report.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ExperimentConfig, load_config
from .data import Corpus, PartitionConfig, load_corpus, partition, partition_manifest, split_corpus, synth_corpus
from .errors import ConfigError, FedGenError
from .federation import (ADAPTER_STRATEGIES, CLIENT_MODEL_STRATEGIES, TrainingResult,
                         clients_per_round, personalize, personalize_full, run_training, uplink_params)
from .gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from .linalg import make_rng
from .lora import load_adapter, save_adapter
from .metrics import (ClientPersonalization, emit, load_ledger, load_rounds, personalization_stats,
                      reduction_ratio, write_json)
from .model import load_backbone, perplexity, pretrain_backbone, save_backbone, sequence_nll

log = logging.getLogger("fedgen")

STREAM_CORPUS = 1
STREAM_SPLIT = 3
STREAM_PRETRAIN = 4

RANK_SWEEP = (2, 4, 8, 16, 32)
EPOCH_SWEEP = (1, 5, 10, 20)

BACKBONE_FILE = "backbone.fgbb"
ADAPTER_FILE = "final_adapter.fgla"
MODEL_FILE = "final_model.fgbb"


@dataclass
class Experiment:
    """Everything a run derives from its config before training starts."""
    config: ExperimentConfig
    corpus: Corpus
    public: Corpus
    pool: Corpus
    test: Corpus
    clients: list


def prepare_data(config: ExperimentConfig) -> Experiment:
    d = config.data
    if d.source == "synth":
        corpus = synth_corpus(d.n_topics, d.docs_per_topic, d.doc_len, make_rng(d.corpus_seed, STREAM_CORPUS))
    else:
        corpus = load_corpus(d.corpus_dir)
    public, pool, test = split_corpus(corpus, d.public_fraction, d.test_fraction,
                                      make_rng(d.corpus_seed, STREAM_SPLIT))
    if not test.documents:
        raise ConfigError("data.test_fraction leaves the global test set empty")
    clients = partition(pool, PartitionConfig(d.n_clients, d.concentration, config.seed, d.min_samples_per_client))
    return Experiment(config, corpus, public, pool, test, clients)


def pretrain(config: ExperimentConfig, public: Corpus):
    m = config.model
    model_config = config.model_config(public.vocab.size)
    if not public.documents:
        raise ConfigError("data.public_fraction leaves no documents for pretraining")
    return pretrain_backbone(public.sequences, model_config, m.pretrain_steps, make_rng(m.pretrain_seed, STREAM_PRETRAIN),
                             lr=m.pretrain_lr, batch_size=m.pretrain_batch_size)


def obtain_backbone(config: ExperimentConfig, exp: Experiment):
    if config.model.backbone_path:
        backbone, _ = load_backbone(config.model.backbone_path)
        expected = config.model_config(exp.corpus.vocab.size)
        if backbone.config != expected:
            raise ConfigError(f"model: checkpoint {config.model.backbone_path} has {backbone.config}, "
                              f"config implies {expected}")
        return backbone
    log.info("no backbone_path configured; pretraining for %d steps", config.model.pretrain_steps)
    return pretrain(config, exp.public)[0]


# -- commands --------------------------------------------------------------


def cmd_pretrain(config: ExperimentConfig, out=None) -> Path:
    """Pretrain and freeze the backbone; writes ``backbone.fgbb`` into ``out``."""
    out = Path(out or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = prepare_data(config)
    backbone, trace = pretrain(config, exp.public)
    meta = {"code_version": __version__, "model": config.to_dict()["model"], "data": config.to_dict()["data"],
            "first_loss": trace[0] if trace else None, "final_loss": trace[-1] if trace else None}
    path = save_backbone(backbone, out / BACKBONE_FILE, meta)
    write_json(out / "pretrain.json", {"checksum": backbone.checksum(), "steps": len(trace),
                                       "loss_trace": [float(f"{v:.6g}") for v in trace]})
    return path


def _final_train_loss(result: TrainingResult, clients) -> float:
    total, count = 0.0, 0
    for c in clients:
        if not c.train:
            continue
        model = result.client_model(c.client_id) if result.strategy in CLIENT_MODEL_STRATEGIES \
            else result.global_model()
        t, n = sequence_nll(*model, c.train)
        total += t
        count += n
    return total / count if count else float("nan")


def manifest(config: ExperimentConfig, backbone_checksum: str) -> dict:
    fed = config.federation_config()
    return {
        "config": config.to_dict(),
        "code_version": __version__,
        "seed": config.seed,
        "backbone_checksum": backbone_checksum,
        "resolved": {
            "clients_per_round": clients_per_round(fed.n_clients, fed.participation),
            "aggregation_weights": "n_k / sum of n_j over participating clients",
            "wire_bits_per_param": 32,
            "personalization_optimizer": "reset",
            "ditto_lambda": fed.ditto_lambda,
        },
    }


def cmd_run(config: ExperimentConfig, out=None, exp: Experiment | None = None) -> Path:
    """One full training run; returns the run directory."""
    run_dir = Path(out or config.output.dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    exp = exp or prepare_data(config)
    backbone = obtain_backbone(config, exp)
    start = backbone.checksum()
    write_json(run_dir / "manifest.json", manifest(config, start))
    write_json(run_dir / "partition.json", partition_manifest(exp.clients))
    save_backbone(backbone, run_dir / BACKBONE_FILE, {"source": config.model.backbone_path or "pretrained in run"})

    fed = config.federation_config()
    lora = config.lora_config(backbone.config)
    result = run_training(exp.clients, backbone, fed, lora, exp.test.sequences)

    for fmt in config.output.formats:
        emit(result.records, run_dir / f"rounds.{fmt}", fmt)
        emit(result.ledger, run_dir / f"ledger.{fmt}", fmt)
    clients_dir = run_dir / "clients"
    clients_dir.mkdir(exist_ok=True)
    if result.strategy in ADAPTER_STRATEGIES:
        if result.strategy != "LocalOnly":
            save_adapter(result.global_adapter, run_dir / ADAPTER_FILE)
        if result.strategy in ("LocalOnly", "Ditto"):
            for k in range(len(exp.clients)):
                save_adapter(result.client_model(k)[1], clients_dir / f"client_{k:03d}.fgla")
    else:
        final_backbone = result.global_model()[0]
        save_backbone(final_backbone, run_dir / MODEL_FILE, {"strategy": result.strategy})
        if result.strategy == "FedPer":
            for k in range(len(exp.clients)):
                save_backbone(result.client_model(k)[0], clients_dir / f"client_{k:03d}.fgbb")

    final_model_checksum = result.global_model()[0].checksum()
    summary = {
        "strategy": result.strategy,
        "seed": config.seed,
        "rounds": len(result.records),
        "n_clients": len(exp.clients),
        "final_global_ppl": result.final_global_perplexity(exp.test.sequences, len(exp.clients)),
        "final_train_loss": _final_train_loss(result, exp.clients),
        "uplink_params_per_client": uplink_params(result.strategy, backbone.config, lora),
        "total_upload_bytes": result.ledger.total_upload,
        "total_download_bytes": result.ledger.total_download,
        "backbone_checksum_start": start,
        "backbone_checksum_end": backbone.checksum(),
        "final_model_checksum": final_model_checksum,
        "backbone_modified": final_model_checksum != start,
    }
    write_json(run_dir / "summary.json", summary)
    return run_dir


def _run_context(run_dir: Path):
    path = run_dir / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir} has no manifest.json; is it a run directory?")
    config = load_config(path)
    backbone, _ = load_backbone(run_dir / BACKBONE_FILE)
    summary = json.loads((run_dir / "summary.json").read_text()) if (run_dir / "summary.json").is_file() else {}
    return config, backbone, summary


def _local_only_models(run_dir: Path | None, config: ExperimentConfig, exp: Experiment, backbone):
    """Per-client LocalOnly adapters, loaded from a run or trained here."""
    if run_dir is not None:
        paths = [run_dir / "clients" / f"client_{k:03d}.fgla" for k in range(len(exp.clients))]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise FileNotFoundError(f"LocalOnly run {run_dir} lacks client adapters: {missing[:3]}")
        return [load_adapter(p) for p in paths]
    local_cfg = config.with_overrides(**{"federation.strategy": "LocalOnly"})
    result = run_training(exp.clients, backbone, local_cfg.federation_config(),
                          local_cfg.lora_config(backbone.config))
    return [result.client_model(k)[1] for k in range(len(exp.clients))]


def cmd_personalize(run_dir, local_only_run=None, lr: float | None = None, epochs: int = 1) -> Path:
    """Global vs one-epoch-personalized vs local-only perplexity on each client's test split."""
    run_dir = Path(run_dir)
    config, backbone, _ = _run_context(run_dir)
    strategy = config.federation.strategy
    if strategy in ("LocalOnly",):
        raise ConfigError("personalization needs a run with a global model; LocalOnly has none")
    if lr is not None:
        config = config.with_overrides(**{"federation.lr": lr})
    exp = prepare_data(config)
    fed = config.federation_config()
    if strategy in ADAPTER_STRATEGIES:
        path = run_dir / ADAPTER_FILE
        if not path.is_file():
            raise FileNotFoundError(f"missing final parameters {path}")
        global_adapter = load_adapter(path)
    else:
        path = run_dir / MODEL_FILE
        if not path.is_file():
            raise FileNotFoundError(f"missing final parameters {path}")
        global_backbone, _ = load_backbone(path)
    local_models = _local_only_models(Path(local_only_run) if local_only_run else None, config, exp, backbone)

    rows = []
    for c in exp.clients:
        k = c.client_id
        if strategy in ADAPTER_STRATEGIES:
            g_model = (backbone, global_adapter)
            p_model = (backbone, personalize(c, backbone, global_adapter, fed, epochs))
        else:
            base = global_backbone
            if strategy == "FedPer":
                base, _ = load_backbone(run_dir / "clients" / f"client_{k:03d}.fgbb")
            g_model = (base, None)
            p_model = (personalize_full(c, base, fed, epochs), None)
        rows.append(ClientPersonalization(
            k, perplexity(*g_model, c.test), perplexity(*p_model, c.test),
            perplexity(backbone, local_models[k], c.test)))
    report = personalization_stats(rows)
    emit(report, run_dir / "personalization.csv", "csv")
    write_json(run_dir / "personalization.json", report.to_dict())
    return run_dir / "personalization.csv"


def cmd_ablate(config: ExperimentConfig, sweep: str, values: Sequence | None = None, out=None) -> Path:
    """One run per swept value with everything else shared; writes ``ablation.csv``."""
    if sweep not in ("rank", "epochs"):
        raise ConfigError(f"sweep must be 'rank' or 'epochs', got {sweep!r}")
    values = list(values) if values else list(RANK_SWEEP if sweep == "rank" else EPOCH_SWEEP)
    key = "model.lora_rank" if sweep == "rank" else "federation.local_epochs"
    configs = [config.with_overrides(**{key: int(v)}) for v in values]  # validate all before running
    out = Path(out or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = prepare_data(config)
    rows = []
    for v, cfg in zip(values, configs):
        run_dir = cmd_run(cfg, out / f"{sweep}_{int(v)}", exp)
        s = json.loads((run_dir / "summary.json").read_text())
        rows.append((sweep, int(v), s["final_global_ppl"], s["final_train_loss"],
                     s["uplink_params_per_client"], 4 * s["uplink_params_per_client"], s["total_upload_bytes"]))
    path = out / "ablation.csv"
    header = ("sweep", "value", "final_ppl", "final_train_loss", "uplink_params", "uplink_bytes_per_upload",
              "total_upload_bytes")
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join([r[0], str(r[1]), f"{r[2]:.6g}", f"{r[3]:.6g}", str(r[4]), str(r[5]), str(r[6])]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def cmd_gradcheck(n_cases: int = 20, seed: int = 0, tolerance: float = DEFAULT_TOLERANCE, out=None, grad_fn=None):
    kwargs = {"grad_fn": grad_fn} if grad_fn is not None else {}
    report = run_gradcheck(n_cases, seed, tolerance, **kwargs)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(Path(out) / "gradcheck.json", report.to_dict())
    return report


def cmd_report(run_dirs: Sequence, out=None) -> dict:
    """Summaries of finished runs, plus upload reductions against any FedAvgFull run."""
    runs = []
    for d in run_dirs:
        d = Path(d)
        if not (d / "summary.json").is_file():
            raise FileNotFoundError(f"{d} has no summary.json")
        s = json.loads((d / "summary.json").read_text())
        records = load_rounds(d / "rounds.csv")
        ledger = load_ledger(d / "ledger.csv")
        runs.append({"dir": str(d), "summary": s, "ledger": ledger,
                     "ppl_curve": [r.global_eval_perplexity for r in records]})
    reference = next((r for r in runs if r["summary"]["strategy"] == "FedAvgFull"), None)
    table = []
    for r in runs:
        row = {"dir": r["dir"], "strategy": r["summary"]["strategy"], "seed": r["summary"]["seed"],
               "final_global_ppl": r["summary"]["final_global_ppl"],
               "total_upload_bytes": r["ledger"].total_upload}
        if reference is not None and reference["ledger"].total_upload:
            row["upload_reduction_vs_fedavgfull"] = reduction_ratio(r["ledger"], reference["ledger"])
        table.append(row)
    payload = {"runs": table}
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(Path(out) / "report.json", payload)
    return payload


# -- argument parsing ------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML config, or a run manifest")
    common.add_argument("--seed", type=_u64, help="experiment seed (partition, init, selection)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--strategy", help="federation strategy")
    common.add_argument("--parallel-clients", type=int, help="client updates run concurrently per round")

    parser = _Parser(prog="fedgen", description="Federated LoRA adapters over a frozen tiny transformer.")
    parser.add_argument("--version", action="version", version=f"fedgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the backbone")
    sub.add_parser("run", parents=[common], help="one federated (or baseline) training run")
    p = sub.add_parser("ablate", parents=[common], help="rank or local-epoch sweep")
    p.add_argument("--sweep", choices=("rank", "epochs"), required=True)
    p.add_argument("--values", type=int, nargs="+", help="override the default sweep values")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p = sub.add_parser("personalize", parents=[common], help="personalization report for a finished run")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--local-only-run", type=Path, help="LocalOnly run whose client adapters to compare against")
    p.add_argument("--lr", type=float, help="learning rate for the personalization epoch")
    p = sub.add_parser("report", parents=[common], help="summarize finished runs")
    p.add_argument("run_dirs", type=Path, nargs="+")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.strategy is not None:
        overrides["federation.strategy"] = args.strategy
    if args.parallel_clients is not None:
        overrides["federation.parallel_clients"] = args.parallel_clients
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    return config.with_overrides(**overrides) if overrides else config


def _setup_logging() -> None:
    level = os.environ.get("FEDGEN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command == "gradcheck":
            seed = args.seed if args.seed is not None else 0
            report = cmd_gradcheck(args.cases, seed, args.tolerance, args.out)
            for i, case in enumerate(report.cases):
                print(f"case {i:2d} dim={case.config['dim']:2d} max_rel_err={case.max_error:.3e}")
            status = "PASS" if report.passed else "FAIL"
            print(f"{status} max relative error {report.max_error:.3e} (tolerance {report.tolerance:g})")
            return 0 if report.passed else 2
        if args.command == "report":
            payload = cmd_report(args.run_dirs, args.out)
            for row in payload["runs"]:
                extra = f" reduction={row['upload_reduction_vs_fedavgfull']:.6f}" \
                    if "upload_reduction_vs_fedavgfull" in row else ""
                print(f"{row['strategy']:<16} seed={row['seed']} ppl={row['final_global_ppl']:.4f} "
                      f"upload={row['total_upload_bytes']}{extra}  {row['dir']}")
            return 0
        if args.command == "personalize":
            path = cmd_personalize(args.run_dir, args.local_only_run, args.lr)
            s = json.loads((args.run_dir / "personalization.json").read_text())
            print(f"mean ppl global={s['mean_ppl_global']} personalized={s['mean_ppl_personalized']} "
                  f"local_only={s['mean_ppl_local_only']} improved={s['fraction_improved']}")
            print(path)
            return 0
        config = _resolve_config(args)
        if args.command == "pretrain":
            print(cmd_pretrain(config))
        elif args.command == "run":
            print(cmd_run(config))
        elif args.command == "ablate":
            print(cmd_ablate(config, args.sweep, args.values))
        return 0
    except ConfigError as exc:
        print(f"fedgen: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (FedGenError, OSError, ValueError) as exc:
        print(f"fedgen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
