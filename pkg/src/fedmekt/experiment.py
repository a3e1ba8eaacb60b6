"""End-to-end experiment runner and ablation sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import data as D
from .config import ExperimentConfig, serialize
from .evaluation import (
    CommLedger,
    RoundMetrics,
    comm_cost,
    linear_probe,
    macro_f1,
    representations,
    summarize,
    write_metrics,
)
from .federation import ClientState, ServerState, run_round
from .models import MODALITIES, ArchSpec, init_classifier, init_model, preset, save_checkpoint
from . import autograd as ag

log = logging.getLogger(__name__)


@dataclass
class Setup:
    arch: ArchSpec
    server: ServerState
    clients: list[ClientState]
    test: D.MultimodalDataset
    splits: D.Splits
    plan: D.PartitionPlan


def load_dataset(cfg: ExperimentConfig) -> D.MultimodalDataset:
    if cfg.dataset == "csv":
        return D.load_csv(cfg.csv_path, cfg.schema_path, cfg.seq_len, cfg.stride)
    return D.synth_generate(
        cfg.synth_classes,
        cfg.synth_d_a,
        cfg.synth_d_b,
        cfg.synth_n,
        cfg.seq_len,
        cfg.synth_sigma,
        cfg.seed_data,
        cfg.synth_latent,
        cfg.synth_separation,
    )


def build_arch(cfg: ExperimentConfig, dataset: D.MultimodalDataset) -> ArchSpec:
    if cfg.arch_preset:
        name, mod_a, mod_b = cfg.arch_preset.split(":")
        arch = preset(name, mod_a, mod_b, cfg.seq_len)
        dims = dataset.dims()
        if dims != arch.input_dims:
            raise D.DataError(f"preset {cfg.arch_preset} expects input dims {arch.input_dims}, data has {dims}")
        return arch
    return ArchSpec(dataset.dims(), {"A": cfg.h1_a, "B": cfg.h1_b}, cfg.h2, dataset.seq_len, dataset.names)


def build(cfg: ExperimentConfig) -> Setup:
    dataset = load_dataset(cfg)
    splits = D.make_splits(
        dataset, cfg.proxy_fraction, cfg.labeled_fraction, cfg.test_fraction, cfg.seed_data, cfg.proxy_subsample
    )
    train, stats = D.normalize(splits.train)
    proxy, _ = D.normalize(splits.proxy, stats)
    labeled, _ = D.normalize(splits.labeled, stats)
    test, _ = D.normalize(splits.test, stats)
    proxy.owner, labeled.owner = "shared:proxy", "server"
    splits = D.Splits(train, proxy, labeled, test, splits.index)

    plan = D.partition(
        train.labels,
        cfg.num_clients,
        cfg.client_mode,
        cfg.seed_data,
        cfg.dirichlet,
        tuple(cfg.mixed_counts) if cfg.mixed_counts else None,
    )
    arch = build_arch(cfg, dataset)
    clients = []
    for cid, (idx, mods) in enumerate(zip(plan.indices, plan.modalities)):
        shard = train.subset(idx, owner=f"client:{cid}", modalities=mods, keep_labels=False)
        clients.append(ClientState(cid, mods, shard, init_model(arch, cfg.seed_model, mods)))
    classifier = init_classifier(arch.h2, dataset.n_classes, cfg.seed_model + 1, cfg.clf_hidden or None)
    server = ServerState(init_model(arch, cfg.seed_model), classifier, proxy, labeled)
    return Setup(arch, server, clients, test, splits, plan)


def evaluate(setup: Setup, cfg: ExperimentConfig, t: int) -> tuple[dict[str, float], dict[str, float]]:
    """Linear-probe and generalized-classifier macro-F1 per modality on the test split."""
    server, test = setup.server, setup.test
    probe, clf = {}, {}
    with D.scope("evaluator"):
        for m in MODALITIES:
            probe[m] = linear_probe(server.model, server.labeled, test, m, cfg.probe_epochs, cfg.probe_lr, cfg.seed_model + 7)
            with ag.no_grad():
                logits = server.classifier(ag.Tensor(representations(server.model, m, test.x[m]))).data
            clf[m] = macro_f1(logits.argmax(axis=1), test.labels)
    return probe, clf


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    ledger: CommLedger
    setup: Setup
    summary: dict[str, dict[str, float]] = field(default_factory=dict)


def simulate(cfg: ExperimentConfig, setup: Setup | None = None) -> RunResult:
    """Run all rounds in memory; no files are written."""
    setup = setup or build(cfg)
    rcfg = cfg.round_config()
    ledger = CommLedger()
    probe, clf = evaluate(setup, cfg, 0)
    metrics = [RoundMetrics(0, probe, clf, None, None, 0, 0, 0, 0, {})]
    cumulative = 0
    for t in range(1, cfg.rounds + 1):
        res = run_round(setup.server, setup.clients, rcfg, t, cfg.seed_sampling, ledger)
        up, down = ledger.round_bytes(t)
        cumulative += up + down
        probe, clf = evaluate(setup, cfg, t)
        metrics.append(
            RoundMetrics(
                t,
                probe,
                clf,
                res.client_loss,
                res.server_loss,
                up,
                down,
                cumulative,
                ledger.total(kind="proxy", t=t),
                res.contributors,
            )
        )
        log.info("round %d probe %s", t, {m: round(v, 4) for m, v in probe.items()})
        if cfg.checkpoint_every and t % cfg.checkpoint_every == 0 and cfg.output_dir:
            ck = Path(cfg.output_dir) / "checkpoints"
            ck.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ck / f"server_round{t:04d}.npz", setup.server.model, setup.server.classifier, round=t)
    return RunResult(metrics, ledger, setup, summarize(metrics))


SUMMARY_FIELDS = [
    "strategy",
    "modality_pair",
    "task_modality",
    "probe_f1_avg_last10",
    "classifier_f1_avg_last10",
    "total_bytes",
    "proxy_bytes",
]


def summary_rows(cfg: ExperimentConfig, result: RunResult) -> list[dict[str, Any]]:
    names = result.setup.arch.names
    pair = f"{names['A']}-{names['B']}"
    total = result.metrics[-1].cumulative_bytes
    proxy = result.ledger.total(kind="proxy")
    return [
        {
            "strategy": cfg.strategy,
            "modality_pair": pair,
            "task_modality": names[m],
            "probe_f1_avg_last10": result.summary[m]["probe_f1"],
            "classifier_f1_avg_last10": result.summary[m]["classifier_f1"],
            "total_bytes": total,
            "proxy_bytes": proxy,
        }
        for m in MODALITIES
    ]


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]], fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run and persist ``metrics.jsonl``, ``summary.csv``, ``config.resolved`` and
    the final server checkpoint under ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(serialize(cfg), encoding="utf-8")
    result = simulate(cfg)
    write_metrics(out / "metrics.jsonl", result.metrics)
    _write_csv(out / "summary.csv", summary_rows(cfg, result), SUMMARY_FIELDS)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    server = result.setup.server
    save_checkpoint(ck / "server_final.npz", server.model, server.classifier, round=cfg.rounds)
    return result


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _point_name(point: Mapping[str, Any]) -> str:
    return "__".join(f"{k}={v}" for k, v in point.items()).replace("/", "_") or "base"


def sweep(base: ExperimentConfig, grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """One run per grid point in its own subdirectory plus a merged ``sweep.csv``."""
    from .config import FIELD_NAMES, ConfigError

    bad = [k for k in grid if k not in FIELD_NAMES or k == "output_dir"]
    if bad:
        raise ConfigError([f"invalid sweep key {k!r}" for k in bad])
    root = Path(base.output_dir)
    rows = []
    for point in expand_grid(grid):
        cfg = base.replace(**point, output_dir=str(root / _point_name(point)))
        result = run_experiment(cfg)
        row = dict(point)
        for m in MODALITIES:
            name = result.setup.arch.names[m]
            row[f"probe_f1_{name}"] = result.summary[m]["probe_f1"]
            row[f"classifier_f1_{name}"] = result.summary[m]["classifier_f1"]
        row["probe_f1_mean"] = float(np.mean([result.summary[m]["probe_f1"] for m in MODALITIES]))
        row["total_bytes"] = result.metrics[-1].cumulative_bytes
        row["bytes_per_round"] = result.metrics[-1].cumulative_bytes // max(cfg.rounds, 1)
        row["proxy_bytes"] = result.ledger.total(kind="proxy")
        rows.append(row)
    root.mkdir(parents=True, exist_ok=True)
    fieldnames = list(rows[0]) if rows else list(grid)
    _write_csv(root / "sweep.csv", rows, fieldnames)
    return rows


def cost_table(cfg: ExperimentConfig, n_proxy: int, strategies: Sequence[str]) -> list[dict[str, Any]]:
    """Closed-form per-round bytes for each strategy under ``cfg``'s architecture."""
    if cfg.arch_preset:
        name, a, b = cfg.arch_preset.split(":")
        arch = preset(name, a, b, cfg.seq_len)
    else:
        arch = ArchSpec({"A": cfg.synth_d_a, "B": cfg.synth_d_b}, {"A": cfg.h1_a, "B": cfg.h1_b}, cfg.h2, cfg.seq_len)
    rows = []
    for s in strategies:
        c = comm_cost(s, arch, n_proxy, cfg.clients_per_round, cfg.layer_indices, cfg.scalar_bytes)
        rows.append({"strategy": s, "bytes_up": c.up, "bytes_down": c.down, "bytes_per_round": c.total,
                     "proxy_once": c.proxy_once, "rounds": cfg.rounds, "total_bytes": c.total * cfg.rounds})
    return rows


def probe_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path) -> dict[str, float]:
    """Re-derive the labeled/test splits from ``cfg`` and linear-probe a saved encoder."""
    from .models import load_checkpoint

    setup = build(cfg)
    model, _, _ = load_checkpoint(checkpoint)
    with D.scope("evaluator"):
        return {
            setup.arch.names[m]: linear_probe(model, setup.server.labeled, setup.test, m, cfg.probe_epochs, cfg.probe_lr, cfg.seed_model + 7)
            for m in MODALITIES
        }


def dump_error(out_dir: str | Path, exc: BaseException) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"error": type(exc).__name__, "message": str(exc)}
    if hasattr(exc, "problems"):
        report["problems"] = list(exc.problems)
    (out / "error.json").write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
