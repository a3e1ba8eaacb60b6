"""Flat experiment configuration: defaults, validation and (de)serialisation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional, get_type_hints

from .federation import STRATEGIES, RoundConfig
from .evaluation import KNOWLEDGE_STRATEGIES
from .losses import LossWeights

SYMBOLS = {
    "gamma": "γ",
    "beta": "β",
    "mu": "μ",
    "tau": "τ",
    "alpha": "α",
    "rounds": "T",
    "local_epochs": "N",
    "ekt_steps": "R",
    "clf_epochs": "P",
    "lr_client": "η1",
    "lr_server": "η2",
    "lr_clf": "η3",
    "num_clients": "K",
    "clients_per_round": "m",
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("; ".join(problems))


def _label(name: str) -> str:
    sym = SYMBOLS.get(name)
    return f"{name} ({sym})" if sym else name


@dataclass
class ExperimentConfig:
    strategy: str = "FedMEKT-C"
    # data source
    dataset: str = "synthetic"
    csv_path: Optional[str] = None
    schema_path: Optional[str] = None
    synth_classes: int = 4
    synth_d_a: int = 6
    synth_d_b: int = 6
    synth_n: int = 2400
    synth_sigma: float = 0.3
    synth_latent: int = 4
    synth_separation: float = 0.25
    seq_len: int = 10
    stride: int = 10
    # architecture: "" = derive from data with h1_a/h1_b/h2, else "dataset:ModA:ModB"
    arch_preset: str = ""
    h1_a: int = 4
    h1_b: int = 4
    h2: int = 16
    clf_hidden: int = 0
    # protocol
    rounds: int = 30
    local_epochs: int = 2
    ekt_steps: int = 2
    clf_epochs: int = 5
    lr_client: float = 0.01
    lr_server: float = 0.01
    lr_clf: float = 0.01
    gamma: Optional[float] = None
    beta: Optional[float] = None
    mu: Optional[float] = None
    tau: Optional[float] = None
    alpha: Optional[float] = None
    num_clients: int = 30
    clients_per_round: int = 10
    client_mode: str = "multimodal"
    mixed_counts: Optional[list] = None
    dirichlet: Optional[float] = None
    proxy_fraction: float = 0.1
    labeled_fraction: float = 0.1
    test_fraction: float = 0.1
    proxy_subsample: float = 1.0
    batch_size: int = 32
    layers: str = "h1+h2"
    ekd_twice: bool = True
    scalar_bytes: int = 4
    probe_epochs: int = 100
    probe_lr: float = 0.01
    seed_data: int = 0
    seed_model: int = 0
    seed_sampling: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0

    # -- derived views -----------------------------------------------------

    @property
    def layer_indices(self) -> tuple[int, ...]:
        return {"h1+h2": (0, 1), "h2": (1,), "h1": (0,)}[self.layers]

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            gamma=self.gamma or 0.0,
            beta=self.beta or 0.0,
            mu=self.mu or 0.0,
            tau=self.tau or 0.5,
            alpha=self.alpha or 1.0,
        )

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            strategy=self.strategy,
            local_epochs=self.local_epochs,
            ekt_steps=self.ekt_steps,
            clf_epochs=self.clf_epochs,
            lr_client=self.lr_client,
            lr_server=self.lr_server,
            lr_clf=self.lr_clf,
            weights=self.loss_weights(),
            batch_size=self.batch_size,
            layers=self.layer_indices,
            ekd_twice=self.ekd_twice,
            clients_per_round=self.clients_per_round,
            scalar_bytes=self.scalar_bytes,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **overrides) -> ExperimentConfig:
        return from_dict({**self.to_dict(), **overrides})


FIELD_TYPES = get_type_hints(ExperimentConfig)
FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]


def _fill_defaults(d: dict[str, Any]) -> dict[str, Any]:
    """Strategy-dependent defaults for weights left unset."""
    s = d.get("strategy", "FedMEKT-C")
    if s in KNOWLEDGE_STRATEGIES:
        d.setdefault("gamma", None)
        d.setdefault("beta", None)
        d["gamma"] = 0.1 if d["gamma"] is None else d["gamma"]
        d["beta"] = 0.1 if d["beta"] is None else d["beta"]
    else:
        if d.get("mu") is None and s in ("MM-FedProx", "MM-MOON"):
            d["mu"] = 0.01 if s == "MM-FedProx" else 1.0
        if d.get("tau") is None and s == "MM-MOON":
            d["tau"] = 0.5
        if d.get("alpha") is None:
            d["alpha"] = 100.0 if d.get("client_mode") == "mixed" else 1.0
    return d


def validate(cfg: ExperimentConfig) -> None:
    problems: list[str] = []

    def bad(name: str, msg: str) -> None:
        problems.append(f"{_label(name)}: {msg}")

    if cfg.strategy not in STRATEGIES:
        bad("strategy", f"must be one of {list(STRATEGIES)}")
    if cfg.dataset not in ("synthetic", "csv"):
        bad("dataset", "must be 'synthetic' or 'csv'")
    if cfg.dataset == "csv" and not (cfg.csv_path and cfg.schema_path):
        bad("csv_path", "csv datasets need csv_path and schema_path")
    for name in ("rounds", "local_epochs", "ekt_steps", "clf_epochs", "probe_epochs", "checkpoint_every", "clf_hidden"):
        if getattr(cfg, name) < 0:
            bad(name, "must be >= 0")
    for name in ("synth_classes", "synth_d_a", "synth_d_b", "synth_n", "synth_latent", "seq_len", "stride",
                 "h1_a", "h1_b", "h2", "num_clients", "clients_per_round", "batch_size", "scalar_bytes"):
        if getattr(cfg, name) <= 0:
            bad(name, "must be > 0")
    for name in ("lr_client", "lr_server", "lr_clf", "probe_lr"):
        if not getattr(cfg, name) > 0:
            bad(name, "must be > 0")
    if cfg.synth_sigma < 0:
        bad("synth_sigma", "must be >= 0")
    for name in ("proxy_fraction", "labeled_fraction", "test_fraction", "proxy_subsample"):
        v = getattr(cfg, name)
        if not 0 < v <= 1:
            bad(name, "must lie in (0, 1]")
    if cfg.proxy_fraction + cfg.labeled_fraction + cfg.test_fraction >= 1:
        bad("proxy_fraction", "proxy + labeled + test fractions must leave training data")
    if cfg.clients_per_round > cfg.num_clients:
        bad("clients_per_round", "cannot exceed num_clients (K)")
    if cfg.client_mode not in ("multimodal", "mixed"):
        bad("client_mode", "must be 'multimodal' or 'mixed'")
    if cfg.mixed_counts is not None and (len(cfg.mixed_counts) != 3 or sum(cfg.mixed_counts) != cfg.num_clients):
        bad("mixed_counts", "must be three counts summing to num_clients")
    if cfg.dirichlet is not None and cfg.dirichlet <= 0:
        bad("dirichlet", "must be > 0")
    if cfg.layers not in ("h1+h2", "h2", "h1"):
        bad("layers", "must be 'h1+h2', 'h2' or 'h1'")
    for name in ("gamma", "beta", "mu"):
        v = getattr(cfg, name)
        if v is not None and v < 0:
            bad(name, "must be >= 0")
    if cfg.tau is not None and cfg.tau < 0:
        bad("tau", "must be > 0")
    if cfg.alpha is not None and cfg.alpha < 1:
        bad("alpha", "must be >= 1")

    # weights irrelevant to the strategy must be absent or zero
    relevant = {
        "FedMEKT-C": {"gamma", "beta"},
        "FedMEKT-S": {"gamma", "beta"},
        "MM-FedAvg": {"alpha"},
        "MM-FedProx": {"alpha", "mu"},
        "MM-MOON": {"alpha", "mu", "tau"},
    }.get(cfg.strategy, set())
    for name in ("gamma", "beta", "mu", "tau", "alpha"):
        v = getattr(cfg, name)
        if name not in relevant and v not in (None, 0, 0.0):
            bad(name, f"not used by {cfg.strategy}; leave unset")
    if cfg.strategy == "MM-MOON" and cfg.tau is not None and cfg.tau <= 0:
        bad("tau", "must be > 0")
    if cfg.arch_preset:
        parts = cfg.arch_preset.split(":")
        if len(parts) != 3:
            bad("arch_preset", "expected 'dataset:ModalityA:ModalityB'")
    if problems:
        raise ConfigError(problems)


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    hint = FIELD_TYPES[name]
    base = hint
    if getattr(hint, "__origin__", None) is not None and type(None) in getattr(hint, "__args__", ()):
        base = next(a for a in hint.__args__ if a is not type(None))
    if base is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if base is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError([f"{_label(name)}: expected an integer, got {value!r}"])
        return int(value)
    if base is float:
        return float(value)
    if base is list or getattr(base, "__origin__", None) is list:
        if isinstance(value, str):
            value = json.loads(value)
        return [int(v) for v in value]
    return str(value) if base is str else value


def from_dict(d: dict[str, Any]) -> ExperimentConfig:
    unknown = sorted(set(d) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError([f"unknown key {k!r}" for k in unknown])
    try:
        values = {k: _coerce(k, v) for k, v in d.items()}
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError([str(exc)]) from None
    cfg = ExperimentConfig(**_fill_defaults(values))
    validate(cfg)
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a flat JSON config file (optional) and apply overrides on top."""
    d: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ConfigError(["config file must hold a flat JSON object"])
    d.update(overrides or {})
    return from_dict(d)


def serialize(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
