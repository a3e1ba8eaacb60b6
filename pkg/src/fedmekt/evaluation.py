"""Linear probing, macro-F1, last-k averaging and communication accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from .losses import ce_loss
from .models import ArchSpec, LinearProbe, SplitAutoencoder, lstm_param_count
from .optim import Adam

KNOWLEDGE_STRATEGIES = ("FedMEKT-C", "FedMEKT-S")
PARAMETER_STRATEGIES = ("MM-FedAvg", "MM-FedProx", "MM-MOON")


def macro_f1(preds, labels) -> float:
    """Unweighted mean of per-class F1 over classes seen in preds or labels."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"macro_f1: {preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("macro_f1 of empty inputs")
    scores = []
    for c in np.union1d(preds, labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def avg_last_k(series: Sequence[float], k: int = 10) -> float:
    if k <= 0 or len(series) < k:
        raise ValueError(f"avg_last_k needs at least k={k} entries, got {len(series)}")
    return float(np.mean(np.asarray(series[-k:], dtype=np.float64)))


def representations(model: SplitAutoencoder, modality: str, x: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        return model.encode(modality, x)[2].data


def train_linear(
    reps: np.ndarray, labels: np.ndarray, n_classes: int, epochs: int = 100, lr: float = 0.01, seed: int = 0
) -> LinearProbe:
    probe = LinearProbe(reps.shape[1], n_classes, rng=np.random.default_rng(seed))
    opt = Adam(probe.parameters(), lr=lr)
    x = ag.Tensor(reps)
    for _ in range(epochs):
        opt.zero_grad()
        ag.backward(ce_loss(probe(x), labels))
        opt.step()
    return probe


def linear_probe(
    model: SplitAutoencoder,
    train,
    test,
    modality: str,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
) -> float:
    """Macro-F1 on ``test`` of a linear classifier trained on frozen ``h`` codes.

    ``model`` is only read; the probe is full-batch Adam on ``train``.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("linear_probe needs non-empty train and test splits")
    reps_tr = representations(model, modality, train.x[modality])
    probe = train_linear(reps_tr, train.labels, train.n_classes, epochs, lr, seed)
    with ag.no_grad():
        logits = probe(ag.Tensor(representations(model, modality, test.x[modality]))).data
    return macro_f1(logits.argmax(axis=1), test.labels)


# ---------------------------------------------------------------------------
# communication accounting


def layer_widths(arch: ArchSpec, modality: str, layers: Sequence[int]) -> list[int]:
    widths = arch.layer_widths(modality)
    return [widths[i] for i in layers]


def modality_param_count(arch: ArchSpec, modality: str) -> int:
    d, h1, h2 = arch.input_dims[modality], arch.h1[modality], arch.h2
    return lstm_param_count(d, h1) + lstm_param_count(h1, h2) + lstm_param_count(h2, h1) + lstm_param_count(h1, d)


@dataclass(frozen=True)
class RoundCost:
    up: int
    down: int
    proxy_once: int = 0

    @property
    def total(self) -> int:
        return self.up + self.down


def client_round_cost(
    strategy: str, arch: ArchSpec, n_proxy: int, modalities: Sequence[str], layers: Sequence[int], scalar_bytes: int
) -> RoundCost:
    """Bytes one participating client moves in one round."""
    if strategy in KNOWLEDGE_STRATEGIES:
        own = n_proxy * sum(sum(layer_widths(arch, m, layers)) for m in modalities)
        if strategy == "FedMEKT-C":
            joint = n_proxy * sum(sum(layer_widths(arch, m, layers)) for m in arch.modalities)
            down = joint
        else:
            down = own
        proxy = n_proxy * arch.seq_len * sum(arch.input_dims[m] for m in modalities)
        return RoundCost(up=own * scalar_bytes, down=down * scalar_bytes, proxy_once=proxy * scalar_bytes)
    if strategy in PARAMETER_STRATEGIES:
        params = sum(modality_param_count(arch, m) for m in modalities)
        return RoundCost(up=params * scalar_bytes, down=params * scalar_bytes)
    raise ValueError(f"unknown strategy {strategy!r}")


def comm_cost(
    strategy: str,
    arch: ArchSpec,
    n_proxy: int,
    m: int,
    layers: Sequence[int] = (0, 1),
    scalar_bytes: int = 4,
    client_modalities: Sequence[Sequence[str]] | None = None,
) -> RoundCost:
    """Closed-form per-round bytes for ``m`` participating clients.

    Clients are multimodal unless ``client_modalities`` lists each one's set.
    ``proxy_once`` is the one-time proxy distribution to those clients.
    """
    mods = list(client_modalities) if client_modalities is not None else [arch.modalities] * m
    if len(mods) != m:
        raise ValueError("client_modalities must list m entries")
    costs = [client_round_cost(strategy, arch, n_proxy, cm, layers, scalar_bytes) for cm in mods]
    return RoundCost(
        up=sum(c.up for c in costs), down=sum(c.down for c in costs), proxy_once=sum(c.proxy_once for c in costs)
    )


@dataclass
class CommLedger:
    """Append-only record of ``(round, client, direction, kind, bytes)``."""

    entries: list[tuple[int, int, str, str, int]] = field(default_factory=list)

    def record(self, t: int, client: int, direction: str, kind: str, nbytes: int) -> None:
        if direction not in ("up", "down") or kind not in ("knowledge", "parameters", "proxy"):
            raise ValueError(f"bad ledger entry {direction}/{kind}")
        self.entries.append((t, client, direction, kind, int(nbytes)))

    def total(self, kind: str | None = None, direction: str | None = None, t: int | None = None) -> int:
        return sum(
            e[4]
            for e in self.entries
            if (kind is None or e[3] == kind) and (direction is None or e[2] == direction) and (t is None or e[0] == t)
        )

    def round_bytes(self, t: int) -> tuple[int, int]:
        """Per-round (up, down) excluding the one-time proxy distribution."""
        up = sum(e[4] for e in self.entries if e[0] == t and e[2] == "up" and e[3] != "proxy")
        down = sum(e[4] for e in self.entries if e[0] == t and e[2] == "down" and e[3] != "proxy")
        return up, down


# ---------------------------------------------------------------------------
# metrics stream


@dataclass
class RoundMetrics:
    t: int
    probe_f1: dict[str, float]
    classifier_f1: dict[str, float]
    client_loss: float | None
    server_loss: float | None
    bytes_up: int
    bytes_down: int
    cumulative_bytes: int
    proxy_bytes: int = 0
    contributors: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_metrics(path, metrics: Iterable[RoundMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in metrics:
            fh.write(m.to_json() + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summarize(metrics: Sequence[RoundMetrics], k: int = 10) -> dict[str, dict[str, float]]:
    """Average of the last ``k`` rounds (fewer if the run is shorter), per modality."""
    trained = [m for m in metrics if m.t > 0] or list(metrics)
    kk = min(k, len(trained))
    out: dict[str, dict[str, float]] = {}
    for mod in trained[-1].probe_f1:
        out[mod] = {
            "probe_f1": avg_last_k([m.probe_f1[mod] for m in trained], kk),
            "classifier_f1": avg_last_k([m.classifier_f1.get(mod, float("nan")) for m in trained], kk),
        }
    return out
