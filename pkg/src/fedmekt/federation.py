"""Client/server protocol: knowledge-transfer rounds and parameter-averaging baselines.

FedMEKT-C/-S clients exchange only embedding knowledge computed on the shared
proxy set; MM-FedAvg/-FedProx/-MOON exchange autoencoder parameters. Every
reduction is done in ascending client-id order so results never depend on the
order in which clients finish.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .data import MultimodalDataset, scope
from .evaluation import CommLedger, KNOWLEDGE_STRATEGIES, PARAMETER_STRATEGIES
from .losses import (
    LossWeights,
    client_loss,
    contrastive_loss,
    ce_loss,
    prox_loss,
    recon_loss,
    server_loss,
)
from .models import MODALITIES, Classifier, SplitAutoencoder
from .optim import Adam

log = logging.getLogger(__name__)

STRATEGIES = KNOWLEDGE_STRATEGIES + PARAMETER_STRATEGIES


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundConfig:
    strategy: str = "FedMEKT-C"
    local_epochs: int = 2
    ekt_steps: int = 2
    clf_epochs: int = 5
    lr_client: float = 0.01
    lr_server: float = 0.01
    lr_clf: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 32
    layers: tuple[int, ...] = (0, 1)
    ekd_twice: bool = True
    clients_per_round: int = 10
    scalar_bytes: int = 4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def fused(self) -> bool:
        return self.strategy != "FedMEKT-S"


# ---------------------------------------------------------------------------
# messages


Knowledge = dict[str, list[np.ndarray]]


@dataclass
class KnowledgeMessage:
    """Per-modality, per-layer embeddings of one client over the whole proxy set."""

    client_id: int
    knowledge: Knowledge
    n_rows: int

    def __post_init__(self):
        for m, layers in self.knowledge.items():
            for arr in layers:
                if arr.shape[0] != self.n_rows:
                    raise ProtocolError(f"client {self.client_id}: {m} knowledge has {arr.shape[0]} rows, expected {self.n_rows}")

    @property
    def coverage(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.knowledge)

    def fused(self) -> list[np.ndarray]:
        """Joint knowledge: per layer, covered modalities concatenated A then B."""
        n_layers = len(next(iter(self.knowledge.values())))
        return [np.concatenate([self.knowledge[m][i] for m in self.coverage], axis=1) for i in range(n_layers)]

    def nbytes(self, scalar_bytes: int) -> int:
        return sum(a.size for layers in self.knowledge.values() for a in layers) * scalar_bytes


@dataclass
class GlobalKnowledge:
    knowledge: Knowledge

    def joint(self) -> list[np.ndarray]:
        n_layers = len(self.knowledge["A"])
        return [np.concatenate([self.knowledge[m][i] for m in MODALITIES], axis=1) for i in range(n_layers)]

    def for_modalities(self, modalities: Sequence[str]) -> Knowledge:
        return {m: self.knowledge[m] for m in modalities}

    def nbytes(self, scalar_bytes: int, modalities: Sequence[str] = MODALITIES) -> int:
        return sum(a.size for m in modalities for a in self.knowledge[m]) * scalar_bytes


@dataclass
class CollaborativeKnowledge:
    per_modality: Knowledge
    contributors: dict[str, int]

    def joint(self) -> list[np.ndarray]:
        mods = [m for m in MODALITIES if m in self.per_modality]
        n_layers = len(self.per_modality[mods[0]])
        return [np.concatenate([self.per_modality[m][i] for m in mods], axis=1) for i in range(n_layers)]


# ---------------------------------------------------------------------------
# participants


@dataclass
class ClientState:
    client_id: int
    modalities: tuple[str, ...]
    data: MultimodalDataset
    model: SplitAutoencoder
    prev_model: SplitAutoencoder | None = None
    participated: bool = False

    def __post_init__(self):
        if tuple(self.model.modalities) != tuple(self.modalities):
            raise ProtocolError(f"client {self.client_id}: model holds {self.model.modalities}, data {self.modalities}")

    @property
    def n_samples(self) -> int:
        return len(self.data)


@dataclass
class ServerState:
    model: SplitAutoencoder
    classifier: Classifier
    proxy: MultimodalDataset
    labeled: MultimodalDataset
    t: int = 0
    knowledge: GlobalKnowledge | None = None


def sample_clients(clients: Sequence[ClientState], m: int, rng: np.random.Generator) -> list[ClientState]:
    if m > len(clients) or m < 0:
        raise ProtocolError(f"cannot sample {m} of {len(clients)} clients")
    chosen = rng.choice(len(clients), size=m, replace=False)
    return sorted((clients[i] for i in chosen), key=lambda c: c.client_id)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def extract_knowledge(model: SplitAutoencoder, x: dict[str, np.ndarray], layers: Sequence[int]) -> Knowledge:
    """Embeddings of every held modality at the requested encoder layers."""
    out: Knowledge = {}
    with ag.no_grad():
        for m in model.modalities:
            e1, e2, _ = model.encode(m, x[m])
            both = (e1.data, e2.data)
            out[m] = [both[i].copy() for i in layers]
    return out


def _rows(knowledge: Knowledge | None, idx: np.ndarray) -> Knowledge | None:
    if knowledge is None:
        return None
    return {m: [arr[idx] for arr in layers] for m, layers in knowledge.items()}


# ---------------------------------------------------------------------------
# FedMEKT client and server steps


def client_local_update(
    client: ClientState,
    global_knowledge: GlobalKnowledge | None,
    proxy: MultimodalDataset,
    cfg: RoundConfig,
    rng: np.random.Generator,
) -> tuple[ClientState, KnowledgeMessage, float]:
    """N local epochs of Adam on the client objective, then knowledge upload.

    Proxy minibatches advance in lockstep with private minibatches along one
    fixed shuffle of the proxy rows, so teacher and student index the same
    samples. Returns the client, its message and the mean training loss.
    """
    if client.n_samples == 0:
        raise ProtocolError(f"client {client.client_id} has no data")
    mods = client.modalities
    with scope(f"client:{client.client_id}"):
        model = client.model
        opt = Adam(model.parameters(), lr=cfg.lr_client)
        teacher = global_knowledge.for_modalities(mods) if global_knowledge is not None else None
        x_local = client.data.x
        x_proxy = {m: proxy.x[m] for m in mods}
        n_r = len(proxy)
        proxy_order = rng.permutation(n_r)
        cursor = 0
        losses = []
        for _ in range(cfg.local_epochs):
            for idx in _batches(client.n_samples, cfg.batch_size, rng):
                take = np.arange(cursor, cursor + len(idx)) % n_r
                cursor = (cursor + len(idx)) % n_r
                idx_r = proxy_order[take]
                loss = client_loss(
                    model,
                    {m: x_local[m][idx] for m in mods},
                    {m: x_proxy[m][idx_r] for m in mods},
                    _rows(teacher, idx_r),
                    cfg.weights,
                    layers=cfg.layers,
                    fused=cfg.fused,
                    ekd_twice=cfg.ekd_twice,
                )
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                losses.append(loss.item())
        message = KnowledgeMessage(client.client_id, extract_knowledge(model, x_proxy, cfg.layers), n_r)
    client.participated = True
    return client, message, float(np.mean(losses)) if losses else float("nan")


def aggregate_knowledge(messages: Sequence[KnowledgeMessage], required: Sequence[str] = MODALITIES) -> CollaborativeKnowledge:
    """Per-modality mean over the clients that cover it."""
    if not messages:
        raise ProtocolError("no knowledge messages to aggregate")
    ordered = sorted(messages, key=lambda msg: msg.client_id)
    per_mod: Knowledge = {}
    counts: dict[str, int] = {}
    for m in required:
        covering = [msg for msg in ordered if m in msg.knowledge]
        if not covering:
            raise ProtocolError(f"modality {m} has no contributing clients")
        counts[m] = len(covering)
        n_layers = len(covering[0].knowledge[m])
        means = []
        for i in range(n_layers):
            # mean as first + average deviation: identical inputs give back the input exactly
            first = covering[0].knowledge[m][i]
            dev = np.zeros_like(first)
            for msg in covering[1:]:
                dev = dev + (msg.knowledge[m][i] - first)
            means.append(first + dev / len(covering))
        per_mod[m] = means
    return CollaborativeKnowledge(per_mod, counts)


def global_knowledge(server: ServerState, layers: Sequence[int]) -> GlobalKnowledge:
    with scope("server"):
        return GlobalKnowledge(extract_knowledge(server.model, server.proxy.x, layers))


def server_update(
    server: ServerState, collab: CollaborativeKnowledge, cfg: RoundConfig, rng: np.random.Generator
) -> tuple[ServerState, float]:
    """R epochs of Adam on the server objective over proxy minibatches."""
    n_r = len(server.proxy)
    for m, layers in collab.per_modality.items():
        if any(a.shape[0] != n_r for a in layers):
            raise ProtocolError(f"collaborative knowledge for {m} is not aligned to the proxy set")
    losses = []
    with scope("server"):
        opt = Adam(server.model.parameters(), lr=cfg.lr_server)
        x_r = server.proxy.x
        for _ in range(cfg.ekt_steps):
            for idx in _batches(n_r, cfg.batch_size, rng):
                loss = server_loss(
                    server.model,
                    {m: x_r[m][idx] for m in MODALITIES},
                    _rows(collab.per_modality, idx),
                    cfg.weights,
                    layers=cfg.layers,
                    fused=cfg.fused,
                    ekd_twice=cfg.ekd_twice,
                )
                opt.zero_grad()
                ag.backward(loss)
                opt.step()
                losses.append(loss.item())
    server.knowledge = global_knowledge(server, cfg.layers)
    return server, float(np.mean(losses)) if losses else float("nan")


def train_classifier(server: ServerState, cfg: RoundConfig, rng: np.random.Generator) -> Classifier:
    """P epochs of Adam on cross-entropy over frozen codes of both modalities."""
    if len(server.labeled) == 0:
        raise ProtocolError("labeled set is empty")
    with scope("server"):
        x_l, y = server.labeled.x, server.labeled.labels
        with ag.no_grad():
            reps = np.concatenate([server.model.encode(m, x_l[m])[2].data for m in MODALITIES], axis=0)
        targets = np.concatenate([y for _ in MODALITIES])
        opt = Adam(server.classifier.parameters(), lr=cfg.lr_clf)
        for _ in range(cfg.clf_epochs):
            for idx in _batches(len(targets), cfg.batch_size, rng):
                opt.zero_grad()
                ag.backward(ce_loss(server.classifier(ag.Tensor(reps[idx])), targets[idx]))
                opt.step()
    return server.classifier


# ---------------------------------------------------------------------------
# parameter-averaging baselines


@dataclass
class ParamUpdate:
    client_id: int
    n_samples: int
    modalities: tuple[str, ...]
    state: dict[str, np.ndarray]


def aggregation_weights(updates: Sequence[ParamUpdate], modality: str, alpha: float) -> dict[int, float]:
    """Normalised ``n_k`` weights over clients holding ``modality``; multimodal
    clients are scaled by ``alpha``."""
    raw = {}
    for u in updates:
        if modality in u.modalities:
            raw[u.client_id] = u.n_samples * (alpha if len(u.modalities) > 1 else 1.0)
    total = sum(raw.values())
    return {cid: w / total for cid, w in raw.items()}


def aggregate_parameters(
    updates: Sequence[ParamUpdate], alpha: float = 1.0, previous: dict[str, np.ndarray] | None = None
) -> dict[str, np.ndarray]:
    """Per-modality weighted parameter mean.

    A modality with no contributors this round keeps its ``previous`` values.
    """
    if not updates:
        raise ProtocolError("no parameter updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    out: dict[str, np.ndarray] = {}
    for m in MODALITIES:
        prefixes = (f"enc_{m}.", f"dec_{m}.")
        holders = [u for u in ordered if m in u.modalities]
        if not holders:
            if previous is None:
                raise ProtocolError(f"modality {m} has no contributing clients")
            out.update({n: a.copy() for n, a in previous.items() if n.startswith(prefixes)})
            continue
        names = [n for n in holders[0].state if n.startswith(prefixes)]
        for u in holders[1:]:
            other = [n for n in u.state if n.startswith(prefixes)]
            if other != names or any(u.state[n].shape != holders[0].state[n].shape for n in names):
                raise ProtocolError(f"client {u.client_id}: architecture mismatch for modality {m}")
        weights = aggregation_weights(holders, m, alpha)
        for n in names:
            acc = np.zeros_like(holders[0].state[n])
            for u in holders:
                acc = acc + weights[u.client_id] * u.state[n]
            out[n] = acc
    return out


def baseline_local_update(
    client: ClientState, global_model: SplitAutoencoder, cfg: RoundConfig, rng: np.random.Generator
) -> tuple[ParamUpdate, float]:
    """Local training from the broadcast global model with the strategy's loss.

    Each modality's objective (cross-reconstruction from that modality's code,
    plus the proximal or model-contrastive term) gets its own Adam step.
    """
    if client.n_samples == 0:
        raise ProtocolError(f"client {client.client_id} has no data")
    mods = client.modalities
    w = cfg.weights
    with scope(f"client:{client.client_id}"):
        model = global_model.restricted(mods)
        global_state = model.state_dict()
        opt = Adam(model.parameters(), lr=cfg.lr_client)
        x_local = client.data.x
        losses = []
        for _ in range(cfg.local_epochs):
            for idx in _batches(client.n_samples, cfg.batch_size, rng):
                batch = {m: x_local[m][idx] for m in mods}
                for src in mods:
                    _, _, h = model.encode(src, batch[src])
                    loss = None
                    for dst in mods:
                        term = recon_loss(batch[dst], model.decode(dst, h))
                        loss = term if loss is None else loss + term
                    if cfg.strategy == "MM-FedProx" and w.mu > 0:
                        own = model.modality_parameters(src)
                        loss = loss + w.mu * prox_loss(own, {n: global_state[n] for n in own})
                    elif cfg.strategy == "MM-MOON" and w.mu > 0:
                        with ag.no_grad():
                            z_glob = global_model.encode(src, batch[src])[2].data
                            prev = (
                                [client.prev_model.encode(src, batch[src])[2].data]
                                if client.prev_model is not None
                                else []
                            )
                        loss = loss + w.mu * contrastive_loss(h, z_glob, prev, w.tau)
                    opt.zero_grad()
                    ag.backward(loss)
                    opt.step()
                    losses.append(loss.item())
        if cfg.strategy == "MM-MOON":
            client.prev_model = model.copy()
        client.model = model
        state = model.state_dict()
    client.participated = True
    return ParamUpdate(client.client_id, client.n_samples, mods, state), float(np.mean(losses)) if losses else float("nan")


# ---------------------------------------------------------------------------
# one communication round


@dataclass
class RoundResult:
    t: int
    selected: list[int]
    client_loss: float | None
    server_loss: float | None
    contributors: dict[str, int]


def round_rng(seed: int, t: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, *tags])


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    cfg: RoundConfig,
    t: int,
    seed: int,
    ledger: CommLedger,
) -> RoundResult:
    """One round: broadcast, local training, upload, aggregation, server and
    classifier updates. Byte counts go to ``ledger`` under round ``t``."""
    selected = sample_clients(clients, cfg.clients_per_round, round_rng(seed, t, 0))
    sb = cfg.scalar_bytes
    client_losses = []
    server_loss_value = None
    if cfg.strategy in KNOWLEDGE_STRATEGIES:
        if server.knowledge is None:
            server.knowledge = global_knowledge(server, cfg.layers)
        messages = []
        for c in selected:
            if not c.participated:
                ledger.record(t, c.client_id, "down", "proxy", len(server.proxy) * server.proxy.seq_len
                              * sum(server.proxy.dims()[m] for m in c.modalities) * sb)
            down_mods = MODALITIES if cfg.fused else c.modalities
            ledger.record(t, c.client_id, "down", "knowledge", server.knowledge.nbytes(sb, down_mods))
            _, msg, loss = client_local_update(c, server.knowledge, server.proxy, cfg, round_rng(seed, t, 1, c.client_id))
            ledger.record(t, c.client_id, "up", "knowledge", msg.nbytes(sb))
            messages.append(msg)
            client_losses.append(loss)
        covered = tuple(m for m in MODALITIES if any(m in msg.knowledge for msg in messages))
        if covered != MODALITIES:
            log.warning("round %d: no contributors for %s", t, sorted(set(MODALITIES) - set(covered)))
        with scope("server"):
            collab = aggregate_knowledge(messages, required=covered)
        contributors = dict(collab.contributors)
        _, server_loss_value = server_update(server, collab, cfg, round_rng(seed, t, 2))
    else:
        updates = []
        for c in selected:
            down = sum(server.model.modality_parameters(m)[n].data.size for m in c.modalities
                       for n in server.model.modality_parameters(m))
            ledger.record(t, c.client_id, "down", "parameters", down * sb)
            upd, loss = baseline_local_update(c, server.model, cfg, round_rng(seed, t, 1, c.client_id))
            ledger.record(t, c.client_id, "up", "parameters", sum(a.size for a in upd.state.values()) * sb)
            updates.append(upd)
            client_losses.append(loss)
        with scope("server"):
            new_state = aggregate_parameters(updates, cfg.weights.alpha, server.model.state_dict())
            server.model.load_state_dict(new_state)
        contributors = {m: sum(1 for u in updates if m in u.modalities) for m in MODALITIES}
    train_classifier(server, cfg, round_rng(seed, t, 3))
    server.t = t
    return RoundResult(
        t,
        [c.client_id for c in selected],
        float(np.mean(client_losses)) if client_losses else None,
        server_loss_value,
        contributors,
    )
