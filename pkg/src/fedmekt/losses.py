"""Reconstruction, distillation, classification and baseline regularizer losses.

Knowledge is passed around as ``{modality: [layer_0, layer_1, ...]}`` where
each layer is an ``(n_proxy_rows, width)`` array (or Tensor for a student).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ShapeError, Tensor
from .models import SplitAutoencoder

log = logging.getLogger(__name__)

Knowledge = Mapping[str, Sequence]


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.1
    beta: float = 0.1
    mu: float = 0.0
    tau: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "beta", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")


def recon_loss(x, x_hat) -> Tensor:
    x, x_hat = ag.as_tensor(x), ag.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError("recon_loss", x.shape, x_hat.shape)
    return ag.mean(ag.sq_diff(x_hat, x))


def ekd_loss(e_student, e_teacher) -> Tensor:
    """KL(softmax(teacher) || softmax(student)), averaged over rows.

    The teacher is always treated as a constant.
    """
    s = ag.as_tensor(e_student)
    t = np.asarray(getattr(e_teacher, "data", e_teacher), dtype=ag.DTYPE)
    if s.shape != t.shape:
        raise ShapeError("ekd_loss", s.shape, t.shape)
    z = t - t.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)
    per_row = ag.tsum(ag.mul(ag.sub(log_p, ag.log_softmax(s)), p), axis=-1)
    return ag.mean(per_row) if per_row.ndim else per_row


def _ekd_layers(student: Knowledge, teacher: Knowledge, modalities: Sequence[str], fused: bool) -> Tensor:
    """Sum over exchanged layers of the EKD term on the given modalities.

    ``fused`` concatenates modalities per layer before the softmax; otherwise
    each modality contributes its own KL.
    """
    n_layers = len(student[modalities[0]])
    total = None
    for layer in range(n_layers):
        if fused:
            s = _cat([student[m][layer] for m in modalities])
            t = np.concatenate([np.asarray(teacher[m][layer]) for m in modalities], axis=-1)
            terms = [ekd_loss(s, t)]
        else:
            terms = [ekd_loss(student[m][layer], teacher[m][layer]) for m in modalities]
        for term in terms:
            total = term if total is None else total + term
    return total


def _cat(parts):
    return parts[0] if len(parts) == 1 else ag.concat(parts)


def student_knowledge(model: SplitAutoencoder, x_r: Mapping[str, np.ndarray], layers: Sequence[int]) -> dict[str, list[Tensor]]:
    out = {}
    for m in model.modalities:
        e1, e2, _ = model.encode(m, x_r[m])
        both = (e1, e2)
        out[m] = [both[i] for i in layers]
    return out


def _check_rows(knowledge: Knowledge, n_rows: int, what: str) -> None:
    for m, per_layer in knowledge.items():
        for arr in per_layer:
            if np.shape(arr)[0] != n_rows:
                raise ContractError(f"{what}: knowledge for {m} has {np.shape(arr)[0]} rows, proxy batch has {n_rows}")


def _autoencoder_terms(model: SplitAutoencoder, x: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Cross-reconstruction terms ``rec_<code>-><target>`` for every held pair."""
    terms = {}
    for src in model.modalities:
        _, _, h = model.encode(src, x[src])
        for dst in model.modalities:
            terms[f"rec_{src}->{dst}"] = recon_loss(x[dst], model.decode(dst, h))
    return terms


def objective_terms(
    model: SplitAutoencoder,
    x_local: Mapping[str, np.ndarray],
    x_proxy: Mapping[str, np.ndarray] | None,
    teacher: Knowledge | None,
    weight: float,
    layers: Sequence[int] = (0, 1),
    fused: bool = True,
    ekd_twice: bool = True,
) -> dict[str, Tensor]:
    """Weighted terms of the autoencoder objective shared by client and server.

    For each held modality M the sub-objective is reconstruction of every held
    modality from ``h_M`` plus ``weight * EKD``. With ``fused`` the joint
    (concatenated) EKD appears in each sub-objective (``ekd_twice``) or once;
    split mode attaches modality M's own EKD to sub-objective M.
    """
    terms = _autoencoder_terms(model, x_local)
    if teacher is None or weight == 0.0:
        return terms
    n = len(next(iter(x_proxy.values())))
    _check_rows(teacher, n, "ekd")
    mods = tuple(m for m in model.modalities if m in teacher)
    if not mods:
        return terms
    student = student_knowledge(model, x_proxy, layers)
    if fused:
        ekd = _ekd_layers(student, teacher, mods, fused=True)
        copies = len(mods) if ekd_twice else 1
        for i in range(copies):
            terms[f"ekd_joint_{i}"] = weight * ekd
    else:
        for m in mods:
            terms[f"ekd_{m}"] = weight * _ekd_layers(student, teacher, (m,), fused=False)
    return terms


def _total(terms: Mapping[str, Tensor]) -> Tensor:
    total = None
    for k in sorted(terms):
        total = terms[k] if total is None else total + terms[k]
    return total


def client_loss(model, batch_k, batch_r, global_knowledge, weights: LossWeights, **kw) -> Tensor:
    """Local objective: sum over held modalities of cross-reconstruction on
    private data plus gamma-weighted EKD towards the server's knowledge."""
    return _total(objective_terms(model, batch_k, batch_r, global_knowledge, weights.gamma, **kw))


def server_loss(model, batch_r, collaborative_knowledge, weights: LossWeights, **kw) -> Tensor:
    """Server objective: proxy cross-reconstruction plus beta-weighted EKD
    towards the averaged client knowledge."""
    return _total(objective_terms(model, batch_r, batch_r, collaborative_knowledge, weights.beta, **kw))


def ce_loss(logits, labels) -> Tensor:
    logits = ag.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = ag.reshape(logits, (1, logits.shape[0]))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("ce_loss", logits.shape, labels.shape)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"ce_loss: labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -ag.mean(ag.tsum(ag.mul(ag.log_softmax(logits), onehot), axis=-1))


def prox_loss(w_local: Mapping[str, Tensor], w_global: Mapping[str, np.ndarray]) -> Tensor:
    """Squared L2 distance between two aligned parameter sets."""
    if set(w_local) != set(w_global):
        raise ContractError(f"prox_loss: misaligned parameter sets {sorted(set(w_local) ^ set(w_global))}")
    total = None
    for name in sorted(w_local):
        g = np.asarray(getattr(w_global[name], "data", w_global[name]))
        d = ag.tsum(ag.sq_diff(w_local[name], g))
        total = d if total is None else total + d
    return total if total is not None else Tensor(0.0)


def cosine_sim(a, b) -> Tensor:
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine_sim", a.shape, b.shape)
    dot = ag.tsum(ag.mul(a, b), axis=-1)
    norms = ag.sqrt(ag.mul(ag.tsum(ag.square(a), axis=-1), ag.tsum(ag.square(b), axis=-1)) + 1e-24)
    return ag.div(dot, norms)


_warned_empty = False


def contrastive_loss(z_local, z_global, z_prev_list, tau: float) -> Tensor:
    """Model-contrastive loss with the global representation as the positive.

    Rows of ``z_*`` are samples; the result is averaged over rows.
    """
    global _warned_empty
    if not z_prev_list:
        if not _warned_empty:
            warnings.warn("contrastive_loss: no previous models, returning 0", RuntimeWarning, stacklevel=2)
            _warned_empty = True
        return Tensor(0.0)
    z = ag.as_tensor(z_local)
    if z.ndim == 1:
        z = ag.reshape(z, (1, z.shape[0]))
        z_global = np.atleast_2d(getattr(z_global, "data", z_global))
        z_prev_list = [np.atleast_2d(getattr(p, "data", p)) for p in z_prev_list]
    sims = [cosine_sim(z, z_global)] + [cosine_sim(z, p) for p in z_prev_list]
    n = z.shape[0]
    logits = ag.concat([ag.reshape(s, (n, 1)) for s in sims]) * (1.0 / tau)
    return -ag.mean(ag.log_softmax(logits)[:, 0])
