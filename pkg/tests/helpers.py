"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from fedmekt import autograd as ag
from fedmekt import losses as L
from fedmekt.models import ArchSpec, init_classifier, init_model

# one line per acceptance criterion, printed in the terminal summary
REPORT: list[str] = []


def report(label: str, ok: bool, detail: str) -> None:
    line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
    REPORT.append(line)
    print(line)


# the small model used for gradient checks: d=4, h1=3, h2=6, T=4
SMALL = ArchSpec({"A": 4, "B": 4}, {"A": 3, "B": 3}, 6, 4)


def small_batch(rng, n, arch=SMALL):
    return {m: rng.normal(size=(n, arch.seq_len, arch.input_dims[m])) for m in arch.modalities}


def small_knowledge(rng, n, arch=SMALL, mods=("A", "B")):
    return {m: [np.tanh(rng.normal(size=(n, w))) for w in arch.layer_widths(m)] for m in mods}


def composite_losses(seed: int, arch=SMALL, n_local=2, n_proxy=2):
    """Every composite training objective on one random instance.

    Returns ``[(name, loss_fn, params)]``; each ``loss_fn`` rebuilds the graph
    from the current parameter values.
    """
    rng = np.random.default_rng(seed)
    model = init_model(arch, seed)
    uni = init_model(arch, seed + 1, ("A",))
    x = small_batch(rng, n_local, arch)
    xr = small_batch(rng, n_proxy, arch)
    teacher = small_knowledge(rng, n_proxy, arch)
    w = L.LossWeights(gamma=0.5, beta=0.7)
    params = list(model.parameters().values())

    cases = [
        ("client_loss[FedMEKT-C]", lambda: L.client_loss(model, x, xr, teacher, w, fused=True), params),
        ("client_loss[FedMEKT-S]", lambda: L.client_loss(model, x, xr, teacher, w, fused=False), params),
        ("client_loss[unimodal]", lambda: L.client_loss(uni, x, xr, teacher, w), list(uni.parameters().values())),
        ("server_loss[FedMEKT-C]", lambda: L.server_loss(model, xr, teacher, w, fused=True), params),
        ("server_loss[FedMEKT-S]", lambda: L.server_loss(model, xr, teacher, w, fused=False), params),
    ]

    clf = init_classifier(arch.h2, 3, seed)
    labels = rng.integers(0, 3, size=n_local)
    enc_a = [p for n, p in model.parameters().items() if n.startswith("enc_A.")]

    def ce():
        return L.ce_loss(clf(model.encode("A", x["A"])[2]), labels)

    cases.append(("ce_loss[classifier+encoder]", ce, list(clf.parameters().values()) + enc_a))

    own = model.modality_parameters("A")
    anchor = {n: p.data + 0.1 * rng.normal(size=p.shape) for n, p in own.items()}

    def prox():
        _, _, h = model.encode("A", x["A"])
        rec = L.recon_loss(x["A"], model.decode("A", h)) + L.recon_loss(x["B"], model.decode("B", h))
        return rec + 0.3 * L.prox_loss(own, anchor)

    cases.append(("fedprox_objective", prox, params))

    z_glob = rng.normal(size=(n_local, arch.h2))
    z_prev = [rng.normal(size=(n_local, arch.h2))]

    def moon():
        _, _, h = model.encode("A", x["A"])
        rec = L.recon_loss(x["A"], model.decode("A", h)) + L.recon_loss(x["B"], model.decode("B", h))
        return rec + L.contrastive_loss(h, z_glob, z_prev, 0.5)

    cases.append(("moon_objective", moon, params))
    return cases


def max_grad_error(seed: int, coords: int | None = 2, epsilon: float = 1e-4) -> dict[str, float]:
    rng = np.random.default_rng(10_000 + seed)
    return {name: ag.grad_check(fn, ps, epsilon=epsilon, coords=coords, rng=rng) for name, fn, ps in composite_losses(seed)}
