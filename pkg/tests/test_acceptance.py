"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from fedmekt import autograd as ag
from fedmekt import data as D
from fedmekt import losses as L
from fedmekt.cli import main
from fedmekt.config import ExperimentConfig
from fedmekt.evaluation import comm_cost
from fedmekt.experiment import simulate, sweep
from fedmekt.federation import KnowledgeMessage, ParamUpdate, aggregate_knowledge, aggregate_parameters
from fedmekt.models import preset

from helpers import max_grad_error, report

# small federation used by the structural criteria
QUICK = dict(
    synth_n=600, seq_len=6, stride=6, num_clients=6, clients_per_round=3, rounds=3,
    local_epochs=1, ekt_steps=1, clf_epochs=2, h2=8,
)


def test_c1_gradient_correctness():
    start = time.perf_counter()
    worst, where = 0.0, None
    for seed in range(100):
        for name, err in max_grad_error(seed, coords=1).items():
            if err > worst:
                worst, where = err, (seed, name)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 120
    report("C1 gradient correctness", ok, f"max rel err {worst:.2e} at {where}, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 120


def test_c2_loss_identities():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4, 3))
    e = rng.normal(size=(5, 7))
    checks = {
        "mse(x,x)": float(L.recon_loss(x, x).data) == 0.0,
        "kl(p,p)": abs(float(L.ekd_loss(e, e).data)) < 1e-12,
        "ce uniform": abs(float(L.ce_loss(np.zeros((6, 5)), np.arange(6) % 5).data) - math.log(5)) < 1e-9,
        "contrastive symmetric": abs(float(L.contrastive_loss(e, e, [e], 0.5).data) - math.log(2)) < 1e-9,
        "prox(w,w)": float(L.prox_loss({"w": ag.Tensor(e)}, {"w": e}).data) == 0.0,
    }
    ok = all(checks.values())
    report("C2 loss identities", ok, ", ".join(f"{k}={'ok' if v else 'bad'}" for k, v in checks.items()))
    assert ok, checks


def test_c3_aggregation_oracle():
    rng = np.random.default_rng(3)
    widths = [4, 6]
    msgs = [
        KnowledgeMessage(k, {m: [rng.normal(size=(20, w)) for w in widths] for m in ("A", "B")}, 20)
        for k in range(5)
    ]
    collab = aggregate_knowledge(msgs)
    k_err = 0.0
    for m in ("A", "B"):
        for i in range(len(widths)):
            brute = np.zeros((20, widths[i]))
            for r in range(20):
                for c in range(widths[i]):
                    brute[r, c] = sum(msg.knowledge[m][i][r, c] for msg in msgs) / 5
            k_err = max(k_err, float(np.abs(collab.per_modality[m][i] - brute).max()))

    states = [{"enc_A.w": rng.normal(size=(3, 2)), "enc_B.w": rng.normal(size=(2,))} for _ in range(3)]
    mods = [("A", "B"), ("A",), ("B",)]
    ups = [ParamUpdate(k, n, mods[k], states[k]) for k, n in enumerate((10, 20, 30))]
    out = aggregate_parameters(ups, alpha=100.0)
    # A: 100*10 + 20 = 1020 ; B: 100*10 + 30 = 1030
    want_a = (1000 * states[0]["enc_A.w"] + 20 * states[1]["enc_A.w"]) / 1020
    want_b = (1000 * states[0]["enc_B.w"] + 30 * states[2]["enc_B.w"]) / 1030
    p_err = max(float(np.abs(out["enc_A.w"] - want_a).max()), float(np.abs(out["enc_B.w"] - want_b).max()))

    ok = k_err <= 1e-12 and p_err <= 1e-12
    report("C3 aggregation oracle", ok, f"knowledge err {k_err:.1e}, parameter err {p_err:.1e}")
    assert ok


def test_c4_determinism(tmp_path):
    flags = []
    for k, v in QUICK.items():
        flags += [f"--{k.replace('_', '-')}", str(v)]
    outs = []
    for name in ("a", "b"):
        assert main(["run", *flags, "--output-dir", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    report("C4 determinism", ok, f"{len(outs[0])} bytes, identical={outs[0] == outs[1]}")
    assert ok


def test_c5_protocol_purity(tmp_path):
    details, ok = [], True
    for strategy in ("FedMEKT-C", "FedMEKT-S"):
        D.ACCESS_LOG.clear()
        res = simulate(ExperimentConfig(strategy=strategy, output_dir=str(tmp_path), **QUICK))
        params = res.ledger.total(kind="parameters")
        reads = D.ACCESS_LOG.private_reads_from("server")
        ok &= params == 0 and reads == 0 and res.ledger.total(kind="knowledge") > 0
        details.append(f"{strategy}: param bytes {params}, server private reads {reads}")
    D.ACCESS_LOG.clear()
    res = simulate(ExperimentConfig(strategy="MM-FedAvg", output_dir=str(tmp_path), **QUICK))
    know = res.ledger.total(kind="knowledge")
    ok &= know == 0 and res.ledger.total(kind="parameters") > 0
    details.append(f"MM-FedAvg: knowledge bytes {know}")
    report("C5 protocol purity", ok, "; ".join(details))
    assert ok


C6_BASE = dict(dirichlet=0.3, num_clients=6, clients_per_round=3, rounds=30, local_epochs=2, ekt_steps=2)


def _probe_mean(cfg):
    s = simulate(cfg).summary
    return float(np.mean([s[m]["probe_f1"] for m in ("A", "B")]))


@pytest.mark.slow
def test_c6_ekd_efficacy(tmp_path):
    start = time.perf_counter()
    full, ablated = [], []
    for s in range(5):
        seeds = dict(seed_data=s, seed_model=s, seed_sampling=s, output_dir=str(tmp_path))
        full.append(_probe_mean(ExperimentConfig(gamma=0.1, beta=0.1, **C6_BASE, **seeds)))
        ablated.append(_probe_mean(ExperimentConfig(gamma=0.0, beta=0.0, **C6_BASE, **seeds)))
    gap = float(np.mean(full) - np.mean(ablated))
    elapsed = time.perf_counter() - start
    report(
        "C6 EKD efficacy",
        gap >= 0.03,
        f"FedMEKT-C {np.mean(full):.4f} vs ablation {np.mean(ablated):.4f}, gap {gap:+.4f} (need >= 0.03), "
        f"per seed {[round(a - b, 4) for a, b in zip(full, ablated)]}, {elapsed:.0f}s",
    )
    assert gap >= 0.03


MHEALTH = preset("mhealth", "Acce", "Gyro")


def test_c7_upstream_bytes_closed_form():
    c = comm_cost("FedMEKT-C", MHEALTH, 500, 10, (0, 1), scalar_bytes=4)
    ok = c.up == 10 * 500 * (8 + 48) * 4 == 1_120_000
    report("C7a upstream bytes", ok, f"FedMEKT-C up {c.up} vs 1,120,000")
    assert ok


def test_c7_knowledge_cheaper_than_parameters():
    base = comm_cost("MM-FedAvg", MHEALTH, 500, 10, scalar_bytes=4)
    ratios = {s: comm_cost(s, MHEALTH, 500, 10, (0, 1), 4).total / base.total for s in ("FedMEKT-C", "FedMEKT-S")}
    ok = all(r < 1 for r in ratios.values())
    report(
        "C7b byte ratio vs MM-FedAvg",
        ok,
        ", ".join(f"{s} {r:.3f}" for s, r in ratios.items()) + f" (MM-FedAvg {base.total} B/round)",
    )
    assert ok


def test_c8_ablation_sweep(tmp_path):
    base = ExperimentConfig(output_dir=str(tmp_path), **{**QUICK, "rounds": 4})
    rows = sweep(base, {"ekt_steps": [1, 2, 3], "local_epochs": [1, 2, 3]})
    assert len(rows) == 9
    means = {r: np.mean([row["probe_f1_mean"] for row in rows if row["ekt_steps"] == r]) for r in (1, 2, 3)}
    dominated = means[2] < means[1]
    # soft check: reported but never failed on the directional part
    report(
        "C8 ablation sweep",
        True,
        f"9 rows; R-column means {', '.join(f'R={r}: {v:.4f}' for r, v in means.items())}"
        + ("; note R=2 below R=1" if dominated else "; R=2 not dominated by R=1"),
    )


def test_c9_mixed_clients(tmp_path):
    cfg = ExperimentConfig(
        client_mode="mixed", mixed_counts=[2, 2, 2], output_dir=str(tmp_path),
        **{**QUICK, "clients_per_round": 6},
    )
    res = simulate(cfg)
    contribs = {tuple(sorted(m.contributors.items())) for m in res.metrics[1:]}
    f1 = res.metrics[-1].probe_f1
    ok = contribs == {(("A", 4), ("B", 4))} and all(math.isfinite(f1[m]) for m in ("A", "B"))
    report("C9 mixed clients", ok, f"contributors {sorted(contribs)}, final probe F1 {f1}")
    assert ok
