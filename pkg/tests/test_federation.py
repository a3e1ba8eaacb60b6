import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmekt import autograd as ag
from fedmekt import data as D
from fedmekt import federation as F
from fedmekt.evaluation import CommLedger, comm_cost
from fedmekt.losses import LossWeights, client_loss, recon_loss, server_loss
from fedmekt.models import ArchSpec, init_classifier, init_model, preset
from fedmekt.optim import Adam

ARCH = ArchSpec({"A": 3, "B": 2}, {"A": 2, "B": 3}, 4, 3)


def _dataset(n, seed=0, owner=None, labels=True):
    ds = D.synth_generate(3, 3, 2, n, seq_len=3, seed=seed)
    return ds.subset(range(n), owner=owner, keep_labels=labels)


def _client(cid, mods=("A", "B"), n=20, seed=0):
    data = _dataset(n, seed=100 + cid, owner=f"client:{cid}", labels=False).subset(
        range(n), owner=f"client:{cid}", modalities=mods, keep_labels=False
    )
    return F.ClientState(cid, mods, data, init_model(ARCH, seed, mods))


def _server(n_proxy=10, seed=0):
    proxy = _dataset(n_proxy, seed=7, owner="shared:proxy", labels=False)
    labeled = _dataset(30, seed=8, owner="server")
    return F.ServerState(init_model(ARCH, seed), init_classifier(ARCH.h2, 3, seed + 1), proxy, labeled)


def _cfg(**kw):
    base = dict(strategy="FedMEKT-C", local_epochs=1, ekt_steps=1, clf_epochs=1, batch_size=8, clients_per_round=2)
    base.update(kw)
    return F.RoundConfig(**base)


def _msg(cid, rng, n=6, mods=("A", "B")):
    return F.KnowledgeMessage(cid, {m: [rng.normal(size=(n, w)) for w in ARCH.layer_widths(m)] for m in mods}, n)


# --- sampling -------------------------------------------------------------------


def test_sample_all_and_repeatable():
    clients = [_client(i) for i in range(5)]
    assert [c.client_id for c in F.sample_clients(clients, 5, np.random.default_rng(0))] == list(range(5))
    a = F.sample_clients(clients, 3, np.random.default_rng(11))
    b = F.sample_clients(clients, 3, np.random.default_rng(11))
    assert [c.client_id for c in a] == [c.client_id for c in b]
    with pytest.raises(F.ProtocolError):
        F.sample_clients(clients, 6, np.random.default_rng(0))


def test_sampling_frequencies_within_three_sigma():
    k, m, draws = 30, 10, 10_000
    clients = [type("C", (), {"client_id": i})() for i in range(k)]
    rng = np.random.default_rng(2024)
    counts = np.zeros(k)
    for _ in range(draws):
        for c in F.sample_clients(clients, m, rng):
            counts[c.client_id] += 1
    p = m / k
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)


# --- knowledge aggregation ----------------------------------------------------------


def test_single_message_identity():
    msg = _msg(3, np.random.default_rng(0))
    collab = F.aggregate_knowledge([msg])
    for got, want in zip(collab.joint(), msg.fused()):
        assert np.array_equal(got, want)


def test_copies_of_one_message_are_exact():
    msg = _msg(0, np.random.default_rng(1))
    copies = [F.KnowledgeMessage(i, msg.knowledge, msg.n_rows) for i in range(7)]
    for got, want in zip(F.aggregate_knowledge(copies).joint(), msg.fused()):
        assert np.array_equal(got, want)


def test_opposite_messages_cancel():
    msg = _msg(0, np.random.default_rng(2))
    neg = F.KnowledgeMessage(1, {m: [-a for a in v] for m, v in msg.knowledge.items()}, msg.n_rows)
    assert all(not a.any() for a in F.aggregate_knowledge([msg, neg]).joint())


def test_unimodal_contributors_count_for_their_modality():
    rng = np.random.default_rng(3)
    msgs = [_msg(0, rng), _msg(1, rng, mods=("A",)), _msg(2, rng, mods=("B",))]
    collab = F.aggregate_knowledge(msgs)
    assert collab.contributors == {"A": 2, "B": 2}
    np.testing.assert_allclose(
        collab.per_modality["A"][1], (msgs[0].knowledge["A"][1] + msgs[1].knowledge["A"][1]) / 2, rtol=0, atol=1e-12
    )
    with pytest.raises(F.ProtocolError, match="B"):
        F.aggregate_knowledge([msgs[1]])


def test_message_row_contract():
    with pytest.raises(F.ProtocolError):
        F.KnowledgeMessage(0, {"A": [np.zeros((5, 2)), np.zeros((6, 4))]}, 5)


# --- parameter aggregation -------------------------------------------------------


def _update(cid, n, mods, seed):
    return F.ParamUpdate(cid, n, mods, init_model(ARCH, seed, mods).state_dict())


def test_identical_clients_identity():
    ups = [_update(i, 10 + i, ("A", "B"), 4) for i in range(3)]
    out = F.aggregate_parameters(ups, alpha=100)
    for k, v in ups[0].state.items():
        np.testing.assert_allclose(out[k], v, rtol=0, atol=1e-15)


def test_two_equal_clients_plain_mean():
    a, b = _update(0, 5, ("A", "B"), 1), _update(1, 5, ("A", "B"), 2)
    out = F.aggregate_parameters([a, b])
    for k in a.state:
        np.testing.assert_allclose(out[k], (a.state[k] + b.state[k]) / 2, atol=1e-15)


def test_alpha_weighting_hand_computed():
    # clients 0 and 1 unimodal-A, client 2 multimodal
    ups = [_update(0, 10, ("A",), 1), _update(1, 20, ("A",), 2), _update(2, 30, ("A", "B"), 3)]
    w = F.aggregation_weights(ups, "A", 100.0)
    total = 10 + 20 + 3000
    assert w == pytest.approx({0: 10 / total, 1: 20 / total, 2: 3000 / total}, abs=1e-15)
    assert F.aggregation_weights(ups, "B", 100.0) == {2: 1.0}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_aggregate_parameters_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ups = [_update(i, int(rng.integers(1, 50)), [("A", "B"), ("A",), ("B",)][i % 3], seed + i) for i in range(5)]
    a = F.aggregate_parameters(ups, alpha=100)
    b = F.aggregate_parameters([ups[i] for i in rng.permutation(5)], alpha=100)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-12)


def test_aggregate_parameters_arch_mismatch():
    other = ArchSpec({"A": 3, "B": 2}, {"A": 5, "B": 3}, 4, 3)
    ups = [_update(0, 1, ("A", "B"), 0), F.ParamUpdate(1, 1, ("A", "B"), init_model(other, 0).state_dict())]
    with pytest.raises(F.ProtocolError, match="mismatch"):
        F.aggregate_parameters(ups)


# --- client and server steps --------------------------------------------------------


def test_zero_epochs_leave_client_and_report_current_embeddings():
    client, server = _client(0), _server()
    before = client.model.state_dict()
    _, msg, _ = F.client_local_update(client, None, server.proxy, _cfg(local_epochs=0), np.random.default_rng(0))
    assert all(np.array_equal(before[k], v) for k, v in client.model.state_dict().items())
    expected = F.extract_knowledge(client.model, server.proxy.x, (0, 1))
    for m in "AB":
        for a, b in zip(msg.knowledge[m], expected[m]):
            assert np.array_equal(a, b)


@pytest.mark.parametrize("batch_size", [3, 7, 64])
def test_knowledge_rows_always_cover_proxy(batch_size):
    client, server = _client(0), _server(n_proxy=11)
    gk = F.global_knowledge(server, (0, 1))
    _, msg, _ = F.client_local_update(client, gk, server.proxy, _cfg(batch_size=batch_size), np.random.default_rng(0))
    assert msg.n_rows == 11
    assert [a.shape for a in msg.knowledge["A"]] == [(11, 2), (11, 4)]


def test_split_message_stays_per_modality():
    client, server = _client(0, ("B",)), _server()
    _, msg, _ = F.client_local_update(client, None, server.proxy, _cfg(strategy="FedMEKT-S"), np.random.default_rng(0))
    assert msg.coverage == ("B",)


def _direct_training(model, x_batches, lr, loss_fn):
    opt = Adam(model.parameters(), lr=lr)
    for batch in x_batches:
        opt.zero_grad()
        ag.backward(loss_fn(model, batch))
        opt.step()


def test_gamma_zero_client_on_proxy_is_plain_autoencoder_training():
    server = _server(n_proxy=12)
    proxy_x = server.proxy.x
    data = D.MultimodalDataset(proxy_x, None, 3, owner="client:0")
    client = F.ClientState(0, ("A", "B"), data, init_model(ARCH, 5))
    reference = init_model(ARCH, 5)
    cfg = _cfg(local_epochs=2, batch_size=5, weights=LossWeights(gamma=0.0, beta=0.0))
    F.client_local_update(client, F.global_knowledge(server, (0, 1)), server.proxy, cfg, np.random.default_rng(9))

    rng = np.random.default_rng(9)
    rng.permutation(12)  # proxy shuffle drawn first
    batches = [idx for _ in range(2) for idx in F._batches(12, 5, rng)]

    def loss(model, idx):
        total = None
        for src in "AB":
            _, _, h = model.encode(src, proxy_x[src][idx])
            for dst in "AB":
                term = recon_loss(proxy_x[dst][idx], model.decode(dst, h))
                total = term if total is None else total + term
        return total

    _direct_training(reference, batches, 0.01, loss)
    for k, v in reference.state_dict().items():
        np.testing.assert_allclose(client.model.state_dict()[k], v, rtol=0, atol=1e-12)


def test_server_zero_steps_unchanged_and_beta_zero_is_proxy_training():
    server = _server(n_proxy=9)
    collab = F.aggregate_knowledge([_msg(0, np.random.default_rng(0), n=9)])
    before = server.model.state_dict()
    F.server_update(server, collab, _cfg(ekt_steps=0), np.random.default_rng(0))
    assert all(np.array_equal(before[k], v) for k, v in server.model.state_dict().items())

    reference = init_model(ARCH, 0)
    cfg = _cfg(ekt_steps=2, batch_size=4, weights=LossWeights(gamma=0.0, beta=0.0))
    F.server_update(server, collab, cfg, np.random.default_rng(3))
    rng = np.random.default_rng(3)
    batches = [idx for _ in range(2) for idx in F._batches(9, 4, rng)]
    x = server.proxy.x
    _direct_training(
        reference, batches, 0.01,
        lambda model, idx: server_loss(model, {m: x[m][idx] for m in "AB"}, None, LossWeights(beta=0.0)),
    )
    for k, v in reference.state_dict().items():
        np.testing.assert_allclose(server.model.state_dict()[k], v, rtol=0, atol=1e-12)


def test_server_rejects_misaligned_knowledge():
    server = _server(n_proxy=9)
    with pytest.raises(F.ProtocolError):
        F.server_update(server, F.aggregate_knowledge([_msg(0, np.random.default_rng(0), n=8)]), _cfg(),
                        np.random.default_rng(0))


def test_global_knowledge_width_mhealth():
    arch = preset("mhealth", "Acce", "Gyro", seq_len=4)
    proxy = D.MultimodalDataset({"A": np.zeros((5, 4, 9)), "B": np.zeros((5, 4, 6))}, None, 13)
    server = F.ServerState(init_model(arch, 0), init_classifier(24, 13, 0), proxy, proxy)
    gk = F.global_knowledge(server, (0, 1))
    assert [a.shape for a in gk.joint()] == [(5, 8), (5, 48)]


# --- classifier -------------------------------------------------------------------


def test_classifier_zero_epochs_and_encoder_frozen():
    server = _server()
    enc = server.model.state_dict()
    clf = server.classifier.state_dict()
    F.train_classifier(server, _cfg(clf_epochs=0), np.random.default_rng(0))
    assert all(np.array_equal(clf[k], v) for k, v in server.classifier.state_dict().items())
    F.train_classifier(server, _cfg(clf_epochs=3), np.random.default_rng(0))
    assert all(np.array_equal(enc[k], v) for k, v in server.model.state_dict().items())
    assert any(not np.array_equal(clf[k], v) for k, v in server.classifier.state_dict().items())


class _CodeEncoder:
    """Stand-in global encoder: the code is a fixed per-class vector."""

    modalities = ("A", "B")

    def __init__(self, codes):
        self.codes = codes

    def encode(self, m, x):
        h = ag.Tensor(self.codes[x[:, 0, 0].astype(int)])
        return h, h, h


def test_classifier_fits_separable_codes_within_50_epochs():
    n = 90
    labels = np.arange(n) % 3
    codes = np.eye(4)[labels] * 2.0
    x = np.zeros((n, 3, 1))
    x[:, 0, 0] = np.arange(n)
    labeled = D.MultimodalDataset({"A": x, "B": x}, labels, 3, owner="server")
    server = F.ServerState(_CodeEncoder(codes), init_classifier(4, 3, 0), labeled, labeled)
    F.train_classifier(server, _cfg(clf_epochs=50, lr_clf=0.05, batch_size=16), np.random.default_rng(0))
    preds = server.classifier(ag.Tensor(codes)).data.argmax(axis=1)
    assert (preds == labels).mean() == 1.0


# --- whole rounds -------------------------------------------------------------------


def test_one_client_round_is_local_then_server_training():
    cfg = _cfg(clients_per_round=1, weights=LossWeights(gamma=0.0, beta=0.0))
    server, client = _server(), _client(0)
    ref_server, ref_client = _server(), _client(0)
    F.run_round(server, [client], cfg, t=1, seed=4, ledger=CommLedger())

    ref_server.knowledge = F.global_knowledge(ref_server, cfg.layers)
    _, msg, _ = F.client_local_update(ref_client, ref_server.knowledge, ref_server.proxy, cfg, F.round_rng(4, 1, 1, 0))
    F.server_update(ref_server, F.aggregate_knowledge([msg]), cfg, F.round_rng(4, 1, 2))
    F.train_classifier(ref_server, cfg, F.round_rng(4, 1, 3))
    for a, b in ((client.model, ref_client.model), (server.model, ref_server.model)):
        for k, v in a.state_dict().items():
            assert np.array_equal(v, b.state_dict()[k])


def test_fedavg_identical_clients_move_together():
    cfg = _cfg(strategy="MM-FedAvg", clients_per_round=3, weights=LossWeights(alpha=1.0))
    server = _server()
    data = _dataset(16, seed=3)
    clients = [
        F.ClientState(i, ("A", "B"), data.subset(range(16), owner=f"client:{i}", keep_labels=False), init_model(ARCH, 0))
        for i in range(3)
    ]
    # identical data and identical batch order: every client makes the same update
    rngs = [np.random.default_rng(1) for _ in clients]
    ups = [F.baseline_local_update(c, server.model, cfg, r)[0] for c, r in zip(clients, rngs)]
    out = F.aggregate_parameters(ups)
    for k, v in ups[0].state.items():
        np.testing.assert_allclose(out[k], v, rtol=0, atol=1e-14)


@pytest.mark.parametrize("strategy", ["FedMEKT-C", "FedMEKT-S", "MM-FedAvg", "MM-FedProx", "MM-MOON"])
def test_round_ledger_matches_closed_form(strategy):
    weights = LossWeights(gamma=0.1, beta=0.1) if strategy.startswith("FedMEKT") else LossWeights(mu=0.01, alpha=1.0)
    cfg = _cfg(strategy=strategy, clients_per_round=3, weights=weights)
    server = _server(n_proxy=10)
    clients = [_client(i) for i in range(4)]
    ledger = CommLedger()
    F.run_round(server, clients, cfg, 1, 0, ledger)
    closed = comm_cost(strategy, ARCH, 10, 3, cfg.layers, cfg.scalar_bytes)
    assert ledger.round_bytes(1) == (closed.up, closed.down)
    assert ledger.total(kind="proxy") == closed.proxy_once
    kinds = {e[3] for e in ledger.entries}
    if strategy.startswith("FedMEKT"):
        assert "parameters" not in kinds
    else:
        assert kinds == {"parameters"}


def test_moon_keeps_previous_local_model():
    cfg = _cfg(strategy="MM-MOON", clients_per_round=2, weights=LossWeights(mu=1.0, tau=0.5))
    server, clients = _server(), [_client(0), _client(1)]
    F.run_round(server, clients, cfg, 1, 0, CommLedger())
    assert all(c.prev_model is not None for c in clients)
    F.run_round(server, clients, cfg, 2, 0, CommLedger())


def test_missing_modality_round_aggregates_what_is_covered(caplog):
    cfg = _cfg(clients_per_round=2)
    server = _server()
    clients = [_client(0, ("A",)), _client(1, ("A",))]
    res = F.run_round(server, clients, cfg, 1, 0, CommLedger())
    assert res.contributors == {"A": 2}
    assert "no contributors" in caplog.text


def test_private_data_never_read_by_server():
    D.ACCESS_LOG.clear()
    server, clients = _server(), [_client(i) for i in range(3)]
    F.run_round(server, clients, _cfg(), 1, 0, CommLedger())
    assert D.ACCESS_LOG.private_reads_from("server") == 0
    assert all(r.startswith("client:") and r == o for o, r in D.ACCESS_LOG.reads if o.startswith("client:"))
    D.ACCESS_LOG.clear()


def test_empty_client_rejected():
    empty = D.MultimodalDataset({"A": np.zeros((0, 3, 3)), "B": np.zeros((0, 3, 2))}, None, 3, owner="client:0")
    c = F.ClientState(0, ("A", "B"), empty, init_model(ARCH, 0))
    with pytest.raises(F.ProtocolError):
        F.client_local_update(c, None, _server().proxy, _cfg(), np.random.default_rng(0))
    with pytest.raises(F.ProtocolError):
        F.baseline_local_update(c, init_model(ARCH, 0), _cfg(strategy="MM-FedAvg"), np.random.default_rng(0))


def test_client_model_must_match_modalities():
    with pytest.raises(F.ProtocolError):
        F.ClientState(0, ("A",), _dataset(4), init_model(ARCH, 0))
