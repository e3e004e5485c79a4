from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgdiff.config import ConfigError, config_from_dict
from fedgdiff.diffusion import DomainError
from fedgdiff.federation import (
    HEADLINE_KINDS, ClientNode, PhaseError, ProtocolError, ServerNode, _flat64, aggregate_payloads,
    cosine_similarity, derive_seed, fedavg, nearest_partners, prepare_clients, privacy_aggregate,
    round1_upload, round2_package, run_fedavg_baseline, run_protocol, volume_formula,
)
from fedgdiff.gin import GinClassifier
from fedgdiff.nn import ContractError, init_module, param_store
from fedgdiff.toy import stub_diffusion_model, toy_graphset
from fedgdiff.wire import CommLedger, deserialize_model, make_codec, serialize_model


def _init():
    return init_module(lambda: GinClassifier(1, 2, 2, 1), 0)


def _echo_init(client, package, init_bytes):
    return deserialize_model(init_bytes)


def _clients(n, variant="advanced"):
    return [ClientNode(i, diffusion=stub_diffusion_model(i, variant=variant)) for i in range(n)]


# ---------------------------------------------------------------- similarity


def test_cosine_examples():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [2, 4]) == pytest.approx(1.0)
    assert cosine_similarity([1, 2], [-1, -2]) == pytest.approx(-1.0)
    with pytest.raises(DomainError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ContractError):
        cosine_similarity([1, 0], [1, 0, 0])


def _brute_partners(vectors):
    out = []
    for i, v in enumerate(vectors):
        best, arg = -np.inf, None
        for j, w in enumerate(vectors):
            if j != i and cosine_similarity(v, w) > best:
                best, arg = cosine_similarity(v, w), j
        out.append(arg)
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_partners_match_pairwise_scan(n, seed):
    vectors = list(np.random.default_rng(seed).normal(size=(n, 6)))
    assert nearest_partners(vectors) == _brute_partners(vectors)


def test_partner_ties_go_to_lowest_index():
    vectors = [np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.array([3.0, 0.0])]
    assert nearest_partners(vectors) == [1, 0, 0]


# ---------------------------------------------------------------- privacy aggregation


def test_identical_models_are_unchanged():
    models = [stub_diffusion_model(7) for _ in range(3)]
    for m in privacy_aggregate(models):
        assert np.array_equal(_flat64(m.parameters()), _flat64(models[0].parameters()))


def test_two_models_both_become_the_mean():
    a, b = stub_diffusion_model(1), stub_diffusion_model(2)
    mean = (_flat64(a.parameters()) + _flat64(b.parameters())) / 2
    for m in privacy_aggregate([a, b]):
        assert np.allclose(_flat64(m.parameters()), mean, atol=1e-7)


def test_three_models_average_with_nearest_peer():
    models = [stub_diffusion_model(s) for s in range(3)]
    flats = [_flat64(m.parameters()) for m in models]
    partners = _brute_partners(flats)
    for i, m in enumerate(privacy_aggregate(models)):
        assert np.allclose(_flat64(m.parameters()), (flats[i] + flats[partners[i]]) / 2, atol=1e-7)


def test_basic_variant_aggregates_per_label():
    models = [stub_diffusion_model(s, variant="basic") for s in range(3)]
    del models[2].networks[1]  # label 1 held by clients 0 and 1 only
    out = privacy_aggregate(models)
    s0, s1 = param_store(models[0].networks[1]), param_store(models[1].networks[1])
    for name, p in param_store(out[0].networks[1]).items():
        assert torch.allclose(p, (s0[name] + s1[name]) / 2, atol=1e-7)
    assert 1 not in out[2].networks


def test_basic_singleton_label_passes_through():
    models = [stub_diffusion_model(s, variant="basic") for s in range(2)]
    del models[1].networks[1]
    out = privacy_aggregate(models)
    a, b = param_store(models[0].networks[1]), param_store(out[0].networks[1])
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_privacy_aggregation_input_checks():
    with pytest.raises(ProtocolError):
        privacy_aggregate([stub_diffusion_model(0)])
    with pytest.raises(ContractError):
        privacy_aggregate([stub_diffusion_model(0), stub_diffusion_model(1, variant="basic")])


def test_codec_domain_aggregation_matches_plaintext():
    models = [stub_diffusion_model(s) for s in range(4)]
    payloads = [serialize_model(m).data for m in models]
    via_codec = aggregate_payloads(payloads, make_codec("passthrough"))
    assert via_codec == [serialize_model(m).data for m in privacy_aggregate(models)]
    with pytest.raises(ProtocolError):
        aggregate_payloads(payloads, make_codec("stream"))


def test_stream_codec_with_privacy_rejected():
    with pytest.raises(ProtocolError):
        ServerNode(make_codec("stream"), "privacy")
    with pytest.raises(ConfigError, match="federation.aggregation"):
        config_from_dict({"federation": {"codec": "stream", "aggregation": "privacy"}})


# ---------------------------------------------------------------- rounds


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_package_holds_everyone_else_exactly_once(n, seed):
    clients = _clients(n)
    server = ServerNode(make_codec("passthrough"), "plain", seed)
    ledger = CommLedger()
    for c in clients:
        round1_upload(c, server, ledger)
    packages = round2_package(server, [c.cid for c in clients], ledger, _init())
    for c in clients:
        expected = Counter(server.uploads[o.cid] for o in clients if o.cid != c.cid)
        assert Counter(packages[c.cid]) == expected
        assert len(packages[c.cid]) == n - 1


@pytest.mark.parametrize("n,aggregation", [(n, a) for n in (2, 3, 15) for a in ("plain", "privacy")]
                         + [(100, "privacy")])
def test_three_rounds_and_volume_formula(n, aggregation):
    clients = _clients(n)
    server = ServerNode(make_codec("passthrough"), aggregation, 5)
    ledger = CommLedger()
    run_protocol(clients, server, ledger, _init(), _echo_init)
    assert ledger.rounds() == [1, 2, 3]
    dm = [len(server.uploads[c.cid]) for c in clients]
    gnn = [len(server.gnn_uploads[c.cid]) for c in clients]
    assert ledger.total(HEADLINE_KINDS) == volume_formula(dm, gnn)
    assert ledger.total(["gnn-init"]) == n * len(server.gnn_init)
    assert server.phase == "aggregated"


def test_stream_codec_protocol_runs_and_hides_uploads():
    clients = _clients(3)
    server = ServerNode(make_codec("stream", "k"), "plain", 1)
    run_protocol(clients, server, CommLedger(), _init(), _echo_init)
    plain = serialize_model(clients[0].diffusion).data
    assert server.uploads[0] != plain and len(server.uploads[0]) == len(plain)


def test_missing_upload_names_the_client():
    clients = _clients(3)
    server = ServerNode(make_codec("passthrough"))
    ledger = CommLedger()
    for c in clients[:2]:
        round1_upload(c, server, ledger)
    with pytest.raises(ProtocolError, match=r"\[2\]"):
        round2_package(server, [0, 1, 2], ledger, _init())


def test_untrained_client_cannot_upload():
    with pytest.raises(ProtocolError, match="client4"):
        round1_upload(ClientNode(4), ServerNode(make_codec("passthrough")), CommLedger())


def test_protocol_failures_are_tagged_with_phase():
    clients = _clients(2)
    clients[1].diffusion = None
    with pytest.raises(PhaseError) as info:
        run_protocol(clients, ServerNode(make_codec("passthrough")), CommLedger(), _init(), _echo_init)
    assert info.value.phase == "round1"


def test_volume_formula_hand_value():
    assert volume_formula([10, 20, 30], [1, 1, 1]) == 60 + 2 * 60 + 3


# ---------------------------------------------------------------- FedAvg


def _linear_clf(values):
    clf = GinClassifier(1, 1, 1, 1)
    with torch.no_grad():
        for p, v in zip(param_store(clf).values(), values):
            p.fill_(v)
    return clf


def test_fedavg_mean_of_two():
    out = fedavg([_linear_clf([1, 3, 1, 3, 1, 3, 1]), _linear_clf([2, 4, 2, 4, 2, 4, 2])])
    assert [p.item() for p in param_store(out).values()] == [1.5, 3.5, 1.5, 3.5, 1.5, 3.5, 1.5]


def test_fedavg_vector_example():
    a, b = _init(), _init()
    with torch.no_grad():
        param_store(a)["head.bias"].copy_(torch.tensor([1.0, 2.0]))
        param_store(b)["head.bias"].copy_(torch.tensor([3.0, 4.0]))
    assert torch.equal(param_store(fedavg([a, b]))["head.bias"], torch.tensor([2.0, 3.0]))


def test_fedavg_single_model_is_identity():
    clf = init_module(lambda: GinClassifier(3, 2, 5, 2), 1)
    out = fedavg([clf])
    assert all(torch.equal(p, param_store(clf)[k]) for k, p in param_store(out).items())


def test_fedavg_rejects_mixed_architectures():
    with pytest.raises(ContractError):
        fedavg([GinClassifier(2, 2, 4, 1), GinClassifier(2, 2, 5, 1)])
    with pytest.raises(ProtocolError):
        fedavg([])


def test_baseline_volume_is_rounds_times_clients_times_size():
    cfg = config_from_dict({
        "pipeline": "fedavg-baseline", "data": {"clients": 3},
        "gnn": {"hidden": 8, "layers": 2}, "baseline": {"max_rounds": 4, "patience": 50},
    })
    data = prepare_clients(cfg, [toy_graphset(15)])
    res = run_fedavg_baseline(cfg, data)
    comm = res.metrics["communication"]
    assert res.metrics["rounds_executed"] == 4
    assert comm["headline_bytes"] == 4 * 3 * comm["gnn_bytes"] == comm["formula_bytes"]
    assert comm["rounds"] == [1, 2, 3, 4]


# ---------------------------------------------------------------- seeds


def test_derive_seed_is_stable_and_separates_roles():
    assert derive_seed(0, "diffusion", 1) == derive_seed(0, "diffusion", 1)
    seeds = {derive_seed(0, role, i) for role in ("diffusion", "synthesis", "gnn-train") for i in range(5)}
    assert len(seeds) == 15
    assert all(0 <= s < 2**64 for s in seeds)
