import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fphtc.policy import (DOMAIN_HI, CartConfig, PacketDataset, PacketRecord, RoutingPolicy, Rule,
                          balanced_class_weight, best_cart_split, build_packet_dataset, check_partition,
                          classify, compile_rules, export_policy, import_policy, match, packet_features,
                          parse_rule, train_cart)
from fphtc.traffic import AppType, CoSLabel, LabelKind, Packet, assemble_flows

from conftest import conversation, tcp
from oracles import brute_cart_split

A, B, C = CoSLabel.DelaySensitive, CoSLabel.DelayModerate, CoSLabel.DelayTolerant


@pytest.mark.parametrize("ip, value", [("0.0.0.0", 0), ("192.168.1.1", 3232235777),
                                       ("255.255.255.255", 4294967295)])
def test_packet_features_encoding(ip, value):
    f = packet_features(Packet.make(0, ip, 1, "1.2.3.4", 2))
    assert f.src_ip_dec == value and f.src_port == 1 and f.dst_port == 2


def test_unique_tuples_and_directions():
    pk = [tcp(i, "10.0.0.1", 5000, "10.0.0.2", 80, 10) for i in range(10)]
    (f,) = assemble_flows(pk, app=AppType.VOIP)
    assert len(build_packet_dataset([f], LabelKind.Truth)) == 1
    bi = conversation(app=AppType.VIDEO)
    ds = build_packet_dataset([bi], LabelKind.Truth)
    assert len(ds) == 2 and set(ds.y.tolist()) == {int(B)}


def test_majority_conflict_rule():
    f = conversation()
    flows = [f.with_teacher_label(A), f.with_teacher_label(A), f.with_teacher_label(B)]
    ds = build_packet_dataset(flows, LabelKind.TeacherPredicted)
    assert set(ds.y.tolist()) == {int(A)}
    assert ds.conflicts == 2  # both directed tuples of the flow disagree across flows
    tie = build_packet_dataset([f.with_teacher_label(C), f.with_teacher_label(B)])
    assert set(tie.y.tolist()) == {int(C)}


def test_unlabeled_flow_rejected():
    with pytest.raises(ValueError):
        build_packet_dataset([conversation()], LabelKind.TeacherPredicted)


def recs(rows):
    return [PacketRecord(tuple(r[:4]), CoSLabel(r[4])) for r in rows]


def test_single_class_single_leaf():
    t = train_cart(recs([(1, 2, 3, 4, 2), (5, 6, 7, 8, 2)]))
    assert t.n_leaves == 1 and classify(t, (9, 9, 9, 9)) is C
    (rule,) = compile_rules(t).rules
    assert rule.lo == (0, 0, 0, 0) and rule.hi == DOMAIN_HI


def test_dst_port_stump():
    rows = [(7, 7, 1000, port, 0 if port <= 443 else 1) for port in (22, 80, 443, 444, 8080, 9000)]
    t = train_cart(recs(rows))
    assert t.n_leaves == 2 and t.feature[0] == 3
    assert classify(t, (0, 0, 0, 80)) is A
    assert np.array_equal(t.predict(np.array([r[:4] for r in rows])), [r[4] for r in rows])
    pol = compile_rules(t)
    assert [(r.lo[3], r.hi[3]) for r in pol.rules] == [(0, 444), (444, 65536)]
    assert all(r.lo[:3] == (0, 0, 0) and r.hi[:3] == DOMAIN_HI[:3] for r in pol.rules)


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        train_cart([])


def test_cart_config_validation():
    with pytest.raises(ValueError):
        CartConfig(criterion="gini")
    with pytest.raises(ValueError):
        CartConfig(min_samples_split=1)


def test_balanced_weights():
    w = balanced_class_weight(np.array([0, 0, 0, 1]))
    assert w[0] == pytest.approx(4 / 9) and w[1] == pytest.approx(4 / 3) and w[2] == 0


def _random_instance(rng):
    n = int(rng.integers(2, 201))
    X = rng.integers(0, 20, size=(n, 4)).astype(np.int64)
    y = rng.integers(0, 3, size=n)
    return X, y


def test_cart_split_matches_brute_force(rng):
    for _ in range(50):
        X, y = _random_instance(rng)
        cw = balanced_class_weight(y)
        idx = np.arange(len(y))
        got = best_cart_split(idx, X, y, cw)
        want = brute_cart_split(idx, X, y, cw)
        if want is None:
            assert got is None
        else:
            assert got.gain == pytest.approx(want[0], abs=1e-9)
            assert (got.feature_index, got.threshold) == (want[1], want[2])


def test_unlimited_depth_fits_consistent_data(rng):
    for _ in range(20):
        X, _ = _random_instance(rng)
        X = np.unique(X, axis=0)
        y = rng.integers(0, 3, size=len(X))
        t = train_cart(PacketDataset(X, y))
        assert np.array_equal(t.predict(X), y)


def test_leaf_cap(rng):
    X, y = _random_instance(rng)
    for cap in (2, 5, 11):
        t = train_cart(PacketDataset(X, y), CartConfig(max_leaf_nodes=cap))
        assert t.n_leaves <= cap
        assert len(compile_rules(t)) == t.n_leaves


def _random_tree(rng, n=300):
    X = np.column_stack([rng.integers(0, 2**32, n), rng.integers(0, 2**32, n),
                         rng.integers(0, 2**16, n), rng.integers(0, 2**16, n)]).astype(np.int64)
    return train_cart(PacketDataset(X, rng.integers(0, 3, n)))


def random_points(rng, m):
    return np.column_stack([rng.integers(0, hi, m) for hi in DOMAIN_HI]).astype(np.int64)


def test_rules_equal_tree(rng):
    t = _random_tree(rng)
    pol = compile_rules(t)
    assert len(pol) == t.n_leaves
    check_partition(pol)
    P = random_points(rng, 20000)
    assert np.array_equal(pol.classify_many(P), t.predict(P))
    for f in P[:200]:
        assert match(pol, f).action is classify(t, f)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_partition_on_small_domains(seed):
    # exhaustive check over a coarse grid of boundary values
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, size=(40, 4))
    t = train_cart(PacketDataset(X, rng.integers(0, 3, 40)))
    pol = compile_rules(t)
    check_partition(pol)
    grid = np.array(np.meshgrid(*[np.arange(7)] * 4)).reshape(4, -1).T
    out, hits = pol.match_counts(grid)
    assert np.all(hits == 1)
    assert np.array_equal(out, t.predict(grid))


def test_check_partition_detects_faults():
    full = Rule((0, 0, 0, 0), DOMAIN_HI, A)
    check_partition(RoutingPolicy((full,)))
    with pytest.raises(ValueError, match="overlap"):
        check_partition(RoutingPolicy((full, full)))
    half = Rule((0, 0, 0, 0), DOMAIN_HI[:3] + (100,), A)
    with pytest.raises(ValueError, match="cover"):
        check_partition(RoutingPolicy((half,)))


def test_policy_file_round_trip(tmp_path, rng):
    t = _random_tree(rng)
    pol = compile_rules(t)
    export_policy(pol, tmp_path / "p.txt")
    back = import_policy(tmp_path / "p.txt")
    assert back == pol
    P = random_points(rng, 1000)
    assert np.array_equal(back.classify_many(P), t.predict(P))


def test_policy_file_errors(tmp_path):
    with pytest.raises(ValueError):
        export_policy(RoutingPolicy(()), tmp_path / "e.txt")
    good = "srcip:[0,4294967296) dstip:[0,4294967296) sport:[0,65536) dport:[0,65536) -> DelayTolerant"
    (tmp_path / "bad.txt").write_text(good + "\nsrcip:[0,1) nonsense\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        import_policy(tmp_path / "bad.txt")
    with pytest.raises(ValueError, match="unknown action"):
        parse_rule(good.replace("DelayTolerant", "Fast"))
    with pytest.raises(ValueError, match="outside"):
        parse_rule(good.replace("sport:[0,65536)", "sport:[0,70000)"))


def test_flow_directions_share_rule_when_labels_agree(separable_small):
    flows = [f.with_teacher_label(f.true_cos) for f in separable_small[:300]]
    ds = build_packet_dataset(flows)
    t = train_cart(ds)
    pred = t.predict(ds.X)
    assert np.array_equal(pred, ds.y)
    for f in flows[:50]:
        labels = {classify(t, packet_features(p)) for p in f.packets}
        assert labels == {f.teacher_label}
