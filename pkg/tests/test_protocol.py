import math
import random

import numpy as np
import pytest

from sfavfl import he
from sfavfl.numeric import DenseLayer, Mlp, ShapeError, StateError, mlp_backward, mlp_forward, sgd_step
from sfavfl.protocol import (
    SFA_CHECKS,
    CutLayerMode,
    MessageKind,
    PayloadEncoding,
    ProtocolMessage,
    Session,
    Transcript,
    audit_secrets,
    backward_route,
    mask_share_split,
    pack_matrix,
    session_roles,
    sfa_forward,
    sfa_init,
    splitnn_forward,
    transcript_audit,
    unpack_payload,
    weight_mask_bound,
)

from conftest import linear_party, set_weight_mask, toy_session
from oracles import masked_sum_oracle

F = he.DEFAULT_FRACTION_BITS
MODES = ["mock", "paillier"]


def rand_session(rng, n_parties, width, in_sizes, he_mode, keypair, seed=0, **kw):
    weights = [rng.uniform(-1, 1, size=(width, k)) for k in in_sizes]
    return toy_session(weights, he_mode=he_mode, keypair=keypair, seed=seed, **kw)


# --- initialisation ---------------------------------------------------------


def test_weight_mask_bound():
    assert weight_mask_bound(16) == 0.5


def test_sfa_init_ciphertexts_decrypt_to_encoded_mask(keypair):
    s = toy_session([np.ones((2, 2)), np.ones((2, 3))], he_mode="paillier", keypair=keypair, keep_plain_mask=True)
    lead = s.parties[1]
    assert lead.w_mask_plain.shape == (2, 2)
    assert np.max(np.abs(lead.w_mask_plain)) <= weight_mask_bound(2)
    codec = s.backend.codec
    ring = he.decrypt_matrix(keypair, s.active.sfa.enc_weight_mask)
    assert ring.tolist() == codec.encode_matrix(lead.w_mask_plain).tolist()
    kinds = [m.kind for m in s.transcript]
    assert kinds == [MessageKind.CONTROL_SYNC, MessageKind.ENC_WEIGHT_MASK]


def test_same_seed_same_weight_mask():
    masks = []
    for _ in range(2):
        s = toy_session([np.ones((3, 4)), np.ones((3, 2))], seed=9, keep_plain_mask=True)
        masks.append(s.parties[1].w_mask_plain)
    assert np.array_equal(*masks)


def test_plain_mask_kept_only_on_request():
    s = toy_session([np.ones((1, 1)), np.ones((1, 1))])
    assert s.parties[1].w_mask_plain is None


def test_sfa_init_requires_keypair_in_paillier_mode():
    parties = [linear_party(0, [[1.0]]), linear_party(1, [[1.0]])]
    with pytest.raises(StateError):
        sfa_init(Session(parties, "sfa", he_mode="paillier"))


def test_sfa_init_rejects_concat_mode():
    parties = [linear_party(0, [[1.0]]), linear_party(1, [[1.0]])]
    with pytest.raises(StateError):
        sfa_init(Session(parties, "splitnn"))


# --- forward ----------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
def test_one_dimensional_toy(mode, keypair):
    s = toy_session([[[1.0]], [[4.0]]], he_mode=mode, keypair=keypair, w_mask=[[2.0]])
    res = sfa_forward(s, [np.array([[3.0]]), np.array([[5.0]])])
    assert res.z.tolist() == [[29.0]]


@pytest.mark.parametrize("mode", MODES)
def test_zero_masks_give_plain_sum(mode, keypair):
    r = np.random.default_rng(0)
    s = rand_session(r, 3, 4, [3, 2, 2], mode, keypair, w_mask=np.zeros((4, 3)))
    s.zero_masks = True
    slices = [r.uniform(size=(5, k)) for k in (3, 2, 2)]
    res = sfa_forward(s, slices)
    plain = sum(x @ p.bottom.layers[0].weight.T for x, p in zip(slices, s.parties))
    assert np.max(np.abs(res.z - plain)) <= 3 * 2.0**-F


def test_random_two_party_instance_matches_masked_sum_oracle(keypair):
    r = np.random.default_rng(1)
    d = 6
    s = rand_session(r, 2, 5, [d, 4], "paillier", keypair, keep_plain_mask=True)
    slices = [r.uniform(size=(4, d)), r.uniform(size=(4, 4))]
    res = sfa_forward(s, slices)
    assert np.max(np.abs(res.z - masked_sum_oracle(s, slices))) <= d * 2.0**-F


def test_row_mismatch_is_shape_error():
    s = toy_session([np.ones((2, 2)), np.ones((2, 2))])
    with pytest.raises(ShapeError):
        sfa_forward(s, [np.ones((3, 2)), np.ones((2, 2))])


def test_forward_before_init_is_state_error():
    parties = [linear_party(0, [[1.0]]), linear_party(1, [[1.0]])]
    with pytest.raises(StateError):
        sfa_forward(Session(parties, "sfa"), [np.ones((1, 1))] * 2)


def test_uncancelled_masks_fail_to_decode(keypair):
    s = toy_session([[[1.0]], [[1.0]]], he_mode="paillier", keypair=keypair)
    garbage = s.backend.random_ring((1, 1), random.Random(3))
    with pytest.raises(he.CodecError):
        s.backend.decode_aggregate(garbage)


def test_sfa_message_flow_three_parties(keypair):
    r = np.random.default_rng(2)
    s = rand_session(r, 3, 2, [2, 2, 2], "paillier", keypair)
    res = sfa_forward(s, [r.uniform(size=(2, 2))] * 3)
    flow = [(m.kind, m.sender, m.receiver) for m in res.messages]
    assert flow == [
        (MessageKind.ENC_MASK_SHARE, 0, 1),
        (MessageKind.PLAIN_MASK_SHARE, 1, 2),
        (MessageKind.MASKED_ACTIVATION, 1, 0),
        (MessageKind.MASKED_ACTIVATION, 2, 0),
    ]
    for m in res.messages:
        p = unpack_payload(m.payload)
        if m.kind is MessageKind.MASKED_ACTIVATION:
            assert p.encoding is PayloadEncoding.RING and p.scale == 2 * F


# --- mask shares ------------------------------------------------------------


class FixedRng:
    def __init__(self, value):
        self.value = value

    def randrange(self, n):
        return self.value % n


def test_mask_share_split_no_extra():
    m = np.array([[10]], dtype=object)
    own, shares = mask_share_split(m, 0, random.Random(0), modulus=97)
    assert own.tolist() == [[10]] and shares == []


def test_mask_share_split_hand_example():
    own, shares = mask_share_split(np.array([[10]], dtype=object), 1, FixedRng(4), modulus=97)
    assert own.tolist() == [[6]]
    assert shares[0].tolist() == [[4]]


def test_five_way_split_sums_back(keypair):
    n = keypair.public.n
    r = random.Random(4)
    m = np.empty((3, 4), dtype=object)
    for idx in np.ndindex(3, 4):
        m[idx] = r.randrange(n)
    own, shares = mask_share_split(m, 4, r, modulus=n)
    total = own
    for s in shares:
        total = (total + s) % n
    assert total.tolist() == m.tolist()


def test_mask_share_split_negative_count():
    with pytest.raises(ValueError):
        mask_share_split(np.zeros((1, 1)), -1, random.Random(0))


@pytest.mark.parametrize("n_parties", [2, 3, 4])
def test_share_completeness_every_batch(n_parties, keypair):
    r = np.random.default_rng(n_parties)
    sizes = [3] + [2] * (n_parties - 1)
    s = rand_session(r, n_parties, 3, sizes, "paillier", keypair, keep_plain_mask=True, record_secrets=True)
    n = keypair.public.n
    codec = s.backend.codec
    for _ in range(5):
        sfa_forward(s, [r.uniform(size=(2, k)) for k in sizes])
        rec = s.secrets[-1]
        total = rec["mask_a"]
        for share in rec["shares"].values():
            total = (total + share) % n
        expected = codec.encode_matrix(rec["h_a"] @ s.parties[1].w_mask_plain.T, 2 * F)
        # the ring product of the two encodings, not the encoding of the float product
        exact = np.empty_like(expected)
        xa = codec.encode_matrix(rec["h_a"])
        wm = codec.encode_matrix(s.parties[1].w_mask_plain)
        for i, j in np.ndindex(*exact.shape):
            exact[i, j] = sum(int(xa[i, t]) * int(wm[j, t]) for t in range(xa.shape[1])) % n
        assert total.tolist() == exact.tolist()
        lifted = np.array([codec.lift(int(v)) for v in ((total - expected) % n).ravel()])
        assert np.max(np.abs(lifted)) <= xa.shape[1] * 2**F


def test_mask_freshness_32_batches(keypair):
    r = np.random.default_rng(5)
    s = rand_session(r, 2, 3, [2, 2], "paillier", keypair, record_secrets=True)
    seen = set()
    x = [r.uniform(size=(2, 2))] * 2
    for _ in range(32):
        sfa_forward(s, x)
        key = tuple(s.secrets[-1]["mask_a"].ravel())
        assert key not in seen
        seen.add(key)


def test_masked_payloads_uncorrelated_with_outputs(keypair):
    r = np.random.default_rng(6)
    s = rand_session(r, 2, 4, [3, 3], "paillier", keypair, record_secrets=True)
    codec = s.backend.codec
    lifted, truth = [], []
    for _ in range(64):
        res = sfa_forward(s, [r.uniform(size=(4, 3)), r.uniform(size=(4, 3))])
        lifted.extend(float(codec.lift(int(v))) for v in res.active_view.received[1].ravel())
        truth.extend(s.secrets[-1]["plain"][1].ravel())
    corr = np.corrcoef(np.array(lifted) / float(codec.n), truth)[0, 1]
    # Fisher z test of zero correlation at the 1% level
    assert abs(math.atanh(corr)) * math.sqrt(len(truth) - 3) < 2.576


# --- splitnn ----------------------------------------------------------------


def test_splitnn_hand_concatenation():
    s = toy_session([np.eye(2), [[1.0]]], mode="splitnn")
    res = splitnn_forward(s, [np.array([[1.0, 2.0]]), np.array([[3.0]])])
    assert res.z.tolist() == [[1.0, 2.0, 3.0]]
    assert [m.kind for m in res.messages] == [MessageKind.PLAIN_ACTIVATION]


def test_splitnn_single_party_is_identity():
    s = toy_session([np.eye(3)], mode="splitnn")
    x = np.random.default_rng(7).normal(size=(2, 3))
    assert np.array_equal(splitnn_forward(s, [x]).z, x)


def test_splitnn_three_parties_vs_manual_concat():
    r = np.random.default_rng(8)
    s = toy_session([r.normal(size=(2, 3)), r.normal(size=(4, 2)), r.normal(size=(1, 2))], mode="splitnn")
    xs = [r.normal(size=(5, 3)), r.normal(size=(5, 2)), r.normal(size=(5, 2))]
    manual = np.hstack([x @ p.bottom.layers[0].weight.T for x, p in zip(xs, s.parties)])
    assert np.array_equal(splitnn_forward(s, xs).z, manual)


def test_splitnn_rejects_sfa_session():
    with pytest.raises(StateError):
        splitnn_forward(toy_session([[[1.0]], [[1.0]]]), [np.ones((1, 1))] * 2)


# --- backward ---------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
def test_backward_toy_hand_arithmetic(mode, keypair):
    s = toy_session([[[1.0]], [[4.0]]], he_mode=mode, keypair=keypair, w_mask=[[2.0]])
    enc_before = s.active.sfa.enc_weight_mask
    sfa_forward(s, [np.array([[3.0]]), np.array([[5.0]])])
    backward_route(s, np.array([[1.0]]), 0.1)
    assert s.active.bottom.layers[0].weight[0, 0] == pytest.approx(0.7, abs=1e-15)
    assert s.parties[1].bottom.layers[0].weight[0, 0] == pytest.approx(3.5, abs=1e-15)
    assert s.active.sfa.enc_weight_mask is enc_before


def test_zero_cut_gradient_leaves_weights():
    r = np.random.default_rng(9)
    s = rand_session(r, 2, 3, [2, 2], "mock", None)
    before = [p.bottom.layers[0].weight.copy() for p in s.parties]
    sfa_forward(s, [r.uniform(size=(4, 2))] * 2)
    backward_route(s, np.zeros((4, 3)), 0.5)
    for b, p in zip(before, s.parties):
        assert np.array_equal(b, p.bottom.layers[0].weight)


def test_effective_weight_step_matches_centralized_layer():
    r = np.random.default_rng(10)
    s = rand_session(r, 2, 3, [4, 2], "mock", None, keep_plain_mask=True)
    w_eff = s.active.bottom.layers[0].weight + s.parties[1].w_mask_plain
    central = Mlp([DenseLayer(np.hstack([w_eff, s.parties[1].bottom.layers[0].weight]))], ["identity"])
    xa, xp = r.uniform(size=(5, 4)), r.uniform(size=(5, 2))
    g = r.normal(size=(5, 3))
    sfa_forward(s, [xa, xp])
    backward_route(s, g, 0.1)
    _, cache = mlp_forward(central, np.hstack([xa, xp]))
    central = sgd_step(central, mlp_backward(central, cache, g)[1], 0.1)
    after = s.active.bottom.layers[0].weight + s.parties[1].w_mask_plain
    assert np.max(np.abs(after - central.layers[0].weight[:, :4])) <= 1e-12
    assert np.max(np.abs(s.parties[1].bottom.layers[0].weight - central.layers[0].weight[:, 4:])) <= 1e-12


def test_concat_backward_routes_column_blocks():
    s = toy_session([[[1.0], [1.0]], [[2.0]]], mode="splitnn")
    splitnn_forward(s, [np.array([[1.0]]), np.array([[1.0]])])
    grads = backward_route(s, np.array([[1.0, 2.0, 3.0]]), 0.0)
    assert grads[0][0].weight.tolist() == [[1.0], [2.0]]
    assert grads[1][0].weight.tolist() == [[3.0]]


def test_backward_without_forward_is_state_error():
    s = toy_session([[[1.0]], [[1.0]]])
    with pytest.raises(StateError):
        backward_route(s, np.ones((1, 1)), 0.1)


# --- transcript and wire format --------------------------------------------


def test_message_header_layout():
    msg = ProtocolMessage(3, 7, MessageKind.CUT_GRADIENT, b"xyz", 258)
    raw = msg.to_bytes()
    assert raw[0] == 6
    assert raw[1:3] == (3).to_bytes(2, "big") and raw[3:5] == (7).to_bytes(2, "big")
    assert raw[5:13] == (258).to_bytes(8, "big")
    assert raw[13:21] == (3).to_bytes(8, "big")
    assert raw[21:] == b"xyz"
    assert ProtocolMessage.from_bytes(raw) == (msg, len(raw))


def test_ring_payload_fixed_width(keypair):
    pk = keypair.public
    raw = pack_matrix(np.array([[1, pk.n - 1]], dtype=object), PayloadEncoding.RING, 2 * F, pk.ring_bytes)
    p = unpack_payload(raw)
    assert p.values.tolist() == [[1, pk.n - 1]]
    assert len(raw) == 15 + 2 * pk.ring_bytes


def test_transcript_roundtrips(tmp_path, keypair):
    r = np.random.default_rng(11)
    s = rand_session(r, 3, 2, [2, 2, 2], "paillier", keypair)
    sfa_forward(s, [r.uniform(size=(2, 2))] * 3)
    t = s.transcript
    assert Transcript.from_bytes(t.to_bytes()).to_bytes() == t.to_bytes()
    path = tmp_path / "t.jsonl"
    t.dump(path)
    assert len(path.read_text().splitlines()) == len(t)
    assert Transcript.load(path).to_bytes() == t.to_bytes()


def test_transcript_is_append_only_increasing():
    t = Transcript([ProtocolMessage(0, 1, MessageKind.CUT_GRADIENT, b"", 5)])
    with pytest.raises(StateError):
        t.append(ProtocolMessage(0, 1, MessageKind.CUT_GRADIENT, b"", 5))


def test_wrong_message_kind_is_state_error():
    s = toy_session([[[1.0]], [[1.0]]])
    s.network.send(0, 1, MessageKind.CUT_GRADIENT, b"")
    with pytest.raises(StateError):
        s.network.recv(1, MessageKind.ENC_MASK_SHARE, 0)


def _run(keypair, seed):
    r = np.random.default_rng(12)
    weights = [r.uniform(-1, 1, size=(3, 2)) for _ in range(3)]
    s = toy_session(weights, he_mode="paillier", keypair=keypair, seed=seed)
    for _ in range(3):
        sfa_forward(s, [r.uniform(size=(2, 2))] * 3)
        backward_route(s, r.normal(size=(2, 3)), 0.1)
    return s.transcript.to_bytes()


def test_replay_is_byte_identical(keypair):
    assert _run(keypair, 1) == _run(keypair, 1)
    assert _run(keypair, 1) != _run(keypair, 2)


# --- audit ------------------------------------------------------------------


def _compliant(keypair, n_parties=3):
    r = np.random.default_rng(13)
    sizes = [2] * n_parties
    s = rand_session(r, n_parties, 3, sizes, "paillier", keypair, keep_plain_mask=True, record_secrets=True)
    for _ in range(2):
        sfa_forward(s, [r.uniform(size=(2, 2))] * n_parties)
        backward_route(s, r.normal(size=(2, 3)), 0.1)
    return s


def test_compliant_run_passes_all_checks(keypair):
    s = _compliant(keypair)
    report = transcript_audit(s.transcript, "sfa", session_roles(s), audit_secrets(s))
    assert report.passed, report.summary()
    assert tuple(report.checks) == SFA_CHECKS
    assert report.skipped == []


def test_concat_run_audited_as_sfa_fails_on_plain_activation():
    s = toy_session([[[1.0]], [[1.0]]], mode="splitnn")
    splitnn_forward(s, [np.ones((1, 1))] * 2)
    report = transcript_audit(s.transcript, "sfa")
    assert not report.passed
    assert report.checks["no_plain_activation"] == [0]
    assert transcript_audit(s.transcript, CutLayerMode.CONCAT).passed


def test_sfa_run_audited_as_concat_fails():
    s = toy_session([[[1.0]], [[1.0]]])
    report = transcript_audit(s.transcript, CutLayerMode.CONCAT)
    assert report.checks["no_masking_state"] == [1]


def test_unmasked_activation_is_named_exactly(keypair):
    s = _compliant(keypair)
    secrets = audit_secrets(s)
    msgs = list(s.transcript)
    target = [m for m in msgs if m.kind is MessageKind.MASKED_ACTIVATION][2]
    plain = secrets["activation_seq"][target.sequence]
    forged = pack_matrix(plain, PayloadEncoding.RING, 2 * F, keypair.public.ring_bytes)
    mutated = Transcript(
        [ProtocolMessage(m.sender, m.receiver, m.kind, forged, m.sequence) if m is target else m for m in msgs]
    )
    report = transcript_audit(mutated, "sfa", session_roles(s), secrets)
    assert not report.passed
    assert report.offending == [target.sequence]
    assert report.checks["masks_applied"] == [target.sequence]


def test_injected_plain_activation_is_named_exactly(keypair):
    s = _compliant(keypair)
    msgs = list(s.transcript)
    seq = msgs[-1].sequence + 1
    leak = ProtocolMessage(2, 0, MessageKind.PLAIN_ACTIVATION, pack_matrix(np.ones((2, 3)), PayloadEncoding.FLOAT), seq)
    report = transcript_audit(Transcript(msgs + [leak]), "sfa", session_roles(s), audit_secrets(s))
    assert report.offending == [seq]
    assert report.checks["no_plain_activation"] == [seq]


def test_plaintext_weight_mask_in_payload_is_caught(keypair):
    s = _compliant(keypair)
    secrets = audit_secrets(s)
    codec = s.backend.codec
    msgs = list(s.transcript)
    seq = msgs[-1].sequence + 1
    body = pack_matrix(codec.encode_matrix(secrets["w_mask"]), PayloadEncoding.RING, F, keypair.public.ring_bytes)
    leak = ProtocolMessage(1, 2, MessageKind.PLAIN_MASK_SHARE, body, seq)
    report = transcript_audit(Transcript(msgs + [leak]), "sfa", session_roles(s), secrets)
    assert report.checks["weight_mask_never_plain"] == [seq]


def test_extra_ciphertext_to_lead_is_caught(keypair):
    s = _compliant(keypair)
    msgs = list(s.transcript)
    enc_w = next(m for m in msgs if m.kind is MessageKind.ENC_WEIGHT_MASK)
    seq = msgs[-1].sequence + 1
    # a ciphertext travelling to P_0 that is not [Mask_P]
    leak = ProtocolMessage(2, 1, MessageKind.ENC_WEIGHT_MASK, enc_w.payload, seq)
    report = transcript_audit(Transcript(msgs + [leak]), "sfa", session_roles(s))
    assert report.checks["only_mask_share_ciphertext_to_lead"] == [seq]


def test_audit_without_secrets_skips_value_checks(keypair):
    s = _compliant(keypair)
    report = transcript_audit(s.transcript, "sfa")
    assert report.passed
    assert "masks_applied" in report.skipped


def test_weight_mask_fixture_helper_roundtrip(keypair):
    s = toy_session([[[1.0, 0.0]], [[1.0]]], he_mode="paillier", keypair=keypair)
    set_weight_mask(s, [[0.25, -0.5]])
    ring = he.decrypt_matrix(keypair, s.active.sfa.enc_weight_mask)
    assert s.backend.codec.decode_matrix(ring).tolist() == [[0.25, -0.5]]
