"""Cut-layer protocols between VFL parties.

Two aggregation modes are supported:

* ``CONCAT`` (SplitNN): passive parties ship their bottom-model outputs in the
  clear and the active party concatenates them.
* ``SFA_SUM`` (secure forward aggregation): the active party holds an
  encrypted weight mask ``[W_mask]`` issued by the lead passive party ``P_0``.
  Every batch it derives ``[Mask] = [W_mask] X_a``, keeps a random share
  ``Mask_A`` and returns the rest to ``P_0``, which decrypts it and optionally
  re-shares it with the other passive parties. Each passive party adds its
  share to its output before sending, and all shares cancel in the sum::

      Z = Z_a + Mask_A + sum_i (Z_p_i + Mask_P_i) = (W_A + W_mask) X_a + sum_i W_P_i X_p_i

In Paillier mode all cut-layer arithmetic is done in ``Z_n`` at the product
scale ``2F``; only the final aggregate is decoded. Mock mode keeps the exact
same message flow but uses plaintext float64 values for "ciphertexts" and
masks, so that SFA can be compared bit-for-bit against a centralized model.

Parties live in one process and talk through :class:`Network`, which delivers
messages FIFO per receiver and records every message in a :class:`Transcript`.
"""

from __future__ import annotations

import enum
import json
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import he
from .numeric import ForwardCache, Mlp, ShapeError, StateError, as_matrix, mlp_backward, mlp_forward, sgd_step
from .seeding import np_rng, py_rng

logger = logging.getLogger(__name__)


class PartyRole(enum.Enum):
    ACTIVE = "active"
    PASSIVE_LEAD = "passive_lead"
    PASSIVE = "passive"


class CutLayerMode(enum.Enum):
    CONCAT = "concat"
    SFA_SUM = "sfa"

    @classmethod
    def parse(cls, value) -> "CutLayerMode":
        if isinstance(value, cls):
            return value
        aliases = {"splitnn": cls.CONCAT, "concat": cls.CONCAT, "sfa": cls.SFA_SUM, "sfasum": cls.SFA_SUM}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown protocol {value!r}; expected splitnn or sfa") from None


class MessageKind(enum.IntEnum):
    ENC_WEIGHT_MASK = 1
    ENC_MASK_SHARE = 2
    PLAIN_MASK_SHARE = 3
    MASKED_ACTIVATION = 4
    PLAIN_ACTIVATION = 5
    CUT_GRADIENT = 6
    CONTROL_SYNC = 7


class PayloadEncoding(enum.IntEnum):
    FLOAT = 0
    RING = 1
    CIPHER = 2
    MOCK_CIPHER = 3
    PUBLIC_KEY = 4


# encoding u8, scale u16, rows u32, cols u32, element width u32
_PAYLOAD_HEADER = struct.Struct(">BHIII")
# kind u8, sender u16, receiver u16, sequence u64, payload length u64
_MESSAGE_HEADER = struct.Struct(">BHHQQ")


def pack_matrix(values, encoding: PayloadEncoding, scale: int = 0, width: int = 0) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ShapeError("payload matrices must be 2-D")
    rows, cols = arr.shape
    if encoding in (PayloadEncoding.FLOAT, PayloadEncoding.MOCK_CIPHER):
        body = np.ascontiguousarray(arr, dtype=">f8").tobytes()
        width = 8
    else:
        body = b"".join(int(v).to_bytes(width, "big") for v in arr.ravel())
    return _PAYLOAD_HEADER.pack(int(encoding), scale, rows, cols, width) + body


@dataclass(frozen=True)
class Payload:
    encoding: PayloadEncoding
    scale: int
    values: np.ndarray


def unpack_payload(data: bytes) -> Payload:
    enc, scale, rows, cols, width = _PAYLOAD_HEADER.unpack_from(data)
    body = data[_PAYLOAD_HEADER.size :]
    enc = PayloadEncoding(enc)
    if len(body) != rows * cols * width:
        raise ValueError("truncated payload")
    if enc in (PayloadEncoding.FLOAT, PayloadEncoding.MOCK_CIPHER):
        values = np.frombuffer(body, dtype=">f8").astype(np.float64).reshape(rows, cols)
    else:
        values = np.empty((rows, cols), dtype=object)
        for k in range(rows * cols):
            values[k // cols, k % cols] = int.from_bytes(body[k * width : (k + 1) * width], "big")
    return Payload(enc, scale, values)


@dataclass(frozen=True)
class ProtocolMessage:
    sender: int
    receiver: int
    kind: MessageKind
    payload: bytes
    sequence: int

    def to_bytes(self) -> bytes:
        header = _MESSAGE_HEADER.pack(
            int(self.kind), self.sender, self.receiver, self.sequence, len(self.payload)
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["ProtocolMessage", int]:
        kind, sender, receiver, seq, length = _MESSAGE_HEADER.unpack_from(data, offset)
        start = offset + _MESSAGE_HEADER.size
        payload = bytes(data[start : start + length])
        return cls(sender, receiver, MessageKind(kind), payload, seq), start + length

    def decoded(self) -> Payload:
        return unpack_payload(self.payload)


class Transcript:
    """Append-only record of every message that crossed the wire."""

    def __init__(self, messages=()):
        self._messages = list(messages)

    def append(self, msg: ProtocolMessage) -> None:
        if self._messages and msg.sequence <= self._messages[-1].sequence:
            raise StateError("transcript sequence numbers must increase")
        self._messages.append(msg)

    def __iter__(self):
        return iter(self._messages)

    def __len__(self) -> int:
        return len(self._messages)

    def __getitem__(self, idx):
        return self._messages[idx]

    def to_bytes(self) -> bytes:
        return b"".join(m.to_bytes() for m in self._messages)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transcript":
        out, offset = [], 0
        while offset < len(data):
            msg, offset = ProtocolMessage.from_bytes(data, offset)
            out.append(msg)
        return cls(out)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for m in self._messages:
                record = {
                    "seq": m.sequence,
                    "kind": m.kind.name,
                    "sender": m.sender,
                    "receiver": m.receiver,
                    "payload": m.payload.hex(),
                }
                fh.write(json.dumps(record) + "\n")

    @classmethod
    def load(cls, path) -> "Transcript":
        out = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                out.append(
                    ProtocolMessage(
                        r["sender"], r["receiver"], MessageKind[r["kind"]],
                        bytes.fromhex(r["payload"]), r["seq"],
                    )
                )
        return cls(out)


class Network:
    """In-process transport: one FIFO mailbox per receiver, global sequence."""

    def __init__(self, capture: bool = True):
        self.transcript = Transcript()
        self.capture = capture
        self._mailboxes: dict = {}
        self._seq = 0

    def send(self, sender: int, receiver: int, kind: MessageKind, payload: bytes) -> ProtocolMessage:
        msg = ProtocolMessage(sender, receiver, kind, payload, self._seq)
        self._seq += 1
        if self.capture:
            self.transcript.append(msg)
        self._mailboxes.setdefault(receiver, []).append(msg)
        return msg

    def recv(self, receiver: int, kind: MessageKind, sender: Optional[int] = None) -> ProtocolMessage:
        box = self._mailboxes.get(receiver)
        if not box:
            raise StateError(f"party {receiver} expected {kind.name} but mailbox is empty")
        msg = box.pop(0)
        if msg.kind != kind or (sender is not None and msg.sender != sender):
            raise StateError(
                f"party {receiver} expected {kind.name} from {sender}, got "
                f"{msg.kind.name} from {msg.sender} (seq {msg.sequence})"
            )
        return msg

    def pending(self) -> int:
        return sum(len(b) for b in self._mailboxes.values())


@dataclass
class SfaState:
    enc_weight_mask: object
    mask_a: object = None


@dataclass
class PartyState:
    party_id: int
    role: PartyRole
    bottom: Mlp
    columns: tuple
    top: Optional[Mlp] = None
    keypair: Optional[he.PaillierKeypair] = None
    public_key: Optional[he.PaillierPublicKey] = None
    ring_rng: random.Random = field(default_factory=random.SystemRandom, repr=False)
    sfa: Optional[SfaState] = None
    w_mask_plain: Optional[np.ndarray] = field(default=None, repr=False)
    pending: Optional[ForwardCache] = field(default=None, repr=False)

    @property
    def in_features(self) -> int:
        return self.bottom.in_features


class MockBackend:
    """Plaintext float64 stand-in for Paillier with the same call surface."""

    name = "mock"
    cipher_encoding = PayloadEncoding.MOCK_CIPHER
    ring_encoding = PayloadEncoding.FLOAT

    def __init__(self, fraction_bits: int = he.DEFAULT_FRACTION_BITS, mask_scale: float = 1.0):
        self.fraction_bits = fraction_bits
        self.mask_scale = mask_scale
        self.modulus = None
        self.codec = None

    def setup(self, public_key) -> None:
        pass

    def sync_payload(self, public_key) -> bytes:
        return pack_matrix(np.zeros((1, 1), dtype=object), PayloadEncoding.PUBLIC_KEY, self.fraction_bits, 1)

    def encrypt_weight_mask(self, pk, w, rng):
        return np.array(w, dtype=np.float64)

    def pack_cipher(self, enc) -> bytes:
        return pack_matrix(enc, PayloadEncoding.MOCK_CIPHER)

    def unpack_cipher(self, payload: Payload, pk):
        return payload.values

    def enc_matmul(self, enc, x):
        return as_matrix(x) @ enc.T

    def random_ring(self, shape, rng):
        s = self.mask_scale
        return np.array([[rng.uniform(-s, s) for _ in range(shape[1])] for _ in range(shape[0])]).reshape(shape)

    def zeros(self, shape):
        return np.zeros(shape)

    def enc_sub_plain(self, enc, mask, pk, rng):
        return enc - mask

    def decrypt(self, keypair, enc):
        return np.array(enc, dtype=np.float64)

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def encode_activation(self, z):
        return np.array(z, dtype=np.float64)

    def decode_aggregate(self, r):
        return np.array(r, dtype=np.float64)

    def pack_ring(self, r) -> bytes:
        return pack_matrix(r, PayloadEncoding.FLOAT)

    def unpack_ring(self, payload: Payload):
        return payload.values


class PaillierBackend:
    """Ring arithmetic in Z_n with a real Paillier-encrypted weight mask."""

    name = "paillier"
    cipher_encoding = PayloadEncoding.CIPHER
    ring_encoding = PayloadEncoding.RING

    def __init__(self, fraction_bits: int = he.DEFAULT_FRACTION_BITS):
        self.fraction_bits = fraction_bits
        self.codec: Optional[he.FixedPointCodec] = None

    @property
    def modulus(self) -> int:
        return self.codec.n

    @property
    def product_scale(self) -> int:
        return 2 * self.fraction_bits

    def setup(self, public_key: he.PaillierPublicKey) -> None:
        self.public_key = public_key
        self.codec = he.FixedPointCodec(public_key.n, self.fraction_bits)

    def sync_payload(self, public_key) -> bytes:
        return pack_matrix(
            np.array([[public_key.n]], dtype=object), PayloadEncoding.PUBLIC_KEY,
            self.fraction_bits, public_key.ring_bytes,
        )

    def encrypt_weight_mask(self, pk, w, rng):
        return he.encrypt_matrix(pk, self.codec.encode_matrix(w), self.fraction_bits, rng)

    def pack_cipher(self, enc: he.EncryptedMatrix) -> bytes:
        return pack_matrix(enc.values, PayloadEncoding.CIPHER, enc.scale_exp, enc.public_key.cipher_bytes)

    def unpack_cipher(self, payload: Payload, pk):
        return he.EncryptedMatrix(payload.values, payload.scale, pk)

    def enc_matmul(self, enc, x):
        return he.enc_matmul(enc, x, self.codec)

    def random_ring(self, shape, rng):
        n = self.modulus
        out = np.empty(shape, dtype=object)
        for idx in np.ndindex(*shape):
            out[idx] = rng.randrange(n)
        return out

    def zeros(self, shape):
        out = np.empty(shape, dtype=object)
        out.fill(0)
        return out

    def enc_sub_plain(self, enc, mask, pk, rng):
        # fresh encryption of -mask also re-randomises [Mask] before it leaves A
        neg = (-mask) % self.modulus
        return he.enc_add(enc, he.encrypt_matrix(pk, neg, enc.scale_exp, rng))

    def decrypt(self, keypair, enc):
        return he.decrypt_matrix(keypair, enc)

    def add(self, a, b):
        return (a + b) % self.modulus

    def sub(self, a, b):
        return (a - b) % self.modulus

    def encode_activation(self, z):
        return self.codec.encode_matrix(z, self.product_scale)

    def decode_aggregate(self, r):
        limit = self.modulus // 4
        for v in r.ravel():
            if abs(self.codec.lift(v)) > limit:
                raise he.CodecError("aggregate outside the decodable range; masks did not cancel")
        return self.codec.decode_matrix(r, self.product_scale)

    def pack_ring(self, r) -> bytes:
        return pack_matrix(r, PayloadEncoding.RING, self.product_scale, self.public_key.ring_bytes)

    def unpack_ring(self, payload: Payload):
        return payload.values


def make_backend(he_mode: str, fraction_bits: int = he.DEFAULT_FRACTION_BITS, mask_scale: float = 1.0):
    if he_mode == "mock":
        return MockBackend(fraction_bits, mask_scale)
    if he_mode == "paillier":
        return PaillierBackend(fraction_bits)
    raise ValueError(f"unknown he mode {he_mode!r}; expected paillier or mock")


@dataclass
class ActiveView:
    """Everything the active party observed during one SFA forward pass."""

    mask_a: object
    received: dict


@dataclass
class ForwardResult:
    z: np.ndarray
    messages: list
    active_view: Optional[ActiveView] = None


class Session:
    """Parties plus transport for one protocol run.

    ``parties[0]`` is the active party; in SFA mode ``parties[1]`` is the lead
    passive party ``P_0``. Flags marked test-only expose secrets that a real
    deployment would never keep.
    """

    def __init__(
        self,
        parties,
        mode,
        he_mode: str = "mock",
        seed: int = 0,
        fraction_bits: int = he.DEFAULT_FRACTION_BITS,
        mask_scale: float = 1.0,
        deterministic: bool = True,
        capture: bool = True,
        keep_plain_mask: bool = False,
        record_secrets: bool = False,
    ):
        self.parties = list(parties)
        self.mode = CutLayerMode.parse(mode)
        self.he_mode = he_mode
        self.seed = seed
        self.backend = make_backend(he_mode, fraction_bits, mask_scale)
        self.network = Network(capture=capture)
        self.deterministic = deterministic
        self.keep_plain_mask = keep_plain_mask  # test-only
        self.record_secrets = record_secrets  # test-only
        self.zero_masks = False  # test hook
        self.zero_weight_mask = False  # test hook
        self.secrets: list = []
        self.initialized = False
        self._warned_deep_active = False
        _validate_roles(self.parties, self.mode)

    @property
    def transcript(self) -> Transcript:
        return self.network.transcript

    @property
    def active(self) -> PartyState:
        return self.parties[0]

    @property
    def passives(self) -> list:
        return self.parties[1:]

    def rng_for(self, party_id: int, purpose: str) -> random.Random:
        if self.deterministic:
            return py_rng(self.seed, "party", party_id, purpose)
        return random.SystemRandom()


def _validate_roles(parties, mode: CutLayerMode) -> None:
    if not parties:
        raise StateError("a session needs at least one party")
    roles = [p.role for p in parties]
    if roles[0] is not PartyRole.ACTIVE or roles.count(PartyRole.ACTIVE) != 1:
        raise StateError("exactly one active party is required, listed first")
    if mode is CutLayerMode.SFA_SUM and len(parties) > 1:
        if roles[1] is not PartyRole.PASSIVE_LEAD or roles.count(PartyRole.PASSIVE_LEAD) != 1:
            raise StateError("SFA needs exactly one lead passive party, listed second")


def assign_keypair(session: Session, bits: int = he.DEFAULT_KEY_BITS) -> he.PaillierKeypair:
    """Generate P_0's Paillier keypair (deterministically in deterministic mode)."""
    lead = session.parties[1]
    rng = session.rng_for(lead.party_id, "keygen")
    lead.keypair = he.keygen(bits, rng)
    lead.public_key = lead.keypair.public
    return lead.keypair


def weight_mask_bound(in_features: int) -> float:
    return 2.0 / np.sqrt(in_features)


def sample_weight_mask(seed: int, party_id: int, out_width: int, in_features: int) -> np.ndarray:
    b = weight_mask_bound(in_features)
    return np_rng(seed, "party", party_id, "w_mask").uniform(-b, b, size=(out_width, in_features))


def sfa_init(session: Session, out_width: Optional[int] = None, in_features_a: Optional[int] = None) -> list:
    """Key sync and [W_mask] hand-off from P_0 to the active party."""
    if session.mode is not CutLayerMode.SFA_SUM:
        raise StateError("sfa_init requires SFA mode")
    if len(session.parties) < 2:
        raise StateError("SFA needs at least one passive party")
    active, lead = session.active, session.parties[1]
    backend, net = session.backend, session.network
    if backend.name == "paillier" and lead.keypair is None:
        raise StateError("lead passive party holds no keypair")
    last = active.bottom.layers[-1]
    out_width = out_width or last.out_features
    in_features_a = in_features_a or last.in_features
    if (out_width, in_features_a) != last.weight.shape:
        raise ShapeError("weight mask shape must match the active cut projection")
    if len(active.bottom) > 1 and not session._warned_deep_active:
        logger.warning(
            "active bottom depth %d under SFA: gradients below the cut use W_A only",
            len(active.bottom),
        )
        session._warned_deep_active = True

    start = len(net.transcript)
    pk = lead.public_key
    backend.setup(pk)
    msg = net.send(lead.party_id, active.party_id, MessageKind.CONTROL_SYNC, backend.sync_payload(pk))
    sync = unpack_payload(net.recv(active.party_id, MessageKind.CONTROL_SYNC, lead.party_id).payload)
    if backend.name == "paillier":
        active.public_key = he.PaillierPublicKey(int(sync.values[0, 0]))
        for p in session.passives:
            p.public_key = active.public_key

    if session.zero_weight_mask:
        w_mask = np.zeros((out_width, in_features_a))
    else:
        w_mask = sample_weight_mask(session.seed, lead.party_id, out_width, in_features_a)
    enc_w = backend.encrypt_weight_mask(pk, w_mask, session.rng_for(lead.party_id, "encrypt"))
    net.send(lead.party_id, active.party_id, MessageKind.ENC_WEIGHT_MASK, backend.pack_cipher(enc_w))
    if session.keep_plain_mask:
        lead.w_mask_plain = w_mask
    del w_mask

    received = net.recv(active.party_id, MessageKind.ENC_WEIGHT_MASK, lead.party_id)
    active.sfa = SfaState(backend.unpack_cipher(unpack_payload(received.payload), active.public_key))
    session.initialized = True
    return list(net.transcript)[start:] if net.capture else [msg]


def mask_share_split(mask_p, n_extra: int, rng: random.Random, modulus: Optional[int] = None, scale: float = 1.0):
    """Split ``mask_p`` into ``Mask_P0`` plus ``n_extra`` uniform shares.

    With a modulus the shares are uniform over ``Z_modulus`` and the split is
    exact modular arithmetic; without one they are uniform floats in
    ``(-scale, scale)``.
    """
    if n_extra < 0:
        raise ValueError("n_extra must be non-negative")
    shape = np.shape(mask_p)
    shares = []
    rest = mask_p
    for _ in range(n_extra):
        if modulus is not None:
            share = np.empty(shape, dtype=object)
            for idx in np.ndindex(*shape):
                share[idx] = rng.randrange(modulus)
            rest = (rest - share) % modulus
        else:
            share = np.array([rng.uniform(-scale, scale) for _ in range(int(np.prod(shape)))]).reshape(shape)
            rest = rest - share
        shares.append(share)
    return rest, shares


def _check_slices(session: Session, slices) -> None:
    if len(slices) != len(session.parties):
        raise ShapeError(f"{len(slices)} batch slices for {len(session.parties)} parties")
    rows = {np.shape(s)[0] for s in slices}
    if len(rows) != 1:
        raise ShapeError(f"batch slices disagree on row count: {sorted(rows)}")


def _bottom(party: PartyState, x, train: bool):
    z, cache = mlp_forward(party.bottom, x)
    party.pending = cache if train else None
    return z, cache


def sfa_forward(session: Session, slices, train: bool = True) -> ForwardResult:
    """One secure forward aggregation; returns the decoded cut output at A."""
    if session.mode is not CutLayerMode.SFA_SUM or not session.initialized:
        raise StateError("sfa_forward requires an initialised SFA session")
    _check_slices(session, slices)
    backend, net = session.backend, session.network
    active, lead = session.active, session.parties[1]
    passives = session.passives
    first = len(net.transcript)

    # active party: plaintext projection and encrypted mask
    z_a, cache_a = _bottom(active, slices[0], train)
    h_a = cache_a.inputs[-1]
    enc_mask = backend.enc_matmul(active.sfa.enc_weight_mask, h_a)
    shape = z_a.shape
    if session.zero_masks:
        mask_a = backend.zeros(shape)
    else:
        mask_a = backend.random_ring(shape, active.ring_rng)
    active.sfa.mask_a = mask_a
    enc_mask_p = backend.enc_sub_plain(enc_mask, mask_a, active.public_key, active.ring_rng)
    net.send(active.party_id, lead.party_id, MessageKind.ENC_MASK_SHARE, backend.pack_cipher(enc_mask_p))

    # lead passive party: decrypt and re-share
    msg = net.recv(lead.party_id, MessageKind.ENC_MASK_SHARE, active.party_id)
    mask_p = backend.decrypt(lead.keypair, backend.unpack_cipher(unpack_payload(msg.payload), lead.public_key))
    n_extra = len(passives) - 1
    if session.zero_masks:
        own, extra = mask_p, [backend.zeros(shape) for _ in range(n_extra)]
    else:
        own, extra = mask_share_split(
            mask_p, n_extra, lead.ring_rng, backend.modulus, getattr(backend, "mask_scale", 1.0)
        )
    shares = {lead.party_id: own}
    for p, share in zip(passives[1:], extra):
        net.send(lead.party_id, p.party_id, MessageKind.PLAIN_MASK_SHARE, backend.pack_ring(share))

    # every passive party masks its output
    plain, activation_seq = {}, {}
    for p in passives:
        z_p, _ = _bottom(p, slices[p.party_id], train)
        if p is not lead:
            m = net.recv(p.party_id, MessageKind.PLAIN_MASK_SHARE, lead.party_id)
            shares[p.party_id] = backend.unpack_ring(unpack_payload(m.payload))
        encoded = backend.encode_activation(z_p)
        masked = backend.add(encoded, shares[p.party_id])
        sent = net.send(p.party_id, active.party_id, MessageKind.MASKED_ACTIVATION, backend.pack_ring(masked))
        plain[p.party_id] = z_p
        activation_seq[sent.sequence] = encoded

    # active party aggregates
    total = backend.add(backend.encode_activation(z_a), mask_a)
    received = {}
    for p in passives:
        m = net.recv(active.party_id, MessageKind.MASKED_ACTIVATION, p.party_id)
        r = backend.unpack_ring(unpack_payload(m.payload))
        received[p.party_id] = r
        total = backend.add(total, r)
    z = backend.decode_aggregate(total)

    if session.record_secrets:
        session.secrets.append(
            {
                "mask_a": mask_a,
                "shares": shares,
                "plain": plain,
                "h_a": h_a,
                "z_a": z_a,
                "activation_seq": activation_seq,
            }
        )
    messages = list(net.transcript[first:]) if net.capture else []
    return ForwardResult(z, messages, ActiveView(mask_a, received))


def splitnn_forward(session: Session, slices, train: bool = True) -> ForwardResult:
    """SplitNN cut layer: concatenate bottom outputs in party-id order."""
    if session.mode is not CutLayerMode.CONCAT:
        raise StateError("splitnn_forward requires concat mode")
    _check_slices(session, slices)
    net = session.network
    first = len(net.transcript)
    active = session.active
    outputs = [_bottom(active, slices[0], train)[0]]
    for p in session.passives:
        z_p, _ = _bottom(p, slices[p.party_id], train)
        net.send(p.party_id, active.party_id, MessageKind.PLAIN_ACTIVATION, pack_matrix(z_p, PayloadEncoding.FLOAT))
        if session.record_secrets:
            session.secrets.append({"plain": {p.party_id: z_p}})
    for p in session.passives:
        m = net.recv(active.party_id, MessageKind.PLAIN_ACTIVATION, p.party_id)
        outputs.append(unpack_payload(m.payload).values)
    messages = list(net.transcript[first:]) if net.capture else []
    return ForwardResult(np.hstack(outputs), messages)


def cut_forward(session: Session, slices, train: bool = True) -> ForwardResult:
    if session.mode is CutLayerMode.SFA_SUM:
        return sfa_forward(session, slices, train)
    return splitnn_forward(session, slices, train)


def backward_route(session: Session, grad_cut, learning_rate: float) -> dict:
    """Deliver the cut-layer gradient and apply SGD to every bottom model.

    In SFA mode every party receives the full gradient (the cut is a sum); in
    concat mode each party receives its own column block. Only plaintext
    weights move: ``[W_mask]`` is never touched. Returns per-party layer
    gradients keyed by party id.
    """
    grad_cut = as_matrix(grad_cut)
    net = session.network
    if any(p.pending is None for p in session.parties):
        raise StateError("backward_route called without a pending forward pass")
    widths = [p.bottom.out_features for p in session.parties]
    if session.mode is CutLayerMode.SFA_SUM:
        if grad_cut.shape[1] != widths[0]:
            raise ShapeError(f"cut gradient has {grad_cut.shape[1]} columns, expected {widths[0]}")
        blocks = [grad_cut] * len(session.parties)
    else:
        if grad_cut.shape[1] != sum(widths):
            raise ShapeError(f"cut gradient has {grad_cut.shape[1]} columns, expected {sum(widths)}")
        edges = np.cumsum([0] + widths)
        blocks = [grad_cut[:, edges[k] : edges[k + 1]] for k in range(len(widths))]

    active = session.active
    for p, block in zip(session.passives, blocks[1:]):
        net.send(active.party_id, p.party_id, MessageKind.CUT_GRADIENT, pack_matrix(block, PayloadEncoding.FLOAT))

    grads = {}
    for p, block in zip(session.parties, blocks):
        if p is not active:
            block = unpack_payload(net.recv(p.party_id, MessageKind.CUT_GRADIENT, active.party_id).payload).values
        _, layer_grads = mlp_backward(p.bottom, p.pending, block)
        p.bottom = sgd_step(p.bottom, layer_grads, learning_rate)
        p.pending = None
        grads[p.party_id] = layer_grads
    return grads


@dataclass
class AuditReport:
    mode: CutLayerMode
    checks: dict
    skipped: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(not offenders for offenders in self.checks.values())

    @property
    def offending(self) -> list:
        return sorted({s for v in self.checks.values() for s in v})

    def summary(self) -> str:
        lines = []
        for name, offenders in self.checks.items():
            status = "pass" if not offenders else "FAIL " + ",".join(map(str, offenders))
            lines.append(f"{name}: {status}")
        for name in self.skipped:
            lines.append(f"{name}: skipped")
        return "\n".join(lines)


class AuditFailure(AssertionError):
    def __init__(self, report: AuditReport):
        super().__init__(report.summary())
        self.report = report


SFA_CHECKS = (
    "no_plain_activation",
    "passive_outputs_masked",
    "only_mask_share_ciphertext_to_lead",
    "weight_mask_never_plain",
    "masks_applied",
)


def transcript_audit(
    transcript, mode, roles: Optional[dict] = None, secrets: Optional[dict] = None
) -> AuditReport:
    """Structural security audit of a transcript.

    ``roles`` maps party id to :class:`PartyRole` (defaults: 0 active, 1 lead,
    others passive). ``secrets`` is optional test-only knowledge with keys
    ``w_mask`` (plaintext weight mask), ``fraction_bits`` and
    ``activation_seq`` (sequence number -> unmasked encoded activation); the
    last two checks need it and are reported as skipped otherwise.
    """
    mode = CutLayerMode.parse(mode)
    msgs = list(transcript)
    if roles is None:
        ids = {m.sender for m in msgs} | {m.receiver for m in msgs}
        roles = {i: PartyRole.ACTIVE if i == 0 else PartyRole.PASSIVE_LEAD if i == 1 else PartyRole.PASSIVE for i in ids}
    active_ids = {i for i, r in roles.items() if r is PartyRole.ACTIVE}
    lead_ids = {i for i, r in roles.items() if r is PartyRole.PASSIVE_LEAD}

    if mode is CutLayerMode.CONCAT:
        masking = {MessageKind.ENC_WEIGHT_MASK, MessageKind.ENC_MASK_SHARE, MessageKind.PLAIN_MASK_SHARE, MessageKind.MASKED_ACTIVATION}
        return AuditReport(mode, {"no_masking_state": [m.sequence for m in msgs if m.kind in masking]})

    checks = {name: [] for name in SFA_CHECKS}
    skipped = []
    decoded = {m.sequence: unpack_payload(m.payload) for m in msgs}

    checks["no_plain_activation"] = [m.sequence for m in msgs if m.kind is MessageKind.PLAIN_ACTIVATION]

    allowed_to_active = {MessageKind.MASKED_ACTIVATION, MessageKind.ENC_WEIGHT_MASK, MessageKind.CONTROL_SYNC}
    for m in msgs:
        if m.sender in active_ids or m.receiver not in active_ids:
            continue
        p = decoded[m.sequence]
        if m.kind not in allowed_to_active:
            checks["passive_outputs_masked"].append(m.sequence)
        elif m.kind is MessageKind.MASKED_ACTIVATION and p.encoding is not PayloadEncoding.RING:
            checks["passive_outputs_masked"].append(m.sequence)

    for m in msgs:
        p = decoded[m.sequence]
        carries_cipher = p.encoding in (PayloadEncoding.CIPHER, PayloadEncoding.MOCK_CIPHER)
        if m.receiver in lead_ids and (carries_cipher or m.kind is MessageKind.ENC_MASK_SHARE):
            ok = m.kind is MessageKind.ENC_MASK_SHARE and m.sender in active_ids and p.encoding is PayloadEncoding.CIPHER
            if not ok:
                checks["only_mask_share_ciphertext_to_lead"].append(m.sequence)
        if m.kind is MessageKind.ENC_WEIGHT_MASK and p.encoding is not PayloadEncoding.CIPHER:
            checks["weight_mask_never_plain"].append(m.sequence)

    if secrets and secrets.get("w_mask") is not None:
        w = np.asarray(secrets["w_mask"], dtype=np.float64)
        fb = secrets.get("fraction_bits", he.DEFAULT_FRACTION_BITS)
        plain_floats = {float(v) for v in w.ravel() if v != 0.0}
        plain_ints = {int(round(v * (1 << fb))) for v in plain_floats}
        for m in msgs:
            p = decoded[m.sequence]
            if p.encoding in (PayloadEncoding.FLOAT, PayloadEncoding.MOCK_CIPHER):
                hit = any(float(v) in plain_floats for v in p.values.ravel())
            elif p.encoding is PayloadEncoding.RING:
                hit = any(int(v) in plain_ints for v in p.values.ravel())
            else:
                hit = False
            if hit and m.sequence not in checks["weight_mask_never_plain"]:
                checks["weight_mask_never_plain"].append(m.sequence)
    else:
        skipped.append("weight_mask_never_plain (value scan)")

    if secrets and secrets.get("activation_seq"):
        ref = secrets["activation_seq"]
        for m in msgs:
            if m.kind is not MessageKind.MASKED_ACTIVATION or m.sequence not in ref:
                continue
            sent = decoded[m.sequence].values
            expected = np.asarray(ref[m.sequence])
            if sent.shape != expected.shape or any(
                _same(a, b) for a, b in zip(sent.ravel(), expected.ravel())
            ):
                checks["masks_applied"].append(m.sequence)
    else:
        checks.pop("masks_applied")
        skipped.append("masks_applied")
    return AuditReport(mode, checks, skipped)


def _same(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        return float(a) == float(b)
    return int(a) == int(b)


def audit_secrets(session: Session) -> dict:
    """Collect the test-only knowledge ``transcript_audit`` can use."""
    lead = session.parties[1] if len(session.parties) > 1 else None
    activation_seq = {}
    for rec in session.secrets:
        activation_seq.update(rec.get("activation_seq", {}))
    return {
        "w_mask": None if lead is None else lead.w_mask_plain,
        "fraction_bits": session.backend.fraction_bits,
        "activation_seq": activation_seq,
    }


def session_roles(session: Session) -> dict:
    return {p.party_id: p.role for p in session.parties}
