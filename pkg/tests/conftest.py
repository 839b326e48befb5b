import os
import random
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sfavfl import he  # noqa: E402
from sfavfl.numeric import DenseLayer, Mlp  # noqa: E402
from sfavfl.protocol import PartyRole, PartyState, Session, sfa_init  # noqa: E402
from sfavfl.seeding import py_rng  # noqa: E402


@pytest.fixture(scope="session")
def keypair():
    return he.keygen(he.TEST_KEY_BITS, random.Random(2024))


def linear_party(pid, weight, columns=(0, 0), seed=0):
    role = PartyRole.ACTIVE if pid == 0 else PartyRole.PASSIVE_LEAD if pid == 1 else PartyRole.PASSIVE
    bottom = Mlp([DenseLayer(np.atleast_2d(np.asarray(weight, dtype=float)))], ["identity"])
    return PartyState(pid, role, bottom, columns, ring_rng=py_rng(seed, "party", pid, "ring"))


def toy_session(weights, mode="sfa", he_mode="mock", keypair=None, w_mask=None, seed=0, **kw):
    """Session of single-layer linear bottoms with hand-picked weights.

    ``w_mask`` replaces the sampled weight mask after initialisation.
    """
    parties = [linear_party(k, w, seed=seed) for k, w in enumerate(weights)]
    kw.setdefault("capture", True)
    session = Session(parties, mode, he_mode=he_mode, seed=seed, **kw)
    if session.mode.value == "sfa":
        if he_mode == "paillier":
            parties[1].keypair = keypair
            parties[1].public_key = keypair.public
        sfa_init(session)
        if w_mask is not None:
            set_weight_mask(session, w_mask)
    return session


def set_weight_mask(session, w_mask):
    w_mask = np.atleast_2d(np.asarray(w_mask, dtype=float))
    lead = session.parties[1]
    backend = session.backend
    enc = backend.encrypt_weight_mask(lead.public_key, w_mask, random.Random(0))
    session.active.sfa.enc_weight_mask = enc
    lead.w_mask_plain = w_mask


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
