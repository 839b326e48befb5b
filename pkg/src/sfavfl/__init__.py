"""Vertical federated learning with a secure-forward-aggregation cut layer.

Modules:

- ``numeric``: dense layers, MLP forward/backward, losses and SGD.
- ``he``: Paillier encryption and fixed-point encoding.
- ``protocol``: party messages, SplitNN and SFA cut-layer forward/backward,
  transcripts and transcript audits.
- ``training``: VFL and centralized training loops, equivalence checks.
- ``attack``: generative-regression feature reconstruction and sweeps.
- ``data``, ``config``, ``plotting``, ``cli``: datasets, run configuration,
  figures and the ``sfavfl`` command.
"""

__version__ = "0.1.0"
