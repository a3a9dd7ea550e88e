"""Simulated signatures.

The simulator does not need real public-key cryptography: it needs the
*unforgeability* property, i.e. no party can produce a signature that
verifies for a replica whose secret it does not hold.  The default scheme
here is a keyed digest (tag = sha256(secret || message)).  Inside the
simulator this is structurally unforgeable because adversary code is never
handed a correct replica's secret.

A real scheme (ed25519, BLS, ...) can be swapped in by implementing the
same sign/verify interface.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

ReplicaId = int

_TAG_LEN = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Signature:
    signer: ReplicaId
    payload_digest: bytes
    tag: bytes


@dataclass(frozen=True)
class KeyPair:
    replica: ReplicaId
    secret: bytes
    public: bytes  # commitment to the secret; identifies the key, cannot sign


class Keystore:
    """All key pairs for one run, generated deterministically from a seed.

    Correct replica code signs through its own KeyPair; adversary scripts are
    only given the key pairs of replicas in the byzantine set.  Verification
    is done against the public registry.
    """

    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self._pairs = []
        for i in range(n):
            secret = digest(b"key:%d:%d" % (seed, i))
            self._pairs.append(KeyPair(replica=i, secret=secret, public=digest(secret)))

    def keypair(self, replica: ReplicaId) -> KeyPair:
        return self._pairs[replica]

    def public(self, replica: ReplicaId) -> bytes:
        return self._pairs[replica].public

    def sign(self, key: KeyPair, message: bytes) -> Signature:
        tag = digest(key.secret + message)
        return Signature(signer=key.replica, payload_digest=digest(message), tag=tag)

    def verify(self, replica: ReplicaId, message: bytes, sig: Signature) -> bool:
        """True iff `sig` was produced over `message` with `replica`'s key."""
        if sig.signer != replica or not 0 <= replica < self.n:
            return False
        if len(sig.tag) != _TAG_LEN:
            return False
        secret = self._pairs[replica].secret
        return sig.tag == digest(secret + message) and sig.payload_digest == digest(message)
