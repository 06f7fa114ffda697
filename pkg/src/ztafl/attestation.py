"""Token-based agent attestation, PCR reference checks and the TrustDB reputation machine.

Tokens are signed with Ed25519 (deterministic signatures, ~128-bit security) standing in
for the TPM signing key. The canonical signed body is::

    id_hash (32) | timestamp ms, big-endian u64 (8) | pcr_digest (32) | nonce (16)

followed on the wire by the 64-byte signature (152 bytes total).
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import InvalidInputError, InvalidStateError

logger = logging.getLogger(__name__)

DT_MAX_MS = 60_000
TAU_MIN = 0.6
TAU_INIT = 0.7
TAU_REJOIN = 0.65
TAU_STEP = 0.02
PENALTY_FACTOR = 0.5
REJOIN_STREAK = 5

BODY_BYTES = 32 + 8 + 32 + 16
SIG_BYTES = 64
TOKEN_BYTES = BODY_BYTES + SIG_BYTES
# confidentiality is not simulated; the sealed envelope is only counted
# (32-byte ephemeral key + 16-byte AEAD tag)
ENVELOPE_OVERHEAD = 48


def id_hash(agent_id: str) -> bytes:
    return hashlib.sha256(agent_id.encode("utf-8")).digest()


def firmware_digest(image: bytes) -> bytes:
    return hashlib.sha256(image).digest()


def key_from_seed(label: str) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(hashlib.sha256(label.encode("utf-8")).digest())


def public_bytes(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


class Reason(str, Enum):
    UNKNOWN_IDENTITY = "unknown-identity"
    BAD_SIGNATURE = "bad-signature"
    STALE = "stale"
    REPLAY = "replay"
    PCR_MISMATCH = "pcr-mismatch"
    QUARANTINED = "quarantined"
    LOW_TRUST = "low-trust"


@dataclass
class AgentIdentity:
    """Edge agent's signing key plus the digest of the firmware it currently runs."""

    agent_id: str
    key: Ed25519PrivateKey
    pcr_state: bytes
    nonce_source: Callable[[int], bytes] = os.urandom

    @classmethod
    def create(cls, agent_id: str, firmware: bytes = b"firmware-v1", key_seed: Optional[str] = None,
               nonce_source: Callable[[int], bytes] = os.urandom) -> "AgentIdentity":
        key = key_from_seed(key_seed) if key_seed is not None else Ed25519PrivateKey.generate()
        return cls(agent_id, key, firmware_digest(firmware), nonce_source)

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self.key.public_key()


@dataclass(frozen=True)
class AttestationToken:
    id_hash: bytes
    timestamp: int
    pcr_digest: bytes
    nonce: bytes
    signature: bytes

    def body(self) -> bytes:
        return canonical_body(self.id_hash, self.timestamp, self.pcr_digest, self.nonce)

    def to_bytes(self) -> bytes:
        return self.body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationToken":
        if len(data) != TOKEN_BYTES:
            raise InvalidInputError(f"token must be {TOKEN_BYTES} bytes, got {len(data)}")
        (ts,) = struct.unpack_from(">Q", data, 32)
        return cls(data[:32], ts, data[40:72], data[72:88], data[88:])

    def wire_bytes(self, sealed: bool = True) -> int:
        return TOKEN_BYTES + (ENVELOPE_OVERHEAD if sealed else 0)


def canonical_body(idh: bytes, timestamp: int, pcr: bytes, nonce: bytes) -> bytes:
    if len(idh) != 32 or len(pcr) != 32 or len(nonce) != 16:
        raise InvalidInputError("token fields have fixed widths 32/32/16")
    return idh + struct.pack(">Q", timestamp) + pcr + nonce


def issue_token(identity: AgentIdentity, now: int) -> AttestationToken:
    """Fresh nonce, timestamp ``now`` (ms), signed by the agent's key."""
    idh = id_hash(identity.agent_id)
    nonce = identity.nonce_source(16)
    body = canonical_body(idh, int(now), identity.pcr_state, nonce)
    return AttestationToken(idh, int(now), identity.pcr_state, nonce, identity.key.sign(body))


@dataclass
class RegistryEntry:
    agent_id: str
    public_key: Ed25519PublicKey
    pcr_ref: bytes


@dataclass
class ReferenceRegistry:
    """Fog-side view of enrolled agents, reference PCRs and recently seen nonces."""

    manufacturer_key: Ed25519PublicKey
    dt_max_ms: int = DT_MAX_MS
    entries: dict = field(default_factory=dict)
    seen_nonces: dict = field(default_factory=dict)

    @property
    def nonce_retention_ms(self) -> int:
        return 2 * self.dt_max_ms

    def register(self, agent_id: str, public_key: Ed25519PublicKey, pcr_ref: bytes):
        self.entries[id_hash(agent_id)] = RegistryEntry(agent_id, public_key, pcr_ref)

    def lookup(self, idh: bytes) -> Optional[RegistryEntry]:
        return self.entries.get(idh)

    def pcr_ref(self, agent_id: str) -> bytes:
        return self.entries[id_hash(agent_id)].pcr_ref

    def _purge(self, now: int):
        expired = [n for n, exp in self.seen_nonces.items() if exp < now]
        for n in expired:
            del self.seen_nonces[n]

    def check_and_record_nonce(self, nonce: bytes, now: int) -> bool:
        """True if unseen (and now recorded), False on a replay."""
        self._purge(now)
        if nonce in self.seen_nonces:
            return False
        self.seen_nonces[nonce] = now + self.nonce_retention_ms
        return True


@dataclass
class TrustRecord:
    tau: float = TAU_INIT
    state: str = "active"
    consecutive_valid: int = 0


@dataclass
class AuditEvent:
    round: int
    agent: str
    event: str
    detail: str
    tau_after: float

    def csv_row(self) -> list:
        return [self.round, self.agent, self.event, self.detail, f"{self.tau_after:.6f}"]


AUDIT_COLUMNS = ["round", "agent", "event", "detail", "tau_after"]


class TrustDb:
    """Per-agent reputation ``tau`` in [0, 1] with an active/quarantined state machine.

    Every mutation is appended to :attr:`audit`, so a trajectory can be replayed from
    the event sequence alone.
    """

    def __init__(self, tau_min: float = TAU_MIN):
        self.tau_min = tau_min
        self.records: dict = {}
        self.audit: list = []
        self.round = 0

    def record(self, agent: str) -> TrustRecord:
        if agent not in self.records:
            self.records[agent] = TrustRecord()
            self._log(agent, "enroll", f"tau_init={TAU_INIT}")
        return self.records[agent]

    def tau(self, agent: str) -> float:
        return self.record(agent).tau

    def state(self, agent: str) -> str:
        return self.record(agent).state

    def is_active(self, agent: str) -> bool:
        return self.record(agent).state == "active"

    def _log(self, agent, event, detail=""):
        self.audit.append(AuditEvent(self.round, agent, event, detail, self.records[agent].tau))

    def note(self, agent: str, event: str, detail: str = ""):
        self.record(agent)
        self._log(agent, event, detail)

    def success(self, agent: str, above_average: bool) -> float:
        rec = self.record(agent)
        if rec.state != "active":
            logger.warning("trust increment ignored for quarantined agent %s", agent)
            self._log(agent, "increment-ignored", "quarantined")
            return rec.tau
        if above_average:
            rec.tau = min(1.0, round(rec.tau + TAU_STEP, 12))
            self._log(agent, "increment", f"+{TAU_STEP}")
        return rec.tau

    def penalize(self, agent: str, reason: str = "") -> float:
        rec = self.record(agent)
        rec.tau = round(rec.tau * PENALTY_FACTOR, 12)
        self._log(agent, "penalty", reason)
        if rec.state == "active" and rec.tau < self.tau_min:
            rec.state = "quarantined"
            rec.consecutive_valid = 0
            self._log(agent, "quarantine", f"tau<{self.tau_min}")
        return rec.tau

    def quarantine_step(self, agent: str, attestation_valid: bool) -> str:
        rec = self.record(agent)
        if rec.state != "quarantined":
            raise InvalidStateError(f"agent {agent} is not quarantined")
        if attestation_valid:
            rec.consecutive_valid += 1
        else:
            rec.consecutive_valid = 0
        self._log(agent, "quarantine-step", f"valid={int(attestation_valid)} streak={rec.consecutive_valid}")
        if rec.consecutive_valid >= REJOIN_STREAK:
            rec.state = "active"
            rec.tau = TAU_REJOIN
            rec.consecutive_valid = 0
            self._log(agent, "rejoin", f"tau={TAU_REJOIN}")
        return rec.state


def trust_update_success(trustdb: TrustDb, agent: str, above_average: bool) -> float:
    return trustdb.success(agent, above_average)


def trust_penalize(trustdb: TrustDb, agent: str, reason: str = "") -> float:
    return trustdb.penalize(agent, reason)


def quarantine_step(trustdb: TrustDb, agent: str, attestation_valid: bool) -> str:
    return trustdb.quarantine_step(agent, attestation_valid)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[Reason] = None
    agent_id: Optional[str] = None
    # signature, freshness, nonce and PCR all passed (trust gate aside)
    attestation_valid: bool = False


def verify_token(token: AttestationToken, registry: ReferenceRegistry, trustdb: Optional[TrustDb],
                 now: int, dt_max_ms: Optional[int] = None) -> Verdict:
    """Accept iff signature, freshness, nonce, PCR and trust checks all pass, in that order.

    The first failing check names the rejection. Unseen nonces are recorded as soon as
    they are checked.
    """
    dt_max = registry.dt_max_ms if dt_max_ms is None else dt_max_ms
    entry = registry.lookup(token.id_hash)
    if entry is None:
        return Verdict(False, Reason.UNKNOWN_IDENTITY)
    aid = entry.agent_id
    try:
        entry.public_key.verify(token.signature, token.body())
    except (InvalidSignature, InvalidInputError, ValueError):
        return Verdict(False, Reason.BAD_SIGNATURE, aid)
    if abs(int(now) - token.timestamp) > dt_max:
        return Verdict(False, Reason.STALE, aid)
    if not registry.check_and_record_nonce(token.nonce, int(now)):
        return Verdict(False, Reason.REPLAY, aid)
    if token.pcr_digest != entry.pcr_ref:
        return Verdict(False, Reason.PCR_MISMATCH, aid)
    if trustdb is not None:
        rec = trustdb.record(aid)
        if rec.state != "active":
            return Verdict(False, Reason.QUARANTINED, aid, attestation_valid=True)
        if rec.tau < trustdb.tau_min:
            return Verdict(False, Reason.LOW_TRUST, aid, attestation_valid=True)
    return Verdict(True, None, aid, attestation_valid=True)


@dataclass(frozen=True)
class FirmwareManifest:
    agent_id: str
    new_digest: bytes
    signature: bytes

    def message(self) -> bytes:
        return manifest_message(self.agent_id, self.new_digest)


def manifest_message(agent_id: str, digest: bytes) -> bytes:
    return b"ztafl-fw-manifest" + id_hash(agent_id) + digest


def sign_manifest(manufacturer_key: Ed25519PrivateKey, agent_id: str, digest: bytes) -> FirmwareManifest:
    return FirmwareManifest(agent_id, digest, manufacturer_key.sign(manifest_message(agent_id, digest)))


def register_firmware_update(registry: ReferenceRegistry, manifest: FirmwareManifest) -> bool:
    """Swap in the manifest's PCR reference iff the manufacturer signature verifies."""
    entry = registry.lookup(id_hash(manifest.agent_id))
    if entry is None:
        return False
    try:
        registry.manufacturer_key.verify(manifest.signature, manifest.message())
    except InvalidSignature:
        logger.warning("rejected firmware manifest for %s: bad manufacturer signature", manifest.agent_id)
        return False
    entry.pcr_ref = manifest.new_digest
    return True
