"""Token-authenticated inference service.

Each licensee holds a (passport, certificate) token. A request is admitted
iff the chameleon hash of the submitted token expands to the master
signature and the registry still lists the token as active. Inference uses
the passport-free branch, so the passport is only an identity credential.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import itertools
import json
import logging
import os
import secrets
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from . import crypto
from .passport import CLAMP, Passport, PassportFormatError, parse_passport_bytes

log = logging.getLogger(__name__)

REASONS = ("ok", "hash_mismatch", "revoked", "unknown_format")
DEFAULT_TTL = 15 * 60


class TokenError(ValueError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class TokenRecord:
    user_id: str
    passport_digest: str  # hex of m_u
    certificate: str  # hex of r_u
    status: str = "active"
    issued_at: str = ""
    revoked_at: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AuthDecision:
    accepted: bool
    reason: str
    latency_ms: float
    user_id: str | None = None

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")
        if self.accepted != (self.reason == "ok"):
            raise ValueError("accepted decisions carry reason 'ok' and only those")


class HashCounter:
    """Counts chameleon-hash evaluations; the service does exactly one per request."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def __call__(self, pk, m, r) -> int:
        with self._lock:
            self.count += 1
        return crypto.ch_hash(pk, m, r)


class TokenRegistry:
    """Digest-keyed token records with copy-on-write snapshots.

    Reads go to the current snapshot without locking; issue and revoke are
    serialized and rewrite the JSON file atomically.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._write = threading.Lock()
        self._records: tuple = ()
        self._by_digest: dict = {}
        if self.path and self.path.exists():
            self._install([TokenRecord(**d) for d in json.loads(self.path.read_text() or "[]")])

    def _install(self, records) -> None:
        by_digest = {}
        for r in records:
            if r.passport_digest in by_digest:
                raise TokenError(f"duplicate digest in registry for {r.user_id!r}")
            by_digest[r.passport_digest] = r
        self._records, self._by_digest = tuple(records), by_digest

    def _commit(self, records) -> None:
        self._install(records)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_bytes(self.canonical_dump())
            os.replace(tmp, self.path)

    def canonical_dump(self) -> bytes:
        return (json.dumps([r.to_dict() for r in self._records], sort_keys=True, indent=1) + "\n").encode()

    def records(self) -> list[TokenRecord]:
        return list(self._records)

    def lookup(self, digest_hex: str) -> TokenRecord | None:
        return self._by_digest.get(digest_hex)

    def active_for(self, user_id: str) -> TokenRecord | None:
        return next((r for r in self._records if r.user_id == user_id and r.status == "active"), None)

    def add(self, record: TokenRecord) -> None:
        with self._write:
            if record.passport_digest in self._by_digest:
                raise TokenError("duplicate passport digest")
            if self.active_for(record.user_id) is not None:
                raise TokenError(f"user {record.user_id!r} already holds an active token")
            self._commit([*self._records, record])

    def revoke(self, user_id: str) -> bool:
        """Revokes every active token of ``user_id``; returns False (and logs) for unknown users."""
        with self._write:
            if not any(r.user_id == user_id for r in self._records):
                log.warning("revoke: unknown user %r", user_id)
                return False
            stamp = _now()
            out = []
            for r in self._records:
                if r.user_id == user_id and r.status == "active":
                    r = TokenRecord(**{**r.to_dict(), "status": "revoked", "revoked_at": stamp})
                out.append(r)
            self._commit(out)
            return True


class AuditLog:
    """JSON-lines decision log with a monotonic sequence number that survives restarts."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        start = 0
        if self.path and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    start = json.loads(line)["seq"] + 1
        self._seq = itertools.count(start)
        self.entries: list[dict] = []

    def write(self, event: str, **fields) -> dict:
        with self._lock:
            entry = {"seq": next(self._seq), "time": _now(), "event": event, **fields}
            self.entries.append(entry)
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry


def admin_token(keys: crypto.ChameleonKeySet) -> str:
    """Bearer token for the admin endpoints, derived from the trapdoor."""
    return hmac.new(keys.x.to_bytes((keys.x.bit_length() + 7) // 8, "big"), b"chip-admin",
                    hashlib.sha256).hexdigest()


class ChipService:
    """Owner-side service state: keys, the immutable signature, registry, sessions and audit log.

    ``owner_digest`` and ``owner_certificate`` are the master (m_o, r_o) that
    new tokens collide onto; they are only needed to issue.
    """

    def __init__(self, keys, signature: crypto.Signature, registry: TokenRegistry, model=None,
                 passport_shapes=None, owner_digest=None, owner_certificate=None,
                 ttl: float = DEFAULT_TTL, per_request: bool = False, audit: AuditLog | None = None,
                 clock=time.monotonic):
        self.keys = keys
        self.pk = keys.public if isinstance(keys, crypto.ChameleonKeySet) else keys
        self.signature = signature
        self.registry = registry
        self.model = model
        self.passport_shapes = dict(passport_shapes or (model.passport_shapes() if model is not None else {}))
        self.owner_digest = owner_digest
        self.owner_certificate = owner_certificate
        self.ttl = ttl
        self.per_request = per_request
        self.audit = audit or AuditLog()
        self.clock = clock
        self.hash = HashCounter()
        self._sessions: dict = {}
        self._session_lock = threading.Lock()

    # -- owner operations -------------------------------------------------
    def issue_token(self, user_id: str, seed=None) -> tuple[TokenRecord, bytes]:
        if not isinstance(self.keys, crypto.ChameleonKeySet):
            raise TokenError("issuing tokens needs the secret trapdoor")
        if self.owner_digest is None or self.owner_certificate is None:
            raise TokenError("service has no master digest/certificate to collide onto")
        if not self.passport_shapes:
            raise TokenError("no passport shapes configured")
        seed = secrets.randbits(128) if seed is None else seed
        passport = Passport.random(self.passport_shapes, seed, CLAMP)
        m_u = passport.digest(self.pk.params.q)
        r_u = crypto.trapdoor_collide(self.keys, self.owner_digest, self.owner_certificate, m_u)
        record = TokenRecord(user_id, m_u.hex, r_u.hex, "active", _now())
        self.registry.add(record)
        self.audit.write("issue", user_id=user_id, passport_digest=m_u.hex)
        return record, passport.to_bytes()

    def revoke_token(self, user_id: str) -> str:
        known = self.registry.revoke(user_id)
        self.audit.write("revoke", user_id=user_id, known=known)
        return "revoked" if known else "unknown"

    # -- per-request path -------------------------------------------------
    def authenticate(self, passport_bytes: bytes, certificate_hex: str) -> AuthDecision:
        t0 = time.perf_counter()
        user = None
        try:
            gammas, _ = parse_passport_bytes(passport_bytes)
            r = crypto.Certificate.from_hex(certificate_hex)
            m = crypto.digest_passport(gammas, self.pk.params.q)
            if r.value >= self.pk.params.q:
                raise crypto.CryptoError("certificate outside Z_q")
        except (PassportFormatError, crypto.CryptoError, ValueError):
            reason = "unknown_format"
        else:
            h = self.hash(self.pk, m, r)
            if crypto.derive_signature(h, self.signature.C) != self.signature:
                reason = "hash_mismatch"
            else:
                # a valid hash without a record means the owner no longer lists it
                record = self.registry.lookup(m.hex)
                reason = "ok" if record is not None and record.status == "active" else "revoked"
                user = record.user_id if record is not None else None
        decision = AuthDecision(reason == "ok", reason, (time.perf_counter() - t0) * 1e3, user)
        self.audit.write("authenticate", accepted=decision.accepted, reason=reason, user_id=user,
                         latency_ms=round(decision.latency_ms, 3))
        return decision

    def open_session(self, user_id: str | None) -> str:
        token = secrets.token_hex(16)
        with self._session_lock:
            self._sessions[token] = (self.clock() + self.ttl, user_id)
        return token

    def session_user(self, token: str):
        """User id for a live session; raises TokenError for unknown or expired sessions."""
        with self._session_lock:
            entry = self._sessions.get(token)
            if entry is None:
                raise TokenError("unknown session")
            if self.clock() >= entry[0]:
                del self._sessions[token]
                raise TokenError("session expired")
            user_id = entry[1]
        record = self.registry.active_for(user_id) if user_id else None
        if record is None:
            raise TokenError("token revoked")
        return user_id

    def predict(self, x) -> np.ndarray:
        if self.model is None:
            raise TokenError("no model loaded")
        x = np.asarray(x, dtype=np.float32)
        arch = self.model.arch
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (arch.in_channels, arch.image_size, arch.image_size):
            raise ValueError(f"input must be (N, {arch.in_channels}, {arch.image_size}, {arch.image_size})")
        branch = "free" if self.model.has_free_branch else "aware"
        if branch == "aware":
            raise TokenError("model has no passport-free branch")
        return self.model.predict(x, branch)


# --------------------------------------------------------------------------
# HTTP front end


def _b64(data: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError):
        raise PassportFormatError("passport is not valid base64") from None


class AuthRequest(BaseModel):
    passport_b64: str
    certificate_hex: str


class PredictRequest(BaseModel):
    input: list
    session_token: Optional[str] = None
    passport_b64: Optional[str] = None
    certificate_hex: Optional[str] = None


class UserRequest(BaseModel):
    user_id: str
    seed: Optional[int] = None


def create_app(service: ChipService):
    from fastapi import FastAPI, Header, HTTPException

    app = FastAPI(title="chip", version="1")

    def check_admin(authorization: str | None):
        if not isinstance(service.keys, crypto.ChameleonKeySet):
            raise HTTPException(403, "service runs without the owner key")
        expected = "Bearer " + admin_token(service.keys)
        if not authorization or not hmac.compare_digest(authorization, expected):
            raise HTTPException(401, "admin token required")

    def decide(passport_b64: str, certificate_hex: str) -> AuthDecision:
        try:
            raw = _b64(passport_b64)
        except PassportFormatError:
            raw = b""
        return service.authenticate(raw, certificate_hex)

    @app.post("/v1/authenticate")
    def authenticate(req: AuthRequest):
        d = decide(req.passport_b64, req.certificate_hex)
        out = {"accepted": d.accepted, "reason": d.reason}
        if d.accepted and not service.per_request:
            out["session_token"] = service.open_session(d.user_id)
        return out

    @app.post("/v1/predict")
    def predict(req: PredictRequest):
        if service.per_request or req.session_token is None:
            if req.passport_b64 is None or req.certificate_hex is None:
                raise HTTPException(401, "session token or passport credentials required")
            d = decide(req.passport_b64, req.certificate_hex)
            if not d.accepted:
                raise HTTPException(403, d.reason)
        else:
            try:
                service.session_user(req.session_token)
            except TokenError as exc:
                raise HTTPException(401, str(exc)) from None
        try:
            probs = service.predict(req.input)
        except (ValueError, TypeError) as exc:
            raise HTTPException(422, str(exc)) from None
        return {"probabilities": probs.tolist()}

    @app.post("/v1/admin/issue")
    def issue(req: UserRequest, authorization: Optional[str] = Header(None)):
        check_admin(authorization)
        try:
            record, blob = service.issue_token(req.user_id, req.seed)
        except TokenError as exc:
            raise HTTPException(409, str(exc)) from None
        return {"user_id": record.user_id, "passport_b64": base64.b64encode(blob).decode(),
                "certificate_hex": record.certificate}

    @app.post("/v1/admin/revoke")
    def revoke(req: UserRequest, authorization: Optional[str] = Header(None)):
        check_admin(authorization)
        return {"user_id": req.user_id, "status": service.revoke_token(req.user_id)}

    return app


def service_from_env(env=None, **overrides) -> ChipService:
    """Builds the service from CHIP_KEYFILE, CHIP_REGISTRY and CHIP_MODEL (a master bundle directory)."""
    from .bundle import load_master

    env = os.environ if env is None else env
    keyfile = overrides.pop("keyfile", None) or env.get("CHIP_KEYFILE")
    registry = overrides.pop("registry", None) or env.get("CHIP_REGISTRY")
    master_dir = overrides.pop("model", None) or env.get("CHIP_MODEL")
    if not keyfile or not master_dir:
        raise TokenError("CHIP_KEYFILE and CHIP_MODEL must be set")
    keys = crypto.load_keys(keyfile)
    master = load_master(master_dir)
    reg_path = Path(registry) if registry else Path(master_dir).parent / "tokens.json"
    return ChipService(keys, master.signature, TokenRegistry(reg_path), master.model,
                       owner_digest=master.passport.digest(keys.params.q),
                       owner_certificate=master.certificate,
                       audit=AuditLog(reg_path.with_name("audit.jsonl")), **overrides)


def parse_bind(addr: str | None) -> tuple[str, int]:
    addr = addr or "127.0.0.1:8000"
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)
