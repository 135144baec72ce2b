"""Realm lifecycle on the host: launch, measurement, region allocation, readiness.

Every realm gets a two-channel control link to the host, a region named
``agentee.<run>.<role>.host`` where the realm is side A::

    ch0  realm -> host   ATTEST(pk, nonce) | STATE(name) | "READY" | ERROR(text)
    ch1  host -> realm   TOKEN(token) | ATTACH(region, side, peer) | INSTALL(kind, body)
                         | INSTALLED | SHUTDOWN

The host process also plays the platform firmware: it answers ATTEST with a
token signed by the per-run platform key over the realm's launch measurement.
"""

from __future__ import annotations

import configparser
import itertools
import json
import logging
import os
import shutil
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .attestation import (
    AttestationError,
    PlatformKey,
    ProvisioningPayload,
    TrustAnchor,
    issue_token,
    verify_token,
)
from .csm import (
    MIN_REGION_SIZE,
    PAGE,
    ChannelSet,
    Region,
    make_doorbells,
    partition_region,
    region_name,
    wait_any,
)
from .errors import (
    DeadRealmError,
    InvalidTransition,
    PeerClosed,
    ReadyTimeout,
    RealmCrashed,
    RegionAllocationError,
    SpawnError,
    WireFormatError,
)
from .measurement import Measurement, RealmImage, Role, measure_image
from .wire import decode_fields, encode_fields

__all__ = [
    "RealmSpec", "RealmHandle", "RealmState", "RealmHost", "load_realm_spec",
    "measure_image", "READY", "LINK_SIZE",
]

log = logging.getLogger(__name__)

READY = b"READY"
LINK_SIZE = 64 * 1024
LINK_CHANNELS = 2
DEFAULT_READY_TIMEOUT_MS = 30_000
MODES = ("realm-csm", "process-shm")


class RealmState(str, Enum):
    LAUNCHED = "launched"
    ATTESTED = "attested"
    PROVISIONED = "provisioned"
    READY = "ready"
    TERMINATED = "terminated"


_FORWARD = [RealmState.LAUNCHED, RealmState.ATTESTED, RealmState.PROVISIONED, RealmState.READY]


@dataclass(frozen=True)
class RealmSpec:
    image: RealmImage
    region_links: tuple[tuple[Role, int], ...] = ()
    ready_timeout_ms: int = DEFAULT_READY_TIMEOUT_MS

    def __post_init__(self):
        links = tuple((Role(peer), int(size)) for peer, size in self.region_links)
        object.__setattr__(self, "region_links", links)
        for peer, size in links:
            if size <= 0 or size % PAGE:
                raise ValueError(f"region size to {peer.value} must be a positive multiple of {PAGE}, got {size}")
        if self.ready_timeout_ms <= 0:
            raise ValueError("ready timeout must be > 0")

    @property
    def role(self) -> Role:
        return self.image.role


def load_realm_spec(path: str | Path) -> RealmSpec:
    """Read a flat ``key = value`` file (role, image_path, peer, region_size, ready_timeout_ms).

    ``peer`` and ``region_size`` are comma lists; a single size applies to every peer.
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string("[realm]\n" + path.read_text())
    sec = cp["realm"]
    image_path = Path(sec["image_path"])
    if not image_path.is_absolute():
        image_path = path.parent / image_path
    peers = [p.strip() for p in sec.get("peer", "").split(",") if p.strip()]
    sizes = [int(s) for s in sec.get("region_size", str(LINK_SIZE)).split(",") if s.strip()]
    if len(sizes) == 1:
        sizes *= len(peers)
    if len(sizes) != len(peers):
        raise ValueError("region_size must give one size or one per peer")
    return RealmSpec(
        image=RealmImage.load(sec["role"], image_path),
        region_links=tuple(zip(peers, sizes)),
        ready_timeout_ms=sec.getint("ready_timeout_ms", DEFAULT_READY_TIMEOUT_MS),
    )


@dataclass
class RealmHandle:
    """Live view of one realm process. Mutated only by the host's management loop."""

    realm_id: int
    process_id: int
    measurement: Measurement
    spec: RealmSpec
    link_name: str
    log_path: str
    state: RealmState = RealmState.LAUNCHED
    transitions: list[RealmState] = field(default_factory=lambda: [RealmState.LAUNCHED])
    error: str | None = None
    exit_code: int | None = None

    @property
    def role(self) -> Role:
        return self.spec.role

    def _advance(self, new: RealmState) -> None:
        if self.state is RealmState.TERMINATED:
            raise InvalidTransition(f"realm {self.realm_id} is terminated")
        if new is not RealmState.TERMINATED:
            if new not in _FORWARD or _FORWARD.index(new) != _FORWARD.index(self.state) + 1:
                raise InvalidTransition(f"realm {self.realm_id}: {self.state.value} -> {new.value}")
        self.state = new
        self.transitions.append(new)


class _Realm:
    """Host-private bookkeeping for one handle."""

    def __init__(self, handle, proc, links, nonce, assets):
        self.handle = handle
        self.proc = proc
        self.links = links
        self.inbox = links.consumer(0)
        self.outbox = links.producer(1)
        self.send_lock = threading.Lock()
        self.nonce = nonce
        self.assets = list(assets)
        self.regions: list[str] = []

    def send(self, fields) -> None:
        msg = fields if isinstance(fields, bytes) else encode_fields(fields)
        with self.send_lock:
            self.outbox.send(msg, timeout=5.0)


class RealmHost:
    """Launches realms as worker processes and runs the single management loop.

    ``mode`` is ``realm-csm`` (owners attest and provision; channels sealed) or
    ``process-shm`` (the host installs assets itself, in the clear).
    """

    def __init__(self, mode: str = "realm-csm", run_id: str | None = None,
                 workdir: str | None = None, platform_key: PlatformKey | None = None,
                 anchor: TrustAnchor | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.run_id = run_id or uuid.uuid4().hex[:10]
        self._own_workdir = workdir is None
        self.workdir = workdir or tempfile.mkdtemp(prefix="agentee-")
        self.bell_dir = os.path.join(self.workdir, "bells")
        os.makedirs(self.bell_dir, exist_ok=True)
        self.platform = platform_key or PlatformKey()
        self.anchor = anchor
        self._ids = itertools.count(1)
        self._realms: dict[int, _Realm] = {}
        self._cond = threading.Condition()
        self._regions: dict[str, Region] = {}
        self._stop = threading.Event()
        self._loop = threading.Thread(target=self._run_loop, name="realm-host", daemon=True)
        self._loop.start()

    # ------------------------------------------------------------ launch

    def launch_realm(self, spec: RealmSpec, config: dict | None = None,
                     assets=()) -> RealmHandle:
        """Start the role's worker process; ``assets`` are installed by the host in process-shm mode."""
        realm_id = next(self._ids)
        role = spec.role
        name = region_name(self.run_id, f"{role.value}{realm_id}", "host")
        try:
            region = Region.create(name, LINK_SIZE)
        except OSError as exc:
            raise RegionAllocationError(f"cannot allocate control link {name}: {exc}") from exc
        partition_region(region, LINK_CHANNELS)
        make_doorbells(self.bell_dir, name, LINK_CHANNELS)
        links = ChannelSet(region, "B", self.bell_dir)
        nonce = os.urandom(16)
        worker_cfg = {
            "role": role.value, "realm_id": realm_id, "run_id": self.run_id, "mode": self.mode,
            "link": name, "bells": self.bell_dir, "host_nonce": nonce.hex(),
            **(config or {}),
        }
        log_path = os.path.join(self.workdir, f"{role.value}{realm_id}.log")
        try:
            with open(log_path, "ab") as log_fh:
                proc = subprocess.Popen(
                    [sys.executable, "-m", "agentee.realm", json.dumps(worker_cfg)],
                    stdin=subprocess.DEVNULL, stdout=log_fh, stderr=log_fh,
                    start_new_session=True)
        except OSError as exc:
            links.release()
            region.unlink()
            raise SpawnError(f"cannot start {role.value} realm: {exc}") from exc
        handle = RealmHandle(realm_id, proc.pid, measure_image(spec.image), spec, name, log_path)
        with self._cond:
            self._realms[realm_id] = _Realm(handle, proc, links, nonce, assets)
            self._regions[name] = region
        log.info("launched %s realm %d (pid %d)", role.value, realm_id, proc.pid)
        return handle

    # ----------------------------------------------------------- regions

    def _alive(self, handle: RealmHandle) -> _Realm:
        realm = self._realms.get(handle.realm_id)
        if realm is None or handle.state is RealmState.TERMINATED or realm.proc.poll() is not None:
            raise DeadRealmError(f"{handle.role.value} realm {handle.realm_id} is not running")
        return realm

    def create_csm_region(self, a: RealmHandle, b: RealmHandle, size: int,
                          channel_count: int = 4) -> str:
        """Allocate and partition a region for the pair; ``a`` becomes side A."""
        if size % PAGE or size < MIN_REGION_SIZE:
            raise ValueError(f"region size must be a multiple of {PAGE} and >= {MIN_REGION_SIZE}, got {size}")
        ra, rb = self._alive(a), self._alive(b)
        name = region_name(self.run_id, f"{a.role.value}{a.realm_id}", f"{b.role.value}{b.realm_id}")
        try:
            region = Region.create(name, size)
        except OSError as exc:
            raise RegionAllocationError(f"cannot allocate {name}: {exc}") from exc
        try:
            partition_region(region, channel_count)
        except Exception:
            region.close()
            region.unlink()
            raise
        region.close()  # the host keeps only the name, not a mapping
        make_doorbells(self.bell_dir, name, channel_count)
        with self._cond:
            ra.regions.append(name)
            rb.regions.append(name)
            self._regions[name] = region
        return name

    def attach(self, handle: RealmHandle, region: str, side: str, peer: Role) -> None:
        """Hand a region to one realm. Only the two peers of a region are ever told its name."""
        self._alive(handle).send([b"ATTACH", region, side, Role(peer).value])

    def connect(self, a: RealmHandle, b: RealmHandle, size: int) -> str:
        name = self.create_csm_region(a, b, size)
        self.attach(b, name, "B", a.role)
        self.attach(a, name, "A", b.role)
        return name

    @property
    def region_names(self) -> list[str]:
        with self._cond:
            return list(self._regions)

    # --------------------------------------------------------- readiness

    def await_state(self, handle: RealmHandle, state: RealmState | str,
                    timeout: float | None = None) -> RealmState:
        target = RealmState(state)
        if timeout is None:
            timeout = handle.spec.ready_timeout_ms / 1000.0
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if handle.state is RealmState.TERMINATED and target is not RealmState.TERMINATED:
                    detail = f": {handle.error}" if handle.error else ""
                    raise RealmCrashed(f"{handle.role.value} realm {handle.realm_id} terminated "
                                       f"(exit {handle.exit_code}){detail}")
                if handle.state is target or (target in _FORWARD and handle.state in _FORWARD
                                              and _FORWARD.index(handle.state) >= _FORWARD.index(target)):
                    return handle.state
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ReadyTimeout(f"{handle.role.value} realm {handle.realm_id} still "
                                       f"{handle.state.value} after {timeout:.1f}s")
                self._cond.wait(min(remaining, 0.1))

    def await_ready(self, handle: RealmHandle, timeout: float | None = None) -> RealmState:
        return self.await_state(handle, RealmState.READY, timeout)

    # -------------------------------------------------------- teardown

    def terminate(self, handle: RealmHandle, grace: float = 2.0) -> None:
        realm = self._realms.get(handle.realm_id)
        if realm is None:
            return
        if realm.proc.poll() is None:
            try:
                realm.send([b"SHUTDOWN"])
            except Exception:
                pass
            try:
                realm.proc.wait(grace)
            except subprocess.TimeoutExpired:
                realm.proc.kill()
                realm.proc.wait()
        self.await_state(handle, RealmState.TERMINATED, timeout=5.0)

    def kill(self, handle: RealmHandle) -> None:
        """Hard-kill a realm process (fault injection)."""
        realm = self._realms.get(handle.realm_id)
        if realm is not None and realm.proc.poll() is None:
            realm.proc.kill()

    def handles(self) -> list[RealmHandle]:
        with self._cond:
            return [r.handle for r in self._realms.values()]

    def shutdown(self) -> None:
        for handle in self.handles():
            try:
                self.terminate(handle)
            except Exception:
                log.exception("terminating realm %d", handle.realm_id)
        self._stop.set()
        self._loop.join(5.0)
        for name in self.region_names:
            self._unlink(name)
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    # -------------------------------------------------- management loop

    def _run_loop(self) -> None:
        while not self._stop.is_set():
            with self._cond:
                realms = list(self._realms.values())
            live = [r for r in realms if r.handle.state is not RealmState.TERMINATED]
            for realm in live:
                try:
                    self._service(realm)
                except Exception:
                    log.exception("management loop error on realm %d", realm.handle.realm_id)
            live = [r for r in live if r.handle.state is not RealmState.TERMINATED]
            wait_any([r.inbox for r in live], 0.05)

    def _service(self, realm: _Realm) -> None:
        while realm.inbox.poll():
            try:
                msg = realm.inbox.recv(timeout=0)
            except (PeerClosed, TimeoutError):
                break
            self._handle_message(realm, msg)
        code = realm.proc.poll()
        if code is not None and not realm.inbox.poll():
            self._reap(realm, code)

    def _transition(self, realm: _Realm, state: RealmState) -> None:
        with self._cond:
            realm.handle._advance(state)
            self._cond.notify_all()

    def _fail(self, realm: _Realm, reason: str) -> None:
        with self._cond:
            realm.handle.error = reason
        log.warning("%s realm %d: %s", realm.handle.role.value, realm.handle.realm_id, reason)

    def _reap(self, realm: _Realm, code: int) -> None:
        handle = realm.handle
        with self._cond:
            handle.exit_code = code
            handle._advance(RealmState.TERMINATED)
            self._cond.notify_all()
        realm.links.release()
        for name in [handle.link_name, *realm.regions]:
            self._unlink(name)

    def _unlink(self, name: str) -> None:
        with self._cond:
            region = self._regions.get(name)
        if region is not None:
            region.unlink()

    def _handle_message(self, realm: _Realm, msg: bytes) -> None:
        if msg == READY:
            self._transition(realm, RealmState.READY)
            return
        try:
            fields = decode_fields(msg)
        except WireFormatError:
            self._fail(realm, "malformed control message")
            return
        kind = fields[0]
        if kind == b"ATTEST" and len(fields) == 3:
            self._attest(realm, fields[1], fields[2])
        elif kind == b"STATE" and len(fields) == 2:
            self._transition(realm, RealmState(fields[1].decode()))
        elif kind == b"ERROR":
            self._fail(realm, fields[1].decode("utf-8", "replace") if len(fields) > 1 else "error")
        else:
            self._fail(realm, f"unexpected control message {kind!r}")

    def _attest(self, realm: _Realm, pk: bytes, nonce: bytes) -> None:
        try:
            token = issue_token(realm.handle.measurement, pk, nonce, self.platform)
        except AttestationError as exc:
            realm.send([b"ERROR", str(exc)])
            return
        realm.send([b"TOKEN", token.to_bytes()])
        if self.mode != "process-shm" or nonce != realm.nonce:
            return
        # process-shm: the host itself verifies and installs assets in the clear
        if self.anchor is not None:
            try:
                verify_token(token, self.anchor, realm.handle.role, realm.nonce)
            except AttestationError as exc:
                self._fail(realm, f"host verification failed: {exc}")
                realm.send([b"SHUTDOWN"])
                return
        self._transition(realm, RealmState.ATTESTED)
        for payload in realm.assets:
            payload = payload if isinstance(payload, ProvisioningPayload) else ProvisioningPayload(*payload)
            realm.send([b"INSTALL", payload.kind.value, payload.body])
        realm.send([b"INSTALLED"])
