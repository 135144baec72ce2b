"""Realm worker process: ``python -m agentee.realm '<json config>'``.

The worker attests and gets provisioned, attaches the regions the host hands it,
runs the inter-realm handshakes and then serves its role.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import socket
import sys
import threading
import time

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from .agent import AgentPolicy, AgentRuntime, ChannelModel, ChannelTools
from .attestation import (
    AssetKind,
    AttestationToken,
    RealmProvisioningClient,
    TrustAnchor,
    raw_public,
)
from .csm import ChannelSet, Region
from .errors import (
    AgenteeError,
    InferenceError,
    ModelChannelDown,
    NotProvisioned,
    PeerClosed,
    ProvisioningError,
    RealmError,
    SessionError,
    ToolError,
    ValidationError,
)
from .inference import ModelConfig, serve_loop
from .measurement import Role
from .session import SecureDuplex, handshake_initiate, handshake_respond
from .tools import Credential, ToolService
from .wire import decode_fields, encode_fields, recv_frame, send_frame

log = logging.getLogger("agentee.realm")

TOKEN_TIMEOUT = 10.0
OWNER_CONNECT_TIMEOUT = 10.0
DEFAULT_HANDSHAKE_TIMEOUT = 10.0


class RealmLink:
    """Realm end of the host control link. A reader thread is the only consumer of ch1."""

    def __init__(self, name: str, bell_dir: str | None):
        self.links = ChannelSet(Region.attach(name), "A", bell_dir)
        self._out = self.links.producer(0)
        self._inbox = self.links.consumer(1)
        self._lock = threading.Lock()
        self.tokens: queue.Queue = queue.Queue()
        self.commands: queue.Queue = queue.Queue()
        self.on_shutdown = None
        threading.Thread(target=self._reader, name="host-link", daemon=True).start()

    def _reader(self) -> None:
        while True:
            try:
                fields = decode_fields(self._inbox.recv())
            except PeerClosed:
                fields = [b"SHUTDOWN"]
            except Exception as exc:
                log.error("bad control message: %s", exc)
                continue
            if fields[0] == b"TOKEN":
                self.tokens.put(AttestationToken.from_bytes(fields[1]))
            elif fields[0] == b"ERROR":
                self.tokens.put(RealmError(fields[1].decode("utf-8", "replace")))
            elif fields[0] == b"SHUTDOWN":
                self.commands.put(None)
                if self.on_shutdown is not None:
                    self.on_shutdown()
                return
            else:
                self.commands.put(fields)

    def send(self, message) -> None:
        msg = message if isinstance(message, bytes) else encode_fields(message)
        with self._lock:
            self._out.send(msg, timeout=5.0)

    def token_factory(self, public_key: bytes, nonce: bytes) -> AttestationToken:
        """Ask the platform (host) for a token over our launch measurement."""
        self.send([b"ATTEST", public_key, nonce])
        try:
            result = self.tokens.get(timeout=TOKEN_TIMEOUT)
        except queue.Empty:
            raise RealmError("platform did not issue a token") from None
        if isinstance(result, Exception):
            raise result
        return result

    def state(self, name: str) -> None:
        self.send([b"STATE", name])

    def ready(self) -> None:
        self.send(b"READY")

    def error(self, text: str) -> None:
        try:
            self.send([b"ERROR", text])
        except Exception:
            pass

    def next_command(self, kind: bytes, timeout: float | None = None) -> list[bytes]:
        try:
            fields = self.commands.get(timeout=timeout)
        except queue.Empty:
            raise RealmError(f"no {kind.decode()} from host within {timeout}s") from None
        if fields is None:
            raise SystemExit(0)
        if fields[0] != kind:
            raise RealmError(f"expected {kind.decode()} from host, got {fields[0]!r}")
        return fields


_ERROR_CODES = (
    (ValidationError, "validation"),
    (NotProvisioned, "not-provisioned"),
    (ModelChannelDown, "peer-closed"),
)


def _error_code(exc: Exception) -> str:
    if isinstance(exc, InferenceError):
        return exc.code
    if isinstance(exc, ToolError):
        return exc.code
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return "internal"


class RealmWorker:
    def __init__(self, cfg: dict, link: RealmLink):
        self.cfg = cfg
        self.role = Role(cfg["role"])
        self.link = link
        self.sealed = cfg["mode"] == "realm-csm"
        self.assets: dict[AssetKind, bytes] = {}
        self.anchor: TrustAnchor | None = None
        self.channel_sets: list[ChannelSet] = []
        link.on_shutdown = self.abort

    # ---------------------------------------------------- provisioning

    def _owner_connection(self) -> socket.socket:
        deadline = time.monotonic() + OWNER_CONNECT_TIMEOUT
        while True:
            sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                sock.connect(self.cfg["owner_socket"])
                return sock
            except OSError:
                sock.close()
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.02)

    def provision(self) -> None:
        if self.sealed:
            with self._owner_connection() as sock:
                client = RealmProvisioningClient(sock, self.role, self.link.token_factory)
                client.attest()
                self.link.state("attested")
                result = client.receive()
            if not result.complete:
                raise ProvisioningError("owner finished before all declared assets arrived")
            if result.anchor is None:
                raise ProvisioningError("owner did not provide a trust anchor")
            self.assets, self.anchor = result.assets, result.anchor
        else:
            # the host verifies this token itself and then installs assets in the clear
            pk = raw_public(X25519PrivateKey.generate())
            self.link.token_factory(pk, bytes.fromhex(self.cfg["host_nonce"]))
            while True:
                fields = self.link.commands.get()
                if fields is None:
                    raise SystemExit(0)
                if fields[0] == b"INSTALLED":
                    break
                if fields[0] != b"INSTALL":
                    raise RealmError(f"unexpected host message {fields[0]!r} during install")
                self.assets[AssetKind(fields[1].decode())] = fields[2]
        self.link.state("provisioned")

    # ---------------------------------------------------------- peers

    def attach_peer(self):
        _, region, side, peer = self.link.next_command(b"ATTACH")
        side, peer = side.decode(), Role(peer.decode())
        cs = ChannelSet(Region.attach(region.decode()), side, self.cfg.get("bells"))
        self.channel_sets.append(cs)
        if not self.sealed:
            return peer, cs.pair(2), cs
        timeout = self.cfg.get("handshake_timeout", DEFAULT_HANDSHAKE_TIMEOUT)
        shake = handshake_initiate if side == "A" else handshake_respond
        keys = shake(cs.bootstrap(), self.link.token_factory, self.anchor, peer, timeout=timeout)
        log.info("session with %s established (%s)", peer.value, keys.fingerprint()[:16])
        return peer, SecureDuplex(keys, side, cs.pair(2)), cs

    # ---------------------------------------------------------- roles

    def run(self) -> None:
        self.provision()
        {Role.AGENT: self.run_agent, Role.MODEL: self.run_model, Role.TOOL: self.run_tool}[self.role]()

    def run_model(self) -> None:
        config = ModelConfig.from_bytes(self.assets[AssetKind.MODEL_CONFIG])
        _, duplex, cs = self.attach_peer()
        self.link.ready()
        served = serve_loop(duplex, config, cs)
        log.info("model realm served %d requests", served)

    def run_tool(self) -> None:
        service = ToolService()
        if AssetKind.TOOL_CREDENTIAL in self.assets:
            service.provision_credential(Credential.from_bytes(self.assets[AssetKind.TOOL_CREDENTIAL]))
        _, duplex, cs = self.attach_peer()
        self.link.ready()
        served = service.serve(duplex)
        cs.close()
        log.info("tool realm served %d calls", served)

    def run_agent(self) -> None:
        prompt = self.assets.get(AssetKind.SYSTEM_PROMPT)
        policy_raw = self.assets.get(AssetKind.AGENT_POLICY)
        policy = AgentPolicy.from_bytes(policy_raw) if policy_raw else AgentPolicy()
        ui = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        ui.bind(self.cfg["ui_socket"])
        ui.listen(1)
        model = tools = None
        for _ in self.cfg.get("peers", ["model"]):
            try:
                peer, duplex, _ = self.attach_peer()
            except (SessionError, PeerClosed) as exc:
                if model is None:
                    raise
                log.warning("tool session failed, continuing without tools: %s", exc)
                continue
            if peer is Role.MODEL:
                model = ChannelModel(duplex)
                self.link.ready()  # readiness needs only the model session
            else:
                tools = ChannelTools(duplex)
        if model is None:
            raise RealmError("agent realm has no model session")
        runtime = AgentRuntime(prompt.decode("utf-8") if prompt else None, model, tools, policy)
        self.serve_ui(ui, runtime)

    def serve_ui(self, ui: socket.socket, runtime: AgentRuntime) -> None:
        while True:
            conn, _ = ui.accept()
            with conn:
                while True:
                    try:
                        fields = decode_fields(recv_frame(conn))
                    except (PeerClosed, OSError):
                        break
                    reply, quit_ = self.handle_ui(runtime, fields)
                    send_frame(conn, encode_fields(reply))
                    if quit_:
                        runtime.close()
                        return

    @staticmethod
    def handle_ui(runtime: AgentRuntime, fields: list[bytes]) -> tuple[list, bool]:
        kind = fields[0]
        try:
            if kind == b"CHAT" and len(fields) == 2:
                out = runtime.run_chatbot_turn(fields[1].decode("utf-8"))
            elif kind == b"PLAN" and len(fields) == 6:
                dest, days, budget, interests, constraints = (f.decode("utf-8") for f in fields[1:])
                try:
                    days_n = int(days)
                except ValueError:
                    raise ValidationError(f"days must be an integer, got {days!r}") from None
                before = runtime.tool_calls
                out = runtime.run_itinerary_plan(dest, days_n, budget, interests, constraints)
                timing = runtime.last_timings
                return [b"OK", out, repr(sum(t.inference_seconds for t in timing)),
                        repr(sum(t.end_to_end_seconds for t in timing)),
                        str(runtime.tool_calls - before)], False
            elif kind == b"RESET":
                runtime.reset()
                return [b"OK"], False
            elif kind == b"QUIT":
                return [b"OK"], True
            else:
                return [b"ERR", "protocol-error", f"unknown request {kind!r}"], False
        except (AgenteeError, UnicodeDecodeError) as exc:
            return [b"ERR", _error_code(exc), str(exc)], False
        timing = runtime.last_timings
        return [b"OK", out, repr(sum(t.inference_seconds for t in timing)),
                repr(sum(t.end_to_end_seconds for t in timing))], False

    # -------------------------------------------------------- teardown

    def close(self) -> None:
        for cs in self.channel_sets:
            try:
                cs.close()
            except Exception:
                pass
        try:
            self.link.links.close()
        except Exception:
            pass

    def abort(self) -> None:
        """Host-ordered shutdown: announce closure to every peer and exit now."""
        for cs in self.channel_sets:
            try:
                cs.mark_closed()
            except Exception:
                pass
        try:
            self.link.links.mark_closed()
        except Exception:
            pass
        logging.shutdown()
        os._exit(0)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    cfg = json.loads(argv[0])
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format=f"%(asctime)s {cfg['role']} %(levelname)s %(message)s")
    link = RealmLink(cfg["link"], cfg.get("bells"))
    worker = RealmWorker(cfg, link)
    code = 0
    try:
        worker.run()
    except SystemExit as exc:
        code = exc.code or 0
    except BaseException as exc:
        log.exception("realm failed")
        link.error(f"{type(exc).__name__}: {exc}")
        code = 1
    finally:
        worker.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
