"""Whole-pipeline orchestration from the normal world: owners, realms, regions, forwarder."""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .agent import AgentPolicy
from .attestation import AssetKind, PlatformKey, ProvisioningPayload, TrustAnchor
from .errors import AgenteeError, PipelineNotReady, PeerClosed, RealmError
from .inference import ModelConfig
from .measurement import RealmImage, Role, measure_image
from .realm_host import LINK_SIZE, RealmHandle, RealmHost, RealmSpec, RealmState
from .tools import Credential
from .wire import decode_fields, encode_fields, recv_frame, send_frame

MODES = ("realm-csm", "process-shm")
DEFAULT_REGION_SIZE = LINK_SIZE


def data_path(name: str) -> Path:
    return Path(str(resources.files("agentee.data").joinpath(name)))


def default_system_prompt() -> str:
    return data_path("system_prompt.txt").read_text()


def default_image(role: Role | str) -> RealmImage:
    role = Role(role)
    return RealmImage.load(role, data_path(f"images/{role.value}.img"))


def default_specs(with_tool: bool = True, region_size: int = DEFAULT_REGION_SIZE,
                  ready_timeout_ms: int = 30_000) -> dict[Role, RealmSpec]:
    agent_links = [(Role.MODEL, region_size)] + ([(Role.TOOL, region_size)] if with_tool else [])
    specs = {
        Role.AGENT: RealmSpec(default_image(Role.AGENT), tuple(agent_links), ready_timeout_ms),
        Role.MODEL: RealmSpec(default_image(Role.MODEL), ((Role.AGENT, region_size),), ready_timeout_ms),
    }
    if with_tool:
        specs[Role.TOOL] = RealmSpec(default_image(Role.TOOL), ((Role.AGENT, region_size),),
                                     ready_timeout_ms)
    return specs


class AgentReplyError(AgenteeError):
    """The agent realm answered a forwarded request with an error."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Reply:
    text: str
    inference_seconds: float
    end_to_end_seconds: float
    tool_calls: int = 0


class Forwarder:
    """Normal-world UI client. Holds no agent state; it only relays requests."""

    def __init__(self):
        self._sock: socket.socket | None = None

    @property
    def ready(self) -> bool:
        return self._sock is not None

    def connect(self, path: str) -> None:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(path)
        self._sock = sock

    def request(self, fields) -> list[bytes]:
        if self._sock is None:
            raise PipelineNotReady("pipeline is not ready; the agent realm has not signaled READY")
        try:
            send_frame(self._sock, encode_fields(fields))
            reply = decode_fields(recv_frame(self._sock))
        except OSError as exc:
            raise PeerClosed(f"agent realm connection lost: {exc}") from exc
        if reply[0] == b"ERR":
            raise AgentReplyError(reply[1].decode(), reply[2].decode("utf-8", "replace"))
        return reply

    def chat(self, text: str) -> Reply:
        _, out, inf, e2e = self.request([b"CHAT", text])
        return Reply(out.decode("utf-8"), float(inf), float(e2e))

    def plan(self, destination: str, days, budget, interests: str = "", constraints: str = "") -> Reply:
        _, out, inf, e2e, calls = self.request([b"PLAN", destination, str(days), str(budget),
                                                interests, constraints])
        return Reply(out.decode("utf-8"), float(inf), float(e2e), int(calls))

    def reset(self) -> None:
        self.request([b"RESET"])

    def quit(self) -> None:
        if self._sock is None:
            return
        try:
            self.request([b"QUIT"])
        except (AgenteeError, OSError):
            pass
        self.close()

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


@dataclass
class PipelineConfig:
    mode: str = "realm-csm"
    model_config: ModelConfig = field(default_factory=lambda: ModelConfig("mock", "GPT2-Medium-q8_0"))
    system_prompt: str | None = None
    policy: AgentPolicy = field(default_factory=AgentPolicy)
    credential: Credential | None = None
    with_tool: bool = True
    specs: dict[Role, RealmSpec] | None = None
    # measurements the owners and peers expect; defaults to the launched images
    expected_images: dict[Role, RealmImage] | None = None
    # per-owner overrides: the anchor owner R pins and hands to its realm
    owner_expectations: dict[Role, dict[Role, RealmImage]] = field(default_factory=dict)
    handshake_timeout: float = 10.0
    ready_timeout: float = 30.0
    # keep realm logs and sockets here instead of a private temp dir
    workdir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def _payloads(cfg: PipelineConfig, role: Role) -> list[ProvisioningPayload]:
    if role is Role.AGENT:
        prompt = cfg.system_prompt if cfg.system_prompt is not None else default_system_prompt()
        return [ProvisioningPayload(AssetKind.SYSTEM_PROMPT, prompt.encode("utf-8")),
                ProvisioningPayload(AssetKind.AGENT_POLICY, cfg.policy.to_bytes())]
    if role is Role.MODEL:
        return [ProvisioningPayload(AssetKind.MODEL_CONFIG, cfg.model_config.to_bytes())]
    if cfg.credential is not None:
        return [ProvisioningPayload(AssetKind.TOOL_CREDENTIAL, cfg.credential.to_bytes())]
    return []


class Pipeline:
    """Agent, model and (optionally) tool realms wired together and ready for requests."""

    def __init__(self, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.specs = self.config.specs or default_specs(self.config.with_tool)
        self.host: RealmHost | None = None
        self.handles: dict[Role, RealmHandle] = {}
        self.forwarder = Forwarder()
        self._owners: dict[Role, subprocess.Popen] = {}
        self.ui_socket: str | None = None

    # --------------------------------------------------------------- start

    def start(self) -> "Pipeline":
        cfg = self.config
        platform = PlatformKey()
        expected = cfg.expected_images or {r: s.image for r, s in self.specs.items()}
        anchor = TrustAnchor(platform.verify_key, {r: measure_image(i) for r, i in expected.items()})
        self.host = RealmHost(cfg.mode, workdir=cfg.workdir, platform_key=platform, anchor=anchor)
        try:
            self._start(anchor)
        except BaseException:
            self.stop()
            raise
        return self

    def _start(self, anchor: TrustAnchor) -> None:
        cfg, host = self.config, self.host
        self.ui_socket = os.path.join(host.workdir, "ui.sock")
        for role, spec in self.specs.items():
            worker_cfg = {"handshake_timeout": cfg.handshake_timeout}
            if role is Role.AGENT:
                worker_cfg["ui_socket"] = self.ui_socket
                worker_cfg["peers"] = [p.value for p, _ in self._agent_links()]
            assets = ()
            if cfg.mode == "realm-csm":
                worker_cfg["owner_socket"] = self._start_owner(role, anchor)
            else:
                assets = _payloads(cfg, role)
            self.handles[role] = host.launch_realm(spec, worker_cfg, assets)

        for role, handle in self.handles.items():
            self._await(handle, RealmState.PROVISIONED)
        for role in self._owners:
            self._check_owner(role)

        agent = self.handles[Role.AGENT]
        for peer, size in self._agent_links():
            host.connect(agent, self.handles[peer], size)
        for handle in self.handles.values():
            self._await(handle, RealmState.READY)
        self.forwarder.connect(self.ui_socket)

    def _agent_links(self) -> list[tuple[Role, int]]:
        links = [(p, s) for p, s in self.specs[Role.AGENT].region_links if p in self.specs]
        return sorted(links, key=lambda ps: ps[0] is not Role.MODEL)

    def _await(self, handle: RealmHandle, state: RealmState) -> None:
        try:
            self.host.await_state(handle, state, self.config.ready_timeout)
        except RealmError as exc:
            owner = self._owner_failure(handle.role)
            if owner:
                raise type(exc)(f"{exc} (owner: {owner})") from exc
            raise

    def _start_owner(self, role: Role, anchor: TrustAnchor) -> str:
        override = self.config.owner_expectations.get(role)
        if override:
            expected = dict(anchor.expected_measurements)
            expected.update({r: measure_image(i) for r, i in override.items()})
            anchor = TrustAnchor(anchor.platform_verify_key, expected)
        path = os.path.join(self.host.workdir, f"owner-{role.value}.sock")
        job = {
            "role": role.value, "socket": path, "anchor": anchor.to_bytes().hex(),
            "assets": [[p.kind.value, p.body.hex()] for p in _payloads(self.config, role)],
            "accept_timeout": self.config.ready_timeout,
        }
        proc = subprocess.Popen([sys.executable, "-m", "agentee.owner"], stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, text=True)
        proc.stdin.write(json.dumps(job))
        proc.stdin.close()
        line = proc.stdout.readline().strip()
        if line != "LISTENING":
            raise RealmError(f"{role.value} owner failed to start: {line or proc.wait()}")
        self._owners[role] = proc
        return path

    def _owner_failure(self, role: Role) -> str | None:
        proc = self._owners.get(role)
        if proc is None or proc.poll() is None:
            return None
        line = proc.stdout.readline().strip()
        return line if line.startswith("FAILED") else None

    def _check_owner(self, role: Role) -> None:
        proc = self._owners[role]
        try:
            proc.wait(self.config.ready_timeout)
        except subprocess.TimeoutExpired:
            raise RealmError(f"{role.value} owner did not finish provisioning") from None
        line = proc.stdout.readline().strip()
        if not line.startswith("PROVISIONED"):
            raise RealmError(f"{role.value} owner: {line}")

    # ----------------------------------------------------------- requests

    def chat(self, text: str) -> Reply:
        return self.forwarder.chat(text)

    def plan(self, *args, **kwargs) -> Reply:
        return self.forwarder.plan(*args, **kwargs)

    @property
    def region_names(self) -> list[str]:
        return self.host.region_names if self.host else []

    def kill(self, role: Role | str) -> None:
        self.host.kill(self.handles[Role(role)])

    # ------------------------------------------------------------ teardown

    def stop(self) -> None:
        self.forwarder.quit()
        if self.host is not None:
            agent = self.handles.get(Role.AGENT)
            if agent is not None:
                # after QUIT the agent shuts its peers down and exits by itself
                try:
                    self.host.await_state(agent, RealmState.TERMINATED, timeout=2.0)
                except AgenteeError:
                    pass
            self.host.shutdown()
            self.host = None
        for proc in self._owners.values():
            if proc.poll() is None:
                proc.kill()
            proc.wait()
            proc.stdout.close()
        self._owners.clear()

    def __enter__(self) -> "Pipeline":
        return self.start() if self.host is None else self

    def __exit__(self, *exc) -> None:
        self.stop()


def wait_until(predicate, timeout: float, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
