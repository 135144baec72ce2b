"""Asset owner process: ``python -m agentee.owner`` with a JSON job on stdin.

The job names the realm role, the socket to listen on, the pinned trust anchor
and the assets to deliver. The owner serves exactly one realm connection and
reports ``LISTENING`` then ``PROVISIONED <n>`` or ``FAILED <reason>`` on stdout.
"""

from __future__ import annotations

import json
import socket
import sys

from .attestation import OwnerSession, ProvisioningPayload, TrustAnchor
from .errors import AgenteeError


def serve_one(role: str, path: str, anchor: TrustAnchor, payloads: list[ProvisioningPayload],
              accept_timeout: float = 30.0, announce=print) -> int:
    listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    listener.bind(path)
    listener.listen(1)
    listener.settimeout(accept_timeout)
    announce("LISTENING")
    conn, _ = listener.accept()
    listener.close()
    conn.settimeout(accept_timeout)
    with conn:
        session = OwnerSession(conn, role, anchor)
        session.verify()
        session.send_anchor(anchor)
        session.declare([p.kind for p in payloads])
        for payload in payloads:
            session.provision(payload)
        session.finish()
    return len(payloads)


def main() -> int:
    job = json.load(sys.stdin)
    anchor = TrustAnchor.from_bytes(bytes.fromhex(job["anchor"]))
    payloads = [ProvisioningPayload(kind, bytes.fromhex(body)) for kind, body in job["assets"]]

    def announce(line: str) -> None:
        print(line, flush=True)

    try:
        count = serve_one(job["role"], job["socket"], anchor, payloads,
                          job.get("accept_timeout", 30.0), announce)
    except (AgenteeError, OSError) as exc:
        announce(f"FAILED {type(exc).__name__}: {exc}")
        return 2
    announce(f"PROVISIONED {count}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
