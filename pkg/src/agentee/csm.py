"""Shared-memory regions split into half-duplex SPSC ring channels.

Region layout (all integers big-endian)::

    page 0   "ACSR" | 0x01 | channel-count (2) | capacity (4) | direction map (1/channel)
             offset 256: pid A (4) | pid B (4) | closed A (1) | closed B (1)
    channel i at 4096 + i * (64 + capacity):
             head (8) | tail (8) | capacity (4) | pad to 64 | data[capacity]

Each ring carries frames::

    "ACSM" | 0x01 | channel | flags | reserved | seq (8) | payload-length (4) | payload
"""

from __future__ import annotations

import ctypes
import errno
import os
import select
import struct
import threading
import time
from dataclasses import dataclass
from multiprocessing import shared_memory
from typing import Callable, NamedTuple

from .errors import (
    CorruptFrame,
    EndpointError,
    HeaderVersionMismatch,
    LayoutOverflow,
    OversizedMessage,
    PeerClosed,
    TransportError,
)

PAGE = 4096
MIN_REGION_SIZE = 4 * PAGE
RING_STATE_SIZE = 64
FRAME_HEADER_SIZE = 20
DEFAULT_CHANNELS = 4

REGION_MAGIC = b"ACSR"
FRAME_MAGIC = b"ACSM"
VERSION = 1
FLAG_SEALED = 0x01

A_TO_B = 0
B_TO_A = 1

BACKOFF_START = 1e-6
BACKOFF_CAP = 1e-3
LIVENESS_INTERVAL = 0.05

_REGION_HDR = struct.Struct(">4sBHI")
_PEER_INFO_OFFSET = 256
_PEER_INFO = struct.Struct(">IIBB")
_FRAME_HDR = struct.Struct(">4sBBBBQI")
_U64_BE = ctypes.c_uint64.__ctype_be__


def region_name(run_id: str, realm_a: str, realm_b: str) -> str:
    return f"agentee.{run_id}.{realm_a}.{realm_b}"


# ---------------------------------------------------------------- regions

# guards the resource-tracker patch below against concurrent creates in other threads
_TRACKER_LOCK = threading.Lock()


def _attach_untracked(name: str) -> shared_memory.SharedMemory:
    # Attachers must not register with the resource tracker, or the segment
    # is unlinked when the attaching process exits.
    try:
        return shared_memory.SharedMemory(name=name, track=False)
    except TypeError:
        from multiprocessing import resource_tracker

        with _TRACKER_LOCK:
            orig = resource_tracker.register
            resource_tracker.register = lambda *a, **k: None
            try:
                return shared_memory.SharedMemory(name=name)
            finally:
                resource_tracker.register = orig


class Region:
    """A named OS shared-memory object."""

    def __init__(self, shm: shared_memory.SharedMemory, owner: bool):
        self._shm = shm
        self.owner = owner
        self.name = shm.name.lstrip("/")
        self.size = shm.size
        self.buf = shm.buf

    @classmethod
    def create(cls, name: str, size: int) -> "Region":
        with _TRACKER_LOCK:
            shm = shared_memory.SharedMemory(name=name, create=True, size=size)
        shm.buf[:size] = bytes(size)
        return cls(shm, owner=True)

    @classmethod
    def attach(cls, name: str) -> "Region":
        return cls(_attach_untracked(name), owner=False)

    def close(self) -> None:
        self.buf = None
        try:
            self._shm.close()
        except BufferError:
            pass  # ctypes views still alive; mapping goes away with the process

    def unlink(self) -> None:
        try:
            self._shm.unlink()
        except FileNotFoundError:
            pass


# ----------------------------------------------------------------- layout

@dataclass(frozen=True)
class ChannelLayout:
    channel_count: int
    capacity: int
    directions: tuple[int, ...]

    def channel_offset(self, index: int) -> int:
        return PAGE + index * (RING_STATE_SIZE + self.capacity)

    def data_offset(self, index: int) -> int:
        return self.channel_offset(index) + RING_STATE_SIZE

    @property
    def max_payload(self) -> int:
        return self.capacity - FRAME_HEADER_SIZE

    def header_bytes(self) -> bytes:
        return _REGION_HDR.pack(REGION_MAGIC, VERSION, self.channel_count,
                                self.capacity) + bytes(self.directions)


def default_directions(channel_count: int) -> tuple[int, ...]:
    return tuple(i % 2 for i in range(channel_count))


def _check_layout(size: int, channel_count: int, capacity: int,
                  directions: tuple[int, ...]) -> None:
    if channel_count < 2 or channel_count % 2:
        raise ValueError(f"channel count must be even and >= 2, got {channel_count}")
    if capacity < PAGE or capacity & (capacity - 1):
        raise ValueError(f"capacity must be a power of two >= {PAGE}, got {capacity}")
    if len(directions) != channel_count or any(d not in (A_TO_B, B_TO_A) for d in directions):
        raise ValueError("direction map must give 0 or 1 for every channel")
    if directions[0] != A_TO_B or directions[1] != B_TO_A:
        raise ValueError("channels 0 and 1 are the A->B / B->A bootstrap pair")
    need = channel_count * (capacity + RING_STATE_SIZE)
    if need > size - PAGE:
        raise LayoutOverflow(f"{channel_count} x ({capacity} + {RING_STATE_SIZE}) bytes "
                             f"exceeds {size - PAGE} usable bytes")


def read_layout(region: Region) -> ChannelLayout:
    magic, version, count, capacity = _REGION_HDR.unpack_from(region.buf, 0)
    if magic != REGION_MAGIC or version != VERSION:
        raise HeaderVersionMismatch(f"region {region.name}: magic={magic!r} version={version}")
    off = _REGION_HDR.size
    directions = tuple(region.buf[off:off + count])
    layout = ChannelLayout(count, capacity, directions)
    _check_layout(region.size, count, capacity, directions)
    return layout


def partition_region(region: Region, channel_count: int = DEFAULT_CHANNELS,
                     capacity: int | None = None,
                     directions: tuple[int, ...] | None = None) -> ChannelLayout:
    """Write the region header once; re-partitioning with equal arguments is a no-op."""
    if capacity is None:
        capacity = largest_capacity(region.size, channel_count)
    directions = tuple(directions) if directions is not None else default_directions(channel_count)
    _check_layout(region.size, channel_count, capacity, directions)
    layout = ChannelLayout(channel_count, capacity, directions)

    magic = bytes(region.buf[0:4])
    if magic == REGION_MAGIC:
        existing = read_layout(region)
        if existing != layout:
            raise TransportError(f"region {region.name} already partitioned as {existing}")
        return existing
    if magic != bytes(4):
        raise HeaderVersionMismatch(f"region {region.name} holds foreign header {magic!r}")

    for i in range(channel_count):
        off = layout.channel_offset(i)
        region.buf[off:off + RING_STATE_SIZE] = bytes(RING_STATE_SIZE)
        struct.pack_into(">I", region.buf, off + 16, capacity)
    hdr = layout.header_bytes()
    # magic last, so a concurrent reader never sees a half-written header
    region.buf[4:len(hdr)] = hdr[4:]
    region.buf[0:4] = hdr[:4]
    return layout


def largest_capacity(region_size: int, channel_count: int) -> int:
    per = (region_size - PAGE) // channel_count - RING_STATE_SIZE
    if per < PAGE:
        raise LayoutOverflow(f"region of {region_size} bytes cannot hold {channel_count} channels")
    return 1 << (per.bit_length() - 1)


# --------------------------------------------------------------- doorbells

class Doorbell:
    """Named FIFO used to wake a waiter instead of polling at the backoff cap."""

    def __init__(self, path: str):
        self.path = path
        self.fd = os.open(path, os.O_RDWR | os.O_NONBLOCK)

    @staticmethod
    def make(path: str) -> None:
        try:
            os.mkfifo(path, 0o600)
        except FileExistsError:
            pass

    def ring(self) -> None:
        try:
            os.write(self.fd, b"\x01")
        except BlockingIOError:
            pass  # pipe already full of pending wakeups
        except OSError as exc:
            if exc.errno != errno.EBADF:
                raise

    def drain(self) -> None:
        try:
            while os.read(self.fd, 4096):
                pass
        except BlockingIOError:
            pass

    def wait(self, timeout: float) -> None:
        select.select([self.fd], [], [], max(timeout, 0.0))

    def close(self) -> None:
        try:
            os.close(self.fd)
        except OSError:
            pass


def doorbell_paths(directory: str, region: str, channel: int) -> tuple[str, str]:
    base = os.path.join(directory, f"{region}.{channel}")
    return base + ".data", base + ".space"


def make_doorbells(directory: str, region: str, channel_count: int) -> None:
    for ch in range(channel_count):
        for path in doorbell_paths(directory, region, ch):
            Doorbell.make(path)


# ------------------------------------------------------------------ frames

class Frame(NamedTuple):
    header: bytes
    channel: int
    flags: int
    seq: int
    payload: bytes


def frame_header(channel: int, flags: int, seq: int, length: int) -> bytes:
    return _FRAME_HDR.pack(FRAME_MAGIC, VERSION, channel, flags, 0, seq, length)


def parse_frame_header(raw: bytes) -> tuple[int, int, int, int]:
    magic, version, channel, flags, _reserved, seq, length = _FRAME_HDR.unpack(raw)
    if magic != FRAME_MAGIC:
        raise CorruptFrame(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise CorruptFrame(f"unsupported frame version {version}")
    return channel, flags, seq, length


# ------------------------------------------------------------------- rings

def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:
        with open(f"/proc/{pid}/stat") as fh:
            state = fh.read().rsplit(")", 1)[1].split()[0]
    except (OSError, IndexError):
        return True
    return state not in ("Z", "X")


class _Ring:
    def __init__(self, region: Region, layout: ChannelLayout, index: int,
                 peer_gone: Callable[[], bool], data_bell: Doorbell | None,
                 space_bell: Doorbell | None):
        off = layout.channel_offset(index)
        self.index = index
        self.capacity = layout.capacity
        self._mask = layout.capacity - 1
        self._head = _U64_BE.from_buffer(region.buf, off)
        self._tail = _U64_BE.from_buffer(region.buf, off + 8)
        self._data = region.buf[off + RING_STATE_SIZE: off + RING_STATE_SIZE + layout.capacity]
        self._peer_gone = peer_gone
        self._data_bell = data_bell
        self._space_bell = space_bell
        self.closed = False

    @property
    def head(self) -> int:
        return self._head.value

    @property
    def tail(self) -> int:
        return self._tail.value

    def _copy_in(self, pos: int, data: bytes) -> None:
        start = pos & self._mask
        first = min(len(data), self.capacity - start)
        self._data[start:start + first] = data[:first]
        if first < len(data):
            self._data[0:len(data) - first] = data[first:]

    def _copy_out(self, pos: int, n: int) -> bytes:
        start = pos & self._mask
        first = min(n, self.capacity - start)
        out = bytes(self._data[start:start + first])
        if first < n:
            out += bytes(self._data[0:n - first])
        return out

    def _wait(self, ready: Callable[[], bool], bell: Doorbell | None,
              timeout: float | None, what: str) -> None:
        if ready():
            return
        deadline = None if timeout is None else time.monotonic() + timeout
        delay = BACKOFF_START
        next_liveness = time.monotonic() + LIVENESS_INTERVAL
        while True:
            if self.closed:
                raise PeerClosed(f"channel {self.index} endpoint closed")
            now = time.monotonic()
            if now >= next_liveness:
                next_liveness = now + LIVENESS_INTERVAL
                if self._peer_gone():
                    if ready():
                        return
                    raise PeerClosed(f"peer gone while waiting for {what} on channel {self.index}")
            if deadline is not None and now >= deadline:
                raise TimeoutError(f"timed out waiting for {what} on channel {self.index}")
            if delay < BACKOFF_CAP or bell is None:
                time.sleep(delay)
                delay = min(delay * 2, BACKOFF_CAP)
            else:
                bell.drain()
                if ready():
                    return
                limit = LIVENESS_INTERVAL if deadline is None else min(LIVENESS_INTERVAL, deadline - now)
                bell.wait(limit)
            if ready():
                return


class Producer(_Ring):
    """Write end of one channel. Exactly one per channel."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.next_seq = 0

    @property
    def max_payload(self) -> int:
        return self.capacity - FRAME_HEADER_SIZE

    def send(self, message: bytes, flags: int = 0, timeout: float | None = None) -> None:
        if len(message) > self.max_payload:
            raise OversizedMessage(f"{len(message)} bytes exceeds max payload {self.max_payload}")
        header = frame_header(self.index, flags, self.next_seq, len(message))
        self.write_frame(header + message, timeout=timeout)

    def write_frame(self, frame: bytes, timeout: float | None = None) -> None:
        """Append a fully formed frame and consume one sequence number."""
        self._write_raw(frame, timeout)
        self.next_seq += 1

    def _write_raw(self, frame: bytes, timeout: float | None = None) -> None:
        n = len(frame)
        if n > self.capacity:
            raise OversizedMessage(f"frame of {n} bytes exceeds ring capacity {self.capacity}")
        if self._peer_gone():
            raise PeerClosed(f"consumer of channel {self.index} is gone")
        head = self._head.value
        self._wait(lambda: head + n - self._tail.value <= self.capacity,
                   self._space_bell, timeout, "ring space")
        self._copy_in(head, frame)
        self._head.value = head + n
        if self._data_bell is not None:
            self._data_bell.ring()


class Consumer(_Ring):
    """Read end of one channel. Exactly one per channel."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.expected_seq = 0

    def poll(self) -> bool:
        return self._head.value != self._tail.value

    def recv(self, timeout: float | None = None) -> bytes:
        frame = self.recv_frame(timeout)
        if frame.flags & FLAG_SEALED:
            raise CorruptFrame(f"sealed frame on plain read of channel {self.index}")
        return frame.payload

    def recv_frame(self, timeout: float | None = None, check_seq: bool = True) -> Frame:
        tail = self._tail.value
        self._wait(lambda: self._head.value - tail >= FRAME_HEADER_SIZE,
                   self._data_bell, timeout, "frame")
        head = self._head.value
        if head - tail > self.capacity:
            raise CorruptFrame(f"ring counters out of range: head={head} tail={tail}")
        raw = self._copy_out(tail, FRAME_HEADER_SIZE)
        try:
            channel, flags, seq, length = parse_frame_header(raw)
        except CorruptFrame:
            self._release(head)  # stream position is lost; drop everything pending
            raise
        total = FRAME_HEADER_SIZE + length
        if length > self.capacity - FRAME_HEADER_SIZE or head - tail < total:
            self._release(head)
            raise CorruptFrame(f"frame length {length} inconsistent with ring contents")
        payload = self._copy_out(tail + FRAME_HEADER_SIZE, length)
        self._release(tail + total)
        if channel != self.index:
            raise CorruptFrame(f"frame for channel {channel} read on channel {self.index}")
        if check_seq:
            if seq != self.expected_seq:
                raise CorruptFrame(f"expected seq {self.expected_seq}, got {seq}")
            self.expected_seq += 1
        return Frame(raw, channel, flags, seq, payload)

    def _release(self, new_tail: int) -> None:
        self._tail.value = new_tail
        if self._space_bell is not None:
            self._space_bell.ring()


# ------------------------------------------------------------- channel set

class ChannelSet:
    """One side's view of a partitioned region.

    Side ``"A"`` may only produce on A->B channels and consume B->A ones; side
    ``"B"`` the reverse. Asking for the wrong end raises ``EndpointError``.
    """

    def __init__(self, region: Region, side: str, doorbell_dir: str | None = None,
                 record_pid: bool = True):
        if side not in ("A", "B"):
            raise ValueError(f"side must be 'A' or 'B', got {side!r}")
        self.region = region
        self.side = side
        self.layout = read_layout(region)
        self.doorbell_dir = doorbell_dir
        self._endpoints: dict[int, _Ring] = {}
        self._bells: list[Doorbell] = []
        if record_pid:
            self._set_peer_info(pid=os.getpid())
        self._last_pid_check = 0.0
        self._peer_dead = False

    @property
    def region_id(self) -> str:
        return self.region.name

    @property
    def peer_side(self) -> str:
        return "B" if self.side == "A" else "A"

    def _info(self) -> tuple[int, int, int, int]:
        return _PEER_INFO.unpack_from(self.region.buf, _PEER_INFO_OFFSET)

    def _set_peer_info(self, pid: int | None = None, closed: int | None = None) -> None:
        pid_a, pid_b, closed_a, closed_b = self._info()
        if self.side == "A":
            pid_a = pid_a if pid is None else pid
            closed_a = closed_a if closed is None else closed
        else:
            pid_b = pid_b if pid is None else pid
            closed_b = closed_b if closed is None else closed
        _PEER_INFO.pack_into(self.region.buf, _PEER_INFO_OFFSET, pid_a, pid_b, closed_a, closed_b)

    def peer_pid(self) -> int:
        pid_a, pid_b, _, _ = self._info()
        return pid_b if self.side == "A" else pid_a

    def peer_gone(self) -> bool:
        if self._peer_dead:
            return True
        _, _, closed_a, closed_b = self._info()
        if (closed_b if self.side == "A" else closed_a):
            self._peer_dead = True
            return True
        now = time.monotonic()
        if now - self._last_pid_check >= LIVENESS_INTERVAL:
            self._last_pid_check = now
            pid = self.peer_pid()
            if pid and pid != os.getpid() and not _pid_alive(pid):
                self._peer_dead = True
        return self._peer_dead

    def _owns_producer(self, index: int) -> bool:
        if not 0 <= index < self.layout.channel_count:
            raise EndpointError(f"no channel {index} in region {self.region_id}")
        d = self.layout.directions[index]
        return (d == A_TO_B) == (self.side == "A")

    def _make(self, cls, index: int):
        if not 0 <= index < self.layout.channel_count:
            raise EndpointError(f"no channel {index} in region {self.region_id}")
        data_bell = space_bell = None
        if self.doorbell_dir is not None:
            data_path, space_path = doorbell_paths(self.doorbell_dir, self.region_id, index)
            data_bell, space_bell = Doorbell(data_path), Doorbell(space_path)
            self._bells += [data_bell, space_bell]
        return cls(self.region, self.layout, index, self.peer_gone, data_bell, space_bell)

    def producer(self, index: int) -> Producer:
        if not self._owns_producer(index):
            raise EndpointError(f"side {self.side} cannot produce on channel {index}")
        ep = self._endpoints.get(index)
        if ep is None:
            ep = self._endpoints[index] = self._make(Producer, index)
        return ep

    def consumer(self, index: int) -> Consumer:
        if self._owns_producer(index):
            raise EndpointError(f"side {self.side} cannot consume channel {index}")
        ep = self._endpoints.get(index)
        if ep is None:
            ep = self._endpoints[index] = self._make(Consumer, index)
        return ep

    def pair(self, index: int) -> "Duplex":
        """Duplex over channels (2k, 2k+1) where ``index`` is either of them."""
        base = index - index % 2
        if self.side == "A":
            return Duplex(self.producer(base), self.consumer(base + 1))
        return Duplex(self.producer(base + 1), self.consumer(base))

    def bootstrap(self) -> "Duplex":
        return self.pair(0)

    def mark_closed(self) -> None:
        """Announce closure to the peer without dropping the mapping."""
        if self.region.buf is not None:
            self._set_peer_info(closed=1)

    def close(self) -> None:
        if self.region.buf is None:
            return
        self.mark_closed()
        for ep in self._endpoints.values():
            ep.closed = True
            for bell in (ep._data_bell, ep._space_bell):
                if bell is not None:
                    bell.ring()
        self.release()

    def release(self) -> None:
        """Drop the mapping without announcing closure."""
        for ep in self._endpoints.values():
            ep._head = ep._tail = ep._data = None
        self._endpoints.clear()
        for bell in self._bells:
            bell.close()
        self._bells.clear()
        self.region.close()


class Duplex:
    """A producer/consumer pair presenting plain ``send``/``recv``."""

    sealed = False

    def __init__(self, producer: Producer, consumer: Consumer):
        self.producer = producer
        self.consumer = consumer

    @property
    def max_message(self) -> int:
        return self.producer.max_payload

    def send(self, message: bytes, timeout: float | None = None) -> None:
        self.producer.send(message, timeout=timeout)

    def recv(self, timeout: float | None = None) -> bytes:
        return self.consumer.recv(timeout)


def wait_any(consumers, timeout: float) -> None:
    """Block until any consumer has a frame, a doorbell rings, or ``timeout`` passes."""
    if not consumers:
        time.sleep(timeout)
        return
    bells = [c._data_bell for c in consumers if c._data_bell is not None]
    for bell in bells:
        bell.drain()
    if any(c.poll() for c in consumers):
        return
    if bells and len(bells) == len(consumers):
        select.select([b.fd for b in bells], [], [], timeout)
    else:
        time.sleep(min(timeout, BACKOFF_CAP))
