"""Traffic capture to classic pcap files.

Harness traffic is recorded as application-level events and wrapped in
synthesized Ethernet/IPv4/TCP (or UDP) headers so standard tools can read the
files. Device-side MAC addresses start with ``02:d0``, harness-side ones with
``02:a0``, which is how :func:`read_pcap` recovers the direction.
"""

from __future__ import annotations

import ipaddress
import json
import os
import queue
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

PCAP_MAGIC = 0xA1B2C3D4
PCAP_VERSION = (2, 4)
LINKTYPE_ETHERNET = 1
SNAPLEN = 262144
GLOBAL_HEADER = struct.Struct("<IHHiIII")
PACKET_HEADER = struct.Struct("<IIII")
ETH_LEN, IPV4_LEN, TCP_LEN, UDP_LEN = 14, 20, 20, 8

TO_DEVICE = "to_device"
FROM_DEVICE = "from_device"


class CaptureFormatError(ValueError):
    def __init__(self, offset: int, msg: str) -> None:
        super().__init__(f"offset {offset}: {msg}")
        self.offset = offset


@dataclass(frozen=True)
class RotationPolicy:
    max_bytes: int | None = 64 * 1024 * 1024
    max_duration: float | None = 600e6  # us

    def __post_init__(self) -> None:
        if self.max_bytes is None and self.max_duration is None:
            raise ValueError("rotation policy needs at least one finite limit")
        if self.max_bytes is not None and self.max_bytes <= GLOBAL_HEADER.size:
            raise ValueError("max_bytes must exceed the pcap global header size")
        if self.max_duration is not None and self.max_duration <= 0:
            raise ValueError("max_duration must be > 0")


@dataclass(frozen=True)
class CaptureRecord:
    timestamp: tuple[int, int]  # (seconds, microseconds)
    src: tuple[str, int]
    dst: tuple[str, int]
    direction: str
    payload: bytes
    transport: str = "tcp"

    @property
    def time_us(self) -> int:
        return self.timestamp[0] * 1_000_000 + self.timestamp[1]

    @staticmethod
    def split_time(t_us: float) -> tuple[int, int]:
        return divmod(int(round(t_us)), 1_000_000)


def _mac(addr: str, device_side: bool) -> bytes:
    return (b"\x02\xd0" if device_side else b"\x02\xa0") + ipaddress.IPv4Address(addr).packed


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


class _FrameBuilder:
    def __init__(self) -> None:
        self._ip_id = 0
        self._seq: dict[tuple, int] = {}

    def build(self, rec: CaptureRecord) -> bytes:
        src_ip = ipaddress.IPv4Address(rec.src[0]).packed
        dst_ip = ipaddress.IPv4Address(rec.dst[0]).packed
        if rec.transport == "tcp":
            flow = (rec.src, rec.dst)
            seq = self._seq.get(flow, 1)
            self._seq[flow] = (seq + len(rec.payload)) & 0xFFFFFFFF
            ack = self._seq.get((rec.dst, rec.src), 1)
            l4 = struct.pack("!HHIIBBHHH", rec.src[1], rec.dst[1], seq, ack, (TCP_LEN // 4) << 4,
                             0x18, 65535, 0, 0)
            proto = 6
        elif rec.transport == "udp":
            l4 = struct.pack("!HHHH", rec.src[1], rec.dst[1], UDP_LEN + len(rec.payload), 0)
            proto = 17
        else:
            raise ValueError(f"unknown transport {rec.transport!r}")
        seg = l4 + rec.payload
        pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, proto, len(seg))
        csum = _checksum(pseudo + seg)
        off = 16 if proto == 6 else 6
        seg = seg[:off] + struct.pack("!H", csum) + seg[off + 2:]
        self._ip_id = (self._ip_id + 1) & 0xFFFF
        ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, IPV4_LEN + len(seg), self._ip_id, 0x4000, 64, proto, 0,
                         src_ip, dst_ip)
        ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
        from_dev = rec.direction == FROM_DEVICE
        eth = _mac(rec.dst[0], not from_dev) + _mac(rec.src[0], from_dev) + b"\x08\x00"
        return eth + ip + seg


class CaptureWriter:
    """Rotating pcap writer. `record` is synchronous; `enqueue` is non-blocking
    once `start_background` has been called."""

    def __init__(self, directory: Path, policy: RotationPolicy, start_us: float,
                 epoch_offset_us: int = 0, buffer_size: int = 65536) -> None:
        self.directory = directory
        self.policy = policy
        self.epoch_offset_us = epoch_offset_us
        self.files: list[str] = []
        self.records = 0
        self.dropped = 0
        self.monotonic = True
        self.closed = False
        self._builder = _FrameBuilder()
        self._lock = threading.Lock()
        self._fh = None
        self._file_bytes = 0
        self._file_packets = 0
        self._file_start = 0
        self._last_ts: int | None = None
        self._queue: queue.Queue | None = None
        self._buffer_size = buffer_size
        self._thread: threading.Thread | None = None
        self._open_file(int(round(start_us)) + epoch_offset_us)

    def _open_file(self, unix_us: int) -> None:
        name = f"capture-{unix_us}.pcap"
        k = 1
        while (self.directory / name).exists() or name in self.files:
            name = f"capture-{unix_us}-{k}.pcap"
            k += 1
        self._fh = open(self.directory / name, "wb")
        self._fh.write(GLOBAL_HEADER.pack(PCAP_MAGIC, *PCAP_VERSION, 0, 0, SNAPLEN, LINKTYPE_ETHERNET))
        self.files.append(name)
        self._file_bytes = GLOBAL_HEADER.size
        self._file_packets = 0
        self._file_start = unix_us
        self._last_ts = None

    def record(self, rec: CaptureRecord) -> None:
        frame = self._builder.build(rec)
        size = PACKET_HEADER.size + len(frame)
        with self._lock:
            if self.closed:
                self.dropped += 1
                return
            ts = rec.time_us
            p = self.policy
            if self._file_packets and (
                (p.max_bytes is not None and self._file_bytes + size > p.max_bytes)
                or (p.max_duration is not None and ts - self._file_start >= p.max_duration)
            ):
                self._fh.close()
                self._open_file(ts)
            if self._last_ts is not None and ts < self._last_ts:
                self.monotonic = False
            self._last_ts = ts if self._last_ts is None else max(ts, self._last_ts)
            sec, usec = rec.timestamp
            self._fh.write(PACKET_HEADER.pack(sec, usec, len(frame), len(frame)))
            self._fh.write(frame)
            self._file_bytes += size
            self._file_packets += 1
            self.records += 1

    def record_exchange(self, t_us: float, peer_addr: str, device, port: int, payload: bytes,
                        to_device: bool, *, peer_port: int = 49152, transport: str = "tcp") -> None:
        """Record one message between a harness peer and a device port at clock time `t_us`."""
        ts = CaptureRecord.split_time(t_us + self.epoch_offset_us)
        dev_ep = (getattr(device, "ip", "192.168.0.10"), port)
        peer_ep = (peer_addr, peer_port)
        if to_device:
            rec = CaptureRecord(ts, peer_ep, dev_ep, TO_DEVICE, bytes(payload), transport)
        else:
            rec = CaptureRecord(ts, dev_ep, peer_ep, FROM_DEVICE, bytes(payload), transport)
        if self._queue is not None:
            self.enqueue(rec)
        else:
            self.record(rec)

    # background mode

    def start_background(self) -> None:
        self._queue = queue.Queue(self._buffer_size)
        self._thread = threading.Thread(target=self._drain, daemon=True, name="capture-writer")
        self._thread.start()

    def enqueue(self, rec: CaptureRecord) -> None:
        assert self._queue is not None
        try:
            self._queue.put_nowait(rec)
        except queue.Full:
            with self._lock:
                self.dropped += 1

    def _drain(self) -> None:
        assert self._queue is not None
        while True:
            rec = self._queue.get()
            if rec is None:
                return
            try:
                self.record(rec)
            except OSError:
                with self._lock:
                    self.dropped += 1

    def manifest(self) -> dict:
        return {"files": list(self.files), "records": self.records, "dropped": self.dropped,
                "monotonic": self.monotonic}

    def close(self) -> dict:
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join()
            self._thread = None
            self._queue = None
        with self._lock:
            if not self.closed:
                self._fh.close()
                self.closed = True
        manifest = self.manifest()
        (self.directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest


def open_capture(directory: str | Path, policy: RotationPolicy | None = None, *,
                 start_us: float = 0.0, epoch_offset_us: int = 0) -> CaptureWriter:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"capture directory {directory} does not exist")
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"capture directory {directory} is not writable")
    return CaptureWriter(directory, policy or RotationPolicy(), start_us, epoch_offset_us)


def read_pcap(path: str | Path) -> list[CaptureRecord]:
    data = Path(path).read_bytes()
    if len(data) < GLOBAL_HEADER.size:
        raise CaptureFormatError(0, "file shorter than pcap global header")
    magic = struct.unpack_from("<I", data)[0]
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == 0xD4C3B2A1:
        endian = ">"
    else:
        raise CaptureFormatError(0, f"bad magic 0x{magic:08x}")
    _m, major, minor, _tz, _sig, _snap, linktype = struct.unpack_from(endian + "IHHiIII", data)
    if (major, minor) != PCAP_VERSION or linktype != LINKTYPE_ETHERNET:
        raise CaptureFormatError(4, f"unsupported version {major}.{minor} / linktype {linktype}")
    out = []
    off = GLOBAL_HEADER.size
    while off < len(data):
        if off + PACKET_HEADER.size > len(data):
            raise CaptureFormatError(off, "truncated packet header")
        sec, usec, incl, _orig = struct.unpack_from(endian + "IIII", data, off)
        body_off = off + PACKET_HEADER.size
        if body_off + incl > len(data):
            raise CaptureFormatError(off, f"truncated packet: {incl} bytes declared, {len(data) - body_off} left")
        out.append(_parse_frame(data[body_off:body_off + incl], (sec, usec), off))
        off = body_off + incl
    return out


def _parse_frame(frame: bytes, ts: tuple[int, int], off: int) -> CaptureRecord:
    if len(frame) < ETH_LEN + IPV4_LEN or frame[12:14] != b"\x08\x00":
        raise CaptureFormatError(off, "not an Ethernet/IPv4 frame")
    direction = FROM_DEVICE if frame[6:8] == b"\x02\xd0" else TO_DEVICE
    ip = frame[ETH_LEN:]
    ihl = (ip[0] & 0x0F) * 4
    total = struct.unpack_from("!H", ip, 2)[0]
    proto = ip[9]
    src = str(ipaddress.IPv4Address(ip[12:16]))
    dst = str(ipaddress.IPv4Address(ip[16:20]))
    l4 = ip[ihl:total]
    if proto == 6:
        sport, dport = struct.unpack_from("!HH", l4)
        payload = l4[(l4[12] >> 4) * 4:]
        transport = "tcp"
    elif proto == 17:
        sport, dport = struct.unpack_from("!HH", l4)
        payload = l4[UDP_LEN:]
        transport = "udp"
    else:
        raise CaptureFormatError(off, f"unsupported IP protocol {proto}")
    return CaptureRecord(ts, (src, sport), (dst, dport), direction, bytes(payload), transport)
