"""Shared-directory exchange standing in for a cloud-synced folder.

Each writer owns ``<dir>/<writer_id>.latest``, a two-line text record::

    CSLF1 <writer_id> <write_seq> <write_sim_time_us>
    <base64 of concatenated length-prefixed frames>

Publishing stages the record in a hidden temp file, then (after the injected
sync delay) renames it over ``.latest`` while holding ``<writer_id>.lock``.
The file holds the latest state only; a watcher that misses versions sees a
gap in ``write_seq`` and counts it.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from ..core_time import Clock, LatencyLedger, Leg, Scheduler
from .frame import Frame, FrameBuffer, FrameDecodeError, encode_frame
from .latency import LatencyModel, stream_rng

log = logging.getLogger(__name__)

HEADER_TAG = "CSLF1"
LATEST_SUFFIX = ".latest"
LOCK_SUFFIX = ".lock"
CORRUPT_SUFFIX = ".corrupt"


class PublishConflict(RuntimeError):
    """The writer lock stayed held for every retry."""


class CorruptRecord(ValueError):
    pass


@dataclass(frozen=True)
class SharedFileRecord:
    writer_id: str
    write_seq: int
    write_sim_time: int
    frames: tuple[Frame, ...]


def encode_record(record: SharedFileRecord) -> bytes:
    if not record.writer_id or any(c.isspace() for c in record.writer_id):
        raise ValueError("writer_id must be a non-empty token without whitespace")
    blob = b"".join(encode_frame(f) for f in record.frames)
    header = f"{HEADER_TAG} {record.writer_id} {record.write_seq} {record.write_sim_time}\n"
    return header.encode("ascii") + base64.b64encode(blob) + b"\n"


def decode_record(data: bytes) -> SharedFileRecord:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise CorruptRecord("record is not ASCII") from exc
    lines = text.split("\n")
    if len(lines) != 3 or lines[2] != "":
        raise CorruptRecord("record must be exactly two newline-terminated lines")
    parts = lines[0].split(" ")
    if len(parts) != 4 or parts[0] != HEADER_TAG:
        raise CorruptRecord(f"bad header {lines[0][:60]!r}")
    try:
        seq, t = int(parts[2]), int(parts[3])
        blob = base64.b64decode(lines[1], validate=True)
    except ValueError as exc:
        raise CorruptRecord(str(exc)) from exc
    buf = FrameBuffer()
    frames = buf.feed(blob)
    if buf.decode_errors or buf.pending_bytes:
        raise CorruptRecord(f"payload does not parse: {buf.last_error}")
    return SharedFileRecord(parts[1], seq, t, tuple(frames))


def _header_seq(line: bytes) -> int | None:
    parts = line.split(b" ")
    if len(parts) != 4 or parts[0] != HEADER_TAG.encode():
        return None
    try:
        return int(parts[2])
    except ValueError:
        return None


def latest_path(directory: Path, writer_id: str) -> Path:
    return Path(directory) / f"{writer_id}{LATEST_SUFFIX}"


def _acquire(lock: Path, retries: int, wait_s: float) -> None:
    for attempt in range(retries + 1):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if attempt == retries:
                raise PublishConflict(f"{lock.name} still held after {retries} retries") from None
            time.sleep(wait_s)
            continue
        os.close(fd)
        return


def commit(staged: Path, directory: Path, writer_id: str, retries: int = 100, wait_s: float = 0.005) -> None:
    """Rename a staged record over ``<writer_id>.latest`` under the writer lock."""
    lock = Path(directory) / f"{writer_id}{LOCK_SUFFIX}"
    _acquire(lock, retries, wait_s)
    try:
        os.replace(staged, latest_path(directory, writer_id))
    finally:
        os.unlink(lock)


@dataclass(frozen=True)
class PublishReceipt:
    write_seq: int
    write_sim_time: int
    size_bytes: int
    sync_delay_us: int
    visible_at: int


class FileSharePublisher:
    """Writes one writer's records into a shared directory.

    With a ``scheduler`` the sync delay elapses in virtual time; otherwise a
    timer thread performs the deferred commit. Visibility is FIFO: a record
    never becomes visible before one published earlier.
    """

    def __init__(self, directory: str | Path, writer_id: str, clock: Clock, sync_model: LatencyModel | None = None,
                 seed: int = 0, scheduler: Scheduler | None = None, lock_retries: int = 100) -> None:
        self.directory = Path(directory)
        self.writer_id = writer_id
        self.clock = clock
        self.sync_model = sync_model or LatencyModel.fixed(0.0)
        self.scheduler = scheduler
        self.lock_retries = lock_retries
        self._rng = stream_rng(seed, f"fileshare:{writer_id}")
        self._seq = self._existing_seq()
        self._last_visible = 0
        self._lock = threading.Lock()
        self._timers: list[threading.Timer] = []
        self.receipts: list[PublishReceipt] = []

    def _existing_seq(self) -> int:
        path = latest_path(self.directory, self.writer_id)
        try:
            return decode_record(path.read_bytes()).write_seq
        except (OSError, CorruptRecord):
            return 0

    def publish(self, frames: Iterable[Frame]) -> PublishReceipt:
        with self._lock:
            self._seq += 1
            now = self.clock.now()
            record = SharedFileRecord(self.writer_id, self._seq, now, tuple(frames))
            data = encode_record(record)
            staged = self.directory / f".{self.writer_id}.{self._seq}.staged"
            staged.write_bytes(data)
            delay = self.sync_model.draw_us(self._rng)
            visible = max(now + delay, self._last_visible)
            self._last_visible = visible
            receipt = PublishReceipt(self._seq, now, len(data), delay, visible)
            self.receipts.append(receipt)
        if visible == now:
            self._commit(staged)
        elif self.scheduler is not None:
            self.scheduler.call_at(visible, self._commit, staged, priority=0)
        else:
            timer = threading.Timer((visible - now) / 1e6, self._commit, args=(staged,))
            timer.daemon = True
            self._timers.append(timer)
            timer.start()
        return receipt

    def _commit(self, staged: Path) -> None:
        try:
            commit(staged, self.directory, self.writer_id, retries=self.lock_retries)
        except PublishConflict:
            log.error("publish conflict for %s; staged record %s left in place", self.writer_id, staged.name)
            raise

    def close(self) -> None:
        for t in self._timers:
            t.cancel()


def fileshare_publish(directory: str | Path, writer_id: str, frames: Iterable[Frame], write_seq: int,
                      write_sim_time: int) -> Path:
    """Immediately publish one record (no sync delay)."""
    directory = Path(directory)
    data = encode_record(SharedFileRecord(writer_id, write_seq, write_sim_time, tuple(frames)))
    staged = directory / f".{writer_id}.{write_seq}.{threading.get_ident()}.staged"
    staged.write_bytes(data)
    commit(staged, directory, writer_id)
    return latest_path(directory, writer_id)


@dataclass(frozen=True)
class WatchEvent:
    record: SharedFileRecord
    seen_at: int
    size_bytes: int


class FileShareWatcher:
    """Polls ``*.latest`` files and hands out each new ``write_seq`` once.

    Unreadable records are renamed to ``*.latest.corrupt`` and listed in
    ``corrupt``; versions overwritten before a poll are counted in ``gaps``.
    """

    def __init__(self, directory: str | Path, clock: Clock | None = None, ignore: Iterable[str] = (),
                 ledger: LatencyLedger | None = None) -> None:
        self.directory = Path(directory)
        self.clock = clock
        self.ignore = set(ignore)
        self.ledger = ledger
        self.last_seq: dict[str, int] = {}
        self.gaps = 0
        self.corrupt: list[str] = []

    def poll_events(self) -> list[WatchEvent]:
        events = []
        now = self.clock.now() if self.clock is not None else 0
        for path in sorted(self.directory.glob(f"*{LATEST_SUFFIX}")):
            writer = path.name[: -len(LATEST_SUFFIX)]
            if writer in self.ignore:
                continue
            # The header alone tells whether the file holds a newer version;
            # a stat signature is not enough when an inode is reused within
            # the filesystem's mtime granularity.
            try:
                with open(path, "rb") as fh:
                    head = fh.readline(256)
            except FileNotFoundError:
                continue
            seq = _header_seq(head)
            if seq is not None and seq <= self.last_seq.get(writer, 0):
                continue
            try:
                data = path.read_bytes()
                record = decode_record(data)
            except FileNotFoundError:
                continue
            except CorruptRecord as exc:
                self._quarantine(path, exc)
                continue
            prev = self.last_seq.get(record.writer_id, 0)
            if record.write_seq <= prev:
                continue
            if prev and record.write_seq > prev + 1:
                self.gaps += record.write_seq - prev - 1
            self.last_seq[record.writer_id] = record.write_seq
            if self.ledger is not None:
                self.ledger.record_leg(Leg.FILESHARE_CYCLE, record.write_sim_time, now)
            events.append(WatchEvent(record, now, len(data)))
        return events

    def poll(self) -> list[Frame]:
        return [f for ev in self.poll_events() for f in ev.record.frames]

    def _quarantine(self, path: Path, exc: Exception) -> None:
        target = path.with_name(path.name + CORRUPT_SUFFIX)
        try:
            os.replace(path, target)
        except FileNotFoundError:
            return
        self.corrupt.append(target.name)
        log.warning("quarantined %s: %s", path.name, exc)


def fileshare_watch(watcher: FileShareWatcher) -> list[Frame]:
    return watcher.poll()


__all__ = [
    "CorruptRecord",
    "FileSharePublisher",
    "FileShareWatcher",
    "FrameDecodeError",
    "PublishConflict",
    "PublishReceipt",
    "SharedFileRecord",
    "WatchEvent",
    "commit",
    "decode_record",
    "encode_record",
    "fileshare_publish",
    "fileshare_watch",
    "latest_path",
]
