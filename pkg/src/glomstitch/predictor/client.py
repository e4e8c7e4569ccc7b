"""Client side of the external predictor protocol.

One connection carries any number of in-flight requests. A single reader
thread matches response frames to pending requests by patch id, so
responses may arrive in any order.
"""

from __future__ import annotations

import itertools
import logging
import shlex
import socket
import subprocess
import threading
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout

import numpy as np

from ..errors import DimensionMismatch, PredictorTimeout, ProtocolError, RemoteError
from ..tiler import TileSpec
from . import wire

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


def open_endpoint(endpoint: str):
    """Open ``tcp://host:port``, ``unix:/path`` or ``stdio:<command>``.

    Returns ``(rfile, wfile, closer)`` where both files are binary and
    ``closer`` releases the transport.
    """
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        sock = socket.create_connection((host or "127.0.0.1", int(port)))
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return _socket_files(sock)
    if endpoint.startswith("unix:"):
        path = endpoint[len("unix:"):]
        if path.startswith("//"):
            path = path[2:]
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(path)
        return _socket_files(sock)
    if endpoint.startswith("stdio:"):
        proc = subprocess.Popen(shlex.split(endpoint[len("stdio:"):]), stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE)

        def close():
            # EOF on stdin ends the server; its exit then unblocks our reader on stdout
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            proc.stdout.close()

        return proc.stdout, proc.stdin, close
    raise ValueError(f"unsupported endpoint {endpoint!r}; use tcp://, unix: or stdio:")


def _socket_files(sock: socket.socket):
    rfile = sock.makefile("rb")
    wfile = sock.makefile("wb")

    def close():
        # shut down first: it wakes a reader blocked in recv, which holds the rfile lock
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        for f in (wfile, rfile):
            try:
                f.close()
            except OSError:
                pass
        sock.close()

    return rfile, wfile, close


class ExternalPredictor:
    """Predictor backed by a remote process speaking the WSPR framing.

    ``predict`` blocks for one patch; ``submit`` returns a future and may be
    called from many threads to keep several requests in flight.
    """

    def __init__(self, rfile, wfile, closer=None, timeout: float = DEFAULT_TIMEOUT):
        self._rfile = rfile
        self._wfile = wfile
        self._closer = closer
        self.timeout = timeout
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._pending: dict[int, tuple[Future, int, int]] = {}
        self._broken: BaseException | None = None
        self._closed = False
        self.classes, self.input_size = self._handshake()
        self._reader = threading.Thread(target=self._read_loop, name="wspr-reader", daemon=True)
        self._reader.start()

    @classmethod
    def connect(cls, endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> "ExternalPredictor":
        rfile, wfile, closer = open_endpoint(endpoint)
        try:
            return cls(rfile, wfile, closer, timeout=timeout)
        except BaseException:
            closer()
            raise

    def _handshake(self) -> tuple[int, int]:
        wire.write_frame(self._wfile, wire.hello_frame())
        try:
            reply = wire.read_frame(self._rfile)
        except EOFError as exc:
            raise ProtocolError("connection closed during handshake") from exc
        if reply.kind == wire.KIND_ERROR:
            raise ProtocolError(f"handshake rejected: {reply.payload.decode('utf-8', 'replace')}")
        if reply.kind != wire.KIND_RESPONSE or reply.patch_id != wire.HANDSHAKE_ID:
            raise ProtocolError("unexpected handshake reply")
        if reply.classes < 2:
            raise ProtocolError(f"predictor declares {reply.classes} classes; at least 2 are required")
        return reply.classes, reply.height

    @property
    def usable(self) -> bool:
        return self._broken is None and not self._closed

    def submit(self, patch: np.ndarray) -> Future:
        if self._broken is not None:
            raise ProtocolError(f"connection unusable: {self._broken}")
        if self._closed:
            raise ProtocolError("connection closed")
        fut: Future = Future()
        with self._lock:
            pid = next(self._ids)
        frame = wire.request_frame(pid, patch)
        with self._lock:
            self._pending[pid] = (fut, frame.height, frame.width)
        fut.patch_id = pid
        try:
            with self._write_lock:
                wire.write_frame(self._wfile, frame)
        except (OSError, ValueError) as exc:
            self._fail(ProtocolError(f"write failed: {exc}"))
        return fut

    def predict(self, patch: np.ndarray, tile: TileSpec | None = None) -> np.ndarray:
        fut = self.submit(patch)
        try:
            return fut.result(timeout=self.timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(fut.patch_id, None)
            raise PredictorTimeout(f"no response for patch {fut.patch_id} within {self.timeout} s") from None

    def _read_loop(self) -> None:
        try:
            while True:
                try:
                    frame = wire.read_frame(self._rfile)
                except EOFError:
                    if not self._closed:
                        self._fail(ProtocolError("connection closed by predictor"))
                    return
                self._dispatch(frame)
        except ProtocolError as exc:
            self._fail(exc)
        except (OSError, ValueError) as exc:
            if not self._closed:
                self._fail(ProtocolError(f"read failed: {exc}"))

    def _dispatch(self, frame: wire.Frame) -> None:
        with self._lock:
            entry = self._pending.pop(frame.patch_id, None)
        if entry is None:
            # a late reply to a request that already timed out
            log.warning("dropping frame for unknown patch id %d", frame.patch_id)
            return
        fut, h, w = entry
        if frame.kind == wire.KIND_ERROR:
            fut.set_exception(RemoteError(frame.payload.decode("utf-8", "replace")))
        elif frame.kind != wire.KIND_RESPONSE:
            fut.set_exception(ProtocolError(f"unexpected frame kind {frame.kind}"))
        elif (frame.classes, frame.height, frame.width) != (self.classes, h, w):
            fut.set_exception(DimensionMismatch(
                f"response {frame.classes}x{frame.height}x{frame.width} for request "
                f"{self.classes}x{h}x{w}"))
        else:
            fut.set_result(wire.frame_scores(frame))

    def _fail(self, exc: BaseException) -> None:
        with self._lock:
            if self._broken is None:
                self._broken = exc
            pending, self._pending = self._pending, {}
        for fut, _, _ in pending.values():
            if not fut.done():
                fut.set_exception(exc)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._closer is not None:
            self._closer()
        else:
            for f in (self._wfile, self._rfile):
                try:
                    f.close()
                except OSError:
                    pass
        self._reader.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
