#!/usr/bin/env python3
"""Minimal external predictor speaking the WSPR frame protocol.

Self-contained (numpy + stdlib) so it can be copied next to a real model.
It scores each patch with an intensity threshold: pixels whose mean RGB
value is below the threshold get logit +4 for class 1 and -4 for class 0,
the rest the opposite. Replace ``predict`` with a model call to serve a
network.

    python3 reference_predictor.py --stdio
    python3 reference_predictor.py --listen 127.0.0.1:9100

A model with a single foreground channel ``s`` can be lifted to two
classes by sending ``[-s, s]`` (or ``[0, s]``): softmax and argmax then
behave as for a sigmoid.
"""

import argparse
import socketserver
import struct
import sys
import zlib

import numpy as np

MAGIC = b"WSPR"
VERSION = 1
HEADER = struct.Struct("<4sHBQHHHII")  # magic ver kind id classes h w len crc
REQUEST, RESPONSE, ERROR = 0, 1, 2
CLASSES = 2
INPUT_SIZE = 768
MARGIN = 4.0


def predict(patch: np.ndarray, threshold: float) -> np.ndarray:
    fg = patch.mean(axis=2) < threshold
    scores = np.where(fg, MARGIN, -MARGIN).astype("<f4")
    return np.stack([-scores, scores])


def read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def send(stream, kind, pid, classes, h, w, payload):
    stream.write(HEADER.pack(MAGIC, VERSION, kind, pid, classes, h, w, len(payload), zlib.crc32(payload)))
    stream.write(payload)
    stream.flush()


def serve(rfile, wfile, threshold):
    while True:
        head = read_exact(rfile, HEADER.size)
        if head is None:
            return
        magic, version, kind, pid, _, h, w, length, crc = HEADER.unpack(head)
        payload = read_exact(rfile, length) if length else b""
        if magic != MAGIC or version != VERSION or payload is None or zlib.crc32(payload) != crc:
            send(wfile, ERROR, pid, 0, 0, 0, b"bad frame")
            return
        if kind != REQUEST:
            send(wfile, ERROR, pid, 0, 0, 0, b"expected a request")
            continue
        if pid == 0:  # handshake
            send(wfile, RESPONSE, 0, CLASSES, INPUT_SIZE, INPUT_SIZE, b"")
            continue
        if length != h * w * 3:
            send(wfile, ERROR, pid, 0, 0, 0, b"payload does not match dimensions")
            continue
        patch = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
        send(wfile, RESPONSE, pid, CLASSES, h, w, predict(patch, threshold).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--stdio", action="store_true")
    parser.add_argument("--listen", help="host:port")
    parser.add_argument("--threshold", type=float, default=150.0)
    args = parser.parse_args()
    if args.stdio or not args.listen:
        serve(sys.stdin.buffer, sys.stdout.buffer, args.threshold)
        return

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve(self.rfile, self.wfile, args.threshold)

    host, _, port = args.listen.rpartition(":")
    with socketserver.ThreadingTCPServer((host or "127.0.0.1", int(port)), Handler) as server:
        server.serve_forever()


if __name__ == "__main__":
    main()
