"""Reference server for the external predictor protocol.

Wraps any in-process predictor and serves it over a byte stream (TCP, a Unix
socket, or stdin/stdout). Run ``python -m glomstitch.predictor.server --help``.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import socketserver
import sys

from ..errors import ProtocolError
from . import wire

log = logging.getLogger(__name__)


def serve_stream(predictor, rfile, wfile) -> int:
    """Answer frames until the peer closes; returns the number of patches served."""
    served = 0
    while True:
        try:
            frame = wire.read_frame(rfile)
        except EOFError:
            return served
        except ProtocolError as exc:
            try:
                wire.write_frame(wfile, wire.error_frame(0, f"protocol error: {exc}"))
            except OSError:
                pass
            return served
        if frame.kind != wire.KIND_REQUEST:
            wire.write_frame(wfile, wire.error_frame(frame.patch_id, "server accepts only requests"))
            continue
        if frame.is_handshake:
            wire.write_frame(wfile, wire.hello_reply(predictor.classes, predictor.input_size))
            continue
        try:
            scores = predictor.predict(wire.frame_patch(frame))
            reply = wire.response_frame(frame.patch_id, scores)
        except Exception as exc:  # reported to the client, not fatal to the server
            reply = wire.error_frame(frame.patch_id, f"{type(exc).__name__}: {exc}")
        wire.write_frame(wfile, reply)
        served += 1


def make_tcp_server(predictor, host: str = "127.0.0.1", port: int = 0) -> socketserver.ThreadingTCPServer:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve_stream(predictor, self.rfile, self.wfile)

    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def make_unix_server(predictor, path: str) -> socketserver.ThreadingUnixStreamServer:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve_stream(predictor, self.rfile, self.wfile)

    if os.path.exists(path):
        os.unlink(path)
    server = socketserver.ThreadingUnixStreamServer(path, Handler)
    server.daemon_threads = True
    return server


def build_predictor(name: str, noise: float = 0.0, seed: int = 0, classes: int = 2,
                    border_frac: float = 0.125, flip_prob: float = 0.8, threshold: float = 150.0):
    from .builtin import BorderDegradedPredictor, ThresholdOraclePredictor

    if name == "threshold":
        return ThresholdOraclePredictor(noise=noise, seed=seed, classes=classes, intensity_threshold=threshold)
    if name == "border-degraded":
        return BorderDegradedPredictor(border_frac=border_frac, flip_prob=flip_prob, seed=seed, noise=noise,
                                       classes=classes, intensity_threshold=threshold)
    raise ValueError(f"unknown built-in predictor {name!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Serve a built-in predictor over the WSPR protocol.")
    where = parser.add_mutually_exclusive_group(required=True)
    where.add_argument("--listen", help="tcp://host:port or unix:/path")
    where.add_argument("--stdio", action="store_true", help="serve a single session on stdin/stdout")
    parser.add_argument("--predictor", default="threshold", choices=["threshold", "border-degraded"])
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--classes", type=int, default=2)
    parser.add_argument("--threshold", type=float, default=150.0)
    args = parser.parse_args(argv)

    predictor = build_predictor(args.predictor, noise=args.noise, seed=args.seed, classes=args.classes,
                                threshold=args.threshold)
    if args.stdio:
        serve_stream(predictor, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    if args.listen.startswith("tcp://"):
        host, _, port = args.listen[len("tcp://"):].rpartition(":")
        server = make_tcp_server(predictor, host or "127.0.0.1", int(port))
    elif args.listen.startswith("unix:"):
        server = make_unix_server(predictor, args.listen[len("unix:"):].removeprefix("//"))
    else:
        parser.error("--listen must be tcp://host:port or unix:/path")
    log.info("serving %s on %s", args.predictor, server.server_address)
    with server:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
