"""Echo stub for the external feature-provider wire formats.

Line mode: reads one base64 PNG per stdin line, answers one JSON float array.
HTTP mode: serves POST {"image": b64} -> {"vector": [...]}. The stub always
returns the same fixed vector, which makes expected similarities trivial to
compute by hand (image similarity 1.0; direction similarity degenerates).
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from http.server import BaseHTTPRequestHandler, HTTPServer

FIXED_VECTOR = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]


def _respond_line(line: str) -> str:
    base64.b64decode(line.strip())  # validates the request encoding
    return json.dumps(FIXED_VECTOR)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802 - http.server API
        length = int(self.headers.get("Content-Length", "0"))
        request = json.loads(self.rfile.read(length).decode("utf-8"))
        base64.b64decode(request["image"])
        body = json.dumps({"vector": FIXED_VECTOR}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):  # silence request logging
        pass


def serve_http(port: int = 0) -> HTTPServer:
    """Create (but do not run) the HTTP stub server; caller drives it."""
    return HTTPServer(("127.0.0.1", port), _Handler)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="fixed-vector feature stub")
    parser.add_argument("--mode", choices=["line", "http"], default="line")
    parser.add_argument("--port", type=int, default=8750)
    args = parser.parse_args(argv)
    if args.mode == "line":
        for line in sys.stdin:
            if not line.strip():
                continue
            sys.stdout.write(_respond_line(line) + "\n")
            sys.stdout.flush()
        return 0
    server = serve_http(args.port)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
