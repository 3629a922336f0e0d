"""Serve the built sample app on $PORT.

Artifacts are read into memory at startup, so the server keeps working
after the workspace directory is cleaned up.
"""

import json
import os
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

with open("out/backend/data.json", "rb") as f:
    DATA = f.read()
json.loads(DATA)
with open("out/frontend/index.html", "rb") as f:
    INDEX = f.read()


class Handler(BaseHTTPRequestHandler):
    def _send(self, status, body, content_type):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/api/data":
            self._send(200, DATA, "application/json")
        elif self.path == "/":
            self._send(200, INDEX, "text/html; charset=utf-8")
        elif self.path == "/healthz":
            self._send(200, b'{"status":"ok"}', "application/json")
        else:
            self._send(404, b'{"error":"not found"}', "application/json")

    def log_message(self, fmt, *args):
        sys.stdout.write("%s %s\n" % (self.command, self.path))


def main():
    port = int(os.environ["PORT"])
    server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
    print("serving on 127.0.0.1:%d" % port)
    server.serve_forever()


if __name__ == "__main__":
    main()
