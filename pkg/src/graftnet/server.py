"""Newline-delimited JSON-over-TCP inference endpoint.

Request, one JSON object per line::

    {"id": "r1",
     "tensor": {"shape": [C, H, W], "data_b64": "<base64 little-endian f32>"},
     "attributes": ["age", ...]}        # optional filter

Response::

    {"id": "r1", "scores": {"age": [0.1, 0.9], ...}}
    {"id": "r1", "error": "<code>", "message": "..."}

Error codes: bad_json, bad_request, bad_tensor, unknown_attribute,
internal. A malformed request produces an error response and the connection
stays open; the connection closes on EOF.

Scores are serialized as exact shortest round-trip decimals, so a client
parsing the JSON recovers bit-identical values to an offline library call.
"""

import base64
import json
import socketserver
import threading

import numpy as np


def _decode_tensor(spec):
    if not isinstance(spec, dict) or "shape" not in spec or "data_b64" not in spec:
        raise ValueError("tensor must be an object with 'shape' and 'data_b64'")
    shape = spec["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(d, int) and d > 0 for d in shape)
    ):
        raise ValueError(f"tensor shape must be [C, H, W] positive ints, got {shape!r}")
    try:
        raw = base64.b64decode(spec["data_b64"], validate=True)
    except Exception as exc:
        raise ValueError(f"data_b64 is not valid base64: {exc}") from exc
    n = shape[0] * shape[1] * shape[2]
    if len(raw) != 4 * n:
        raise ValueError(f"payload holds {len(raw) // 4} f32 values, shape needs {n}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def encode_tensor(arr):
    """Client-side helper: tensor dict for a (C, H, W) float array."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "data_b64": base64.b64encode(arr.tobytes()).decode("ascii")}


def handle_request_line(registry, line):
    """One request line -> one response dict. Never raises."""
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        return {"id": None, "error": "bad_json", "message": str(exc)}
    request_id = doc.get("id") if isinstance(doc, dict) else None
    if not isinstance(doc, dict) or "tensor" not in doc:
        return {"id": request_id, "error": "bad_request", "message": "need an object with a 'tensor' field"}
    attributes = doc.get("attributes")
    if attributes is not None and (
        not isinstance(attributes, list) or not all(isinstance(a, str) for a in attributes)
    ):
        return {"id": request_id, "error": "bad_request", "message": "'attributes' must be a list of strings"}
    try:
        image = _decode_tensor(doc["tensor"])
    except ValueError as exc:
        return {"id": request_id, "error": "bad_tensor", "message": str(exc)}
    try:
        scores = registry.infer(image, attributes)
    except KeyError as exc:
        return {"id": request_id, "error": "unknown_attribute", "message": str(exc.args[0])}
    except Exception as exc:  # surface anything else as a structured error
        return {"id": request_id, "error": "internal", "message": f"{type(exc).__name__}: {exc}"}
    return {"id": request_id, "scores": {a: [float(v) for v in vec] for a, vec in scores.items()}}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                return
            if not line.strip():
                continue
            response = handle_request_line(self.server.registry, line.decode("utf-8", errors="replace"))
            self.wfile.write(json.dumps(response).encode("utf-8") + b"\n")
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class InferenceServer:
    """Threaded TCP server over a registry; one thread per connection."""

    def __init__(self, registry, host="127.0.0.1", port=0):
        self.registry = registry
        self._server = _Server((host, port), _Handler)
        self._server.registry = registry
        self._thread = None

    @property
    def address(self):
        """(host, port) actually bound; port 0 picks a free one."""
        return self._server.server_address

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self):
        self._server.serve_forever()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(registry, host="127.0.0.1", port=7077):
    """Blocking entry point used by the command line."""
    server = InferenceServer(registry, host=host, port=port)
    try:
        server.serve_forever()
    finally:
        server._server.server_close()
