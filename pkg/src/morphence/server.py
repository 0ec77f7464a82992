"""Newline-delimited JSON prediction service over TCP, with a separate admin port.

Prediction requests look like ``{"id": 7, "input": [...], "want_confidence": true}``
and get ``{"id": 7, "label": 3}`` (plus ``"confidence"`` when both the client
asks and the server exposes it) or ``{"id": 7, "error": "..."}``.  The admin
port answers ``{"cmd": "status"}`` with the pool manager's status document.
"""

from __future__ import annotations

import json
import math
import socket
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from morphence import nn
from morphence.attacks import QueryOracle
from morphence.data import TransformSpec
from morphence.poolgen import StudentPool, load_pool
from morphence.scheduler import BufferUnderrun, PoolManager


CHUNK = 64  # requests in flight per client round trip


class StartupError(RuntimeError):
    pass


class RemoteError(RuntimeError):
    """The server answered a request with an error."""


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass
class ServerConfig:
    listen: str = "127.0.0.1:9700"
    admin: str = "127.0.0.1:9701"
    pool_dir: str | None = None
    base_model: str | None = None  # served as a one-student pool when no pool exists
    q_max: int = 1000
    fixed_qmax: int | None = None
    expose_confidence: bool = False
    lb: float = 0.0
    ub: float = 1.0
    wait_timeout: float = 30.0

    @classmethod
    def from_dict(cls, d: dict) -> "ServerConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def load_pools(pool_dir) -> list[StudentPool]:
    """Every pool under ``pool_dir`` (one sub-directory each), ordered by pool id."""
    root = Path(pool_dir)
    if (root / "manifest.json").exists():
        return [load_pool(root)]
    pools = [load_pool(d) for d in sorted(root.iterdir()) if (d / "manifest.json").exists()]
    return sorted(pools, key=lambda p: p.pool_id)


def fallback_pool(base: nn.Model) -> StudentPool:
    return StudentPool([base], [False], [TransformSpec()], pool_id=0)


class PredictionService:
    """Request validation and dispatch, independent of the transport."""

    def __init__(self, manager: PoolManager, input_dim: int, lb=0.0, ub=1.0, expose_confidence=False):
        self.manager = manager
        self.input_dim = input_dim
        self.lb, self.ub = lb, ub
        self.expose_confidence = expose_confidence

    def _input(self, req: dict) -> np.ndarray:
        raw = req.get("input")
        if not isinstance(raw, list):
            raise ValueError("'input' must be a list of numbers")
        if len(raw) != self.input_dim:
            raise ValueError(f"expected input of length {self.input_dim}, got {len(raw)}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
            raise ValueError("'input' must contain only numbers")
        x = np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("input contains non-finite values")
        if x.min() < self.lb or x.max() > self.ub:
            raise ValueError(f"input outside feature bounds [{self.lb}, {self.ub}]")
        return x

    def handle_line(self, line: str) -> dict:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"id": None, "error": f"malformed request: {exc.msg}"}
        if not isinstance(req, dict):
            return {"id": None, "error": "malformed request: expected a JSON object"}
        rid = req.get("id")
        try:
            x = self._input(req)
        except ValueError as exc:
            return {"id": rid, "error": str(exc)}
        try:
            label, conf, _ = self.manager.predict_one(x)
        except BufferUnderrun as exc:
            return {"id": rid, "error": f"service unavailable: {exc}"}
        out = {"id": rid, "label": label}
        if req.get("want_confidence") and self.expose_confidence:
            out["confidence"] = conf
        return out

    def handle_admin(self, line: str) -> dict:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"error": f"malformed request: {exc.msg}"}
        if not isinstance(req, dict) or req.get("cmd") != "status":
            return {"error": "unknown command (supported: status)"}
        return self.manager.status()


def _line_handler(respond: Callable[[str], dict]):
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                line = raw.decode("utf-8", errors="replace").strip()
                if not line:
                    continue
                self.wfile.write((json.dumps(respond(line)) + "\n").encode())
                self.wfile.flush()

    return Handler


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class MorphenceServer:
    """Prediction and admin listeners around one :class:`PredictionService`."""

    def __init__(self, service: PredictionService, listen: str, admin: str):
        self.service = service
        try:
            self._predict = _TCPServer(parse_address(listen), _line_handler(service.handle_line))
            self._admin = _TCPServer(parse_address(admin), _line_handler(service.handle_admin))
        except OSError as exc:
            raise StartupError(f"cannot bind: {exc}") from exc
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._predict.server_address[:2]

    @property
    def admin_address(self) -> tuple[str, int]:
        return self._admin.server_address[:2]

    def start(self) -> "MorphenceServer":
        for srv in (self._predict, self._admin):
            t = threading.Thread(target=srv.serve_forever, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        for srv in (self._predict, self._admin):
            srv.shutdown()
            srv.server_close()
        self.service.manager.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def build_server(cfg: ServerConfig, pools: list[StudentPool] | None = None) -> MorphenceServer:
    if pools is None:
        pools = load_pools(cfg.pool_dir) if cfg.pool_dir else []
    if not pools and cfg.base_model:
        pools = [fallback_pool(nn.load_model(cfg.base_model))]
    if not pools:
        raise StartupError("no pool to serve and no base-model fallback configured")
    manager = PoolManager(pools, q_max=cfg.q_max, fixed_qmax=cfg.fixed_qmax, wait_timeout=cfg.wait_timeout)
    service = PredictionService(manager, pools[0].students[0].input_dim, cfg.lb, cfg.ub, cfg.expose_confidence)
    return MorphenceServer(service, cfg.listen, cfg.admin)


def serve(cfg: ServerConfig, pools: list[StudentPool] | None = None) -> None:
    """Run until interrupted."""
    server = build_server(cfg, pools).start()
    print("listening {}:{} admin {}:{}".format(*server.address, *server.admin_address), flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


class LineClient:
    """Blocking newline-JSON client; one request at a time or pipelined in chunks."""

    def __init__(self, address, timeout: float = 60.0):
        host, port = parse_address(address) if isinstance(address, str) else address
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def exchange(self, requests: list[dict]) -> list[dict]:
        payload = "".join(json.dumps(r) + "\n" for r in requests).encode()
        self._sock.sendall(payload)
        out = []
        for _ in requests:
            line = self._rfile.readline()
            if not line:
                raise ConnectionError("server closed the connection")
            out.append(json.loads(line))
        return out

    def request(self, req: dict) -> dict:
        return self.exchange([req])[0]

    def close(self) -> None:
        self._rfile.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def admin_status(address) -> dict:
    with LineClient(address) as c:
        return c.request({"cmd": "status"})


class RemoteTarget:
    """A deployed service seen through its prediction port only."""

    def __init__(self, address, mode: str = "label"):
        if mode not in ("label", "confidence"):
            raise ValueError("mode must be 'label' or 'confidence'")
        self.mode = mode
        self.client = LineClient(address)
        self._next_id = 0
        self._lock = threading.Lock()

    def query(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        labels = np.empty(len(x), dtype=np.int64)
        conf = np.full(len(x), math.nan)
        want = self.mode == "confidence"
        with self._lock:
            for start in range(0, len(x), CHUNK):
                rows = x[start : start + CHUNK]
                reqs = []
                for row in rows:
                    reqs.append({"id": self._next_id, "input": row.tolist(), "want_confidence": want})
                    self._next_id += 1
                for k, resp in enumerate(self.client.exchange(reqs)):
                    if "error" in resp:
                        raise RemoteError(resp["error"])
                    labels[start + k] = resp["label"]
                    if want:
                        if "confidence" not in resp:
                            raise RemoteError("server does not expose confidence scores")
                        conf[start + k] = resp["confidence"]
        return labels, conf

    def labels(self, x) -> np.ndarray:
        return self.query(x)[0]

    def oracle(self, mode: str) -> QueryOracle:
        """Counting oracle; probability requests degrade to label+confidence."""
        if mode == "label" or self.mode == "label":
            if mode != "label":
                raise RemoteError("target only exposes hard labels")
            return QueryOracle(self.labels, "label")
        return QueryOracle(self.query, "confidence")

    def close(self) -> None:
        self.client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
