"""Policy server: one handler thread per connection, one pipeline per session."""

from __future__ import annotations

import copy
import logging
import socket
import threading
import time

from ..policy import Policy, PolicyInput
from .pipeline import PipelineConfig, TwoStagePipeline, simulated_stage
from .protocol import (
    E_INTERNAL,
    E_ORDER,
    E_PROTOCOL,
    E_STATE,
    Downlink,
    ErrorMsg,
    Heartbeat,
    ProtocolError,
    SessionInit,
    Uplink,
    read_frame,
    write_frame,
)

log = logging.getLogger(__name__)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like HOST:PORT, got {addr!r}")
    return host, int(port)


class _Session:
    def __init__(self, server: "PolicyServer", conn: socket.socket, peer):
        self.server = server
        self.conn = conn
        self.peer = peer
        self._send_lock = threading.Lock()
        self.thread = threading.Thread(target=self.run, name=f"session-{peer}", daemon=True)

    def send(self, msg) -> None:
        with self._send_lock:
            write_frame(self.conn, msg)

    def _error(self, code: int, text: str) -> None:
        log.info("session %s: closing with error %d: %s", self.peer, code, text)
        try:
            self.send(ErrorMsg(code, text))
        except OSError:
            pass

    def run(self) -> None:
        pipe = None
        try:
            pipe = self._serve()
        except (ConnectionError, OSError):
            pass
        finally:
            if pipe is not None:
                pipe.close()
                if pipe.error is not None:
                    self._error(E_INTERNAL, f"policy failure: {pipe.error}")
            try:
                self.conn.close()
            except OSError:
                pass
            self.server._forget(self)

    def _serve(self):
        try:
            msg = read_frame(self.conn)
            while isinstance(msg, Heartbeat):
                self.send(Heartbeat())
                msg = read_frame(self.conn)
        except ProtocolError as exc:
            self._error(E_PROTOCOL, str(exc))
            return None
        if not isinstance(msg, SessionInit):
            self._error(E_STATE, f"expected SessionInit, got {type(msg).__name__}")
            return None
        init = msg
        policy = self.server.new_policy()
        if hasattr(policy, "reset"):
            policy.reset()
        cfg = self.server.pipeline
        received: dict[int, float] = {}

        def prepare(up: Uplink) -> PolicyInput:
            return PolicyInput(up.depth, up.state, init.instruction, init.goal_hint, init.goal_position,
                               up.detection)

        vision = simulated_stage(cfg.vision_latency_ms, lambda item: (item[0], prepare(item[1])))
        llm = simulated_stage(cfg.llm_latency_ms, lambda item: (item[0], policy.act(item[1]).action))

        def sink(_i, result, tm):
            fid, action = result
            lat = int((time.perf_counter() - received.pop(fid, tm.admit)) * 1e6)
            self.send(Downlink(fid, action, max(lat, 0)))

        pipe = TwoStagePipeline(vision, llm, cfg, sink, name=f"session-{self.peer}")
        last_id = -1
        while True:
            try:
                msg = read_frame(self.conn)
            except ProtocolError as exc:
                self._error(E_PROTOCOL, str(exc))
                return pipe
            except ConnectionError:
                return pipe
            if isinstance(msg, Heartbeat):
                self.send(Heartbeat())
                continue
            if not isinstance(msg, Uplink):
                self._error(E_STATE, f"unexpected {type(msg).__name__} inside a session")
                return pipe
            if msg.frame_id <= last_id:
                self._error(E_ORDER, f"frame_id {msg.frame_id} not above {last_id}")
                return pipe
            last_id = msg.frame_id
            received[msg.frame_id] = time.perf_counter()
            if not pipe.submit((msg.frame_id, msg)):
                return pipe


class PolicyServer:
    """Accepts concurrent sessions; each gets its own policy instance.

    ``policy`` is either a zero-argument factory or a policy object, which is
    deep-copied per session so no mutable state is shared.
    """

    def __init__(self, bind_addr: str, policy, pipeline: PipelineConfig = PipelineConfig()):
        self.pipeline = pipeline
        self._policy = policy
        host, port = parse_addr(bind_addr)
        self._sock = socket.create_server((host, port))
        self.address = "%s:%d" % self._sock.getsockname()[:2]
        self._sessions: set[_Session] = set()
        self._lock = threading.Lock()
        self._closing = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name="navfly-accept", daemon=True)
        self._thread.start()

    def new_policy(self) -> Policy:
        if hasattr(self._policy, "act"):
            return copy.deepcopy(self._policy)
        return self._policy()

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, peer = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s = _Session(self, conn, peer)
            with self._lock:
                if self._closing.is_set():
                    conn.close()
                    return
                self._sessions.add(s)
            s.thread.start()

    def _forget(self, s: _Session) -> None:
        with self._lock:
            self._sessions.discard(s)

    @property
    def n_sessions(self) -> int:
        with self._lock:
            return len(self._sessions)

    def shutdown(self, drain: bool = True, timeout: float = 5.0) -> None:
        """Stop accepting. With ``drain`` in-flight frames are answered before
        each session closes; otherwise connections are cut immediately."""
        self._closing.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)  # wakes the blocked accept()
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            try:
                s.conn.shutdown(socket.SHUT_RD if drain else socket.SHUT_RDWR)
            except OSError:
                pass
        for s in sessions:
            s.thread.join(timeout)
        self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(bind_addr: str, policy, pipeline: PipelineConfig = PipelineConfig()) -> PolicyServer:
    """Bind and start serving in background threads; returns the running handle."""
    return PolicyServer(bind_addr, policy, pipeline)
