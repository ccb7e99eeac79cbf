"""UAV-side control loop that queries a remote policy each tick."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..eval import Episode, EpisodeLimits, EpisodeOutcome
from ..instructions import make_instruction
from ..world import Scene, TargetInstance, UavState, VelocityAction, sample_start
from .protocol import Downlink, ErrorMsg, Heartbeat, ProtocolError, SessionInit, Uplink, read_frame, write_frame
from .server import parse_addr

log = logging.getLogger(__name__)

HOVER = VelocityAction(0.0, 0.0, 0.0)


class TransportError(RuntimeError):
    pass


@dataclass
class FlightLog:
    actions: list = field(default_factory=list)
    timeouts: int = 0
    stale: int = 0
    error: str | None = None
    server_latency_us: list = field(default_factory=list)


def _reader(sock: socket.socket, inbox: queue.Queue) -> None:
    try:
        while True:
            inbox.put(read_frame(sock))
    except (ProtocolError, ConnectionError, OSError) as exc:
        inbox.put(exc)


def fly_client(server_addr: str, scene: Scene, goal: TargetInstance | None = None, instruction: str | None = None,
               limits: EpisodeLimits = EpisodeLimits(), seed: int | None = 0, start: UavState | None = None,
               timeout_s: float = 0.5, log_to: FlightLog | None = None, connect_timeout: float = 5.0) -> EpisodeOutcome:
    """Fly one episode against a remote policy.

    Each tick sends an Uplink and waits up to ``timeout_s`` for the matching
    Downlink; on timeout the vehicle hovers for that tick and late replies
    are discarded. Losing the connection aborts the episode.
    """
    goal = goal or scene.goal
    rng = np.random.default_rng(seed)
    if start is None:
        start = sample_start(scene, rng)
    if instruction is None:
        instruction = make_instruction(rng, goal, scene)
    ep = Episode(scene, goal, start, instruction, limits)
    flog = log_to if log_to is not None else FlightLog()
    try:
        sock = socket.create_connection(parse_addr(server_addr), timeout=connect_timeout)
    except OSError as exc:
        raise TransportError(f"cannot reach {server_addr}: {exc}") from exc
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    inbox: queue.Queue = queue.Queue()
    reader = threading.Thread(target=_reader, args=(sock, inbox), daemon=True)
    reader.start()
    try:
        write_frame(sock, SessionInit(instruction, ep.goal_hint, goal.position))
        fid = 0
        while not ep.done:
            depth, det, _ = ep.observation()
            fid += 1
            write_frame(sock, Uplink(fid, time.time_ns() // 1000, ep.state, depth, det))
            action = _await(inbox, fid, time.monotonic() + timeout_s, flog)
            if action is None:
                flog.timeouts += 1
                action = HOVER
            flog.actions.append(action.clamped(limits.action_limits))
            ep.apply(action)
    except (TransportError, OSError) as exc:
        flog.error = str(exc)
        log.warning("transport failure, aborting episode: %s", exc)
        ep.abort()
    finally:
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
        reader.join(1.0)
    return ep.outcome()


def _await(inbox: queue.Queue, fid: int, deadline: float, flog: FlightLog) -> VelocityAction | None:
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        try:
            msg = inbox.get(timeout=remaining)
        except queue.Empty:
            return None
        if isinstance(msg, BaseException):
            raise TransportError(f"connection lost: {msg}")
        if isinstance(msg, ErrorMsg):
            raise TransportError(f"server error {msg.code}: {msg.message}")
        if isinstance(msg, Heartbeat):
            continue
        if isinstance(msg, Downlink):
            if msg.frame_id == fid:
                flog.server_latency_us.append(msg.server_latency_us)
                return msg.action
            flog.stale += 1
