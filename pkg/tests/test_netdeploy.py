import math
import socket
import struct
import threading
import time
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navfly.eval import EpisodeLimits, run_episode
from navfly.netdeploy.client import HOVER, FlightLog, TransportError, fly_client
from navfly.netdeploy.pipeline import (
    LatencyReport,
    PipelineConfig,
    bench_pipeline,
    pipelined_execute,
    simulated_stage,
)
from navfly.netdeploy.protocol import (
    E_ORDER,
    E_STATE,
    HEADER_SIZE,
    MAX_PAYLOAD,
    BadMagicError,
    CrcError,
    Downlink,
    ErrorMsg,
    Heartbeat,
    OversizeError,
    ProtocolError,
    SessionInit,
    TruncatedError,
    Uplink,
    VersionError,
    decode_frame,
    encode_frame,
    read_frame,
    write_frame,
)
from navfly.netdeploy.server import serve
from navfly.policy import Detection, PolicyInput, scripted_expert
from navfly.world import DepthImage, UavState, Vec3, VelocityAction, generate_scene, render_depth, sample_start

ZERO = PipelineConfig(0.0, 0.0, 0.0)

# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------

f64 = st.floats(allow_nan=False, allow_infinity=False)
f32 = st.floats(allow_nan=False, allow_infinity=False, width=32)
u64 = st.integers(0, 2**64 - 1)


@st.composite
def uplinks(draw):
    w, h = draw(st.integers(1, 8)), draw(st.integers(1, 6))
    ranges = np.array(draw(st.lists(f32, min_size=w * h, max_size=w * h)), dtype=np.float32)
    det = draw(st.none() | st.builds(Detection, f64, f64))
    return Uplink(draw(u64), draw(u64), UavState(Vec3(draw(f64), draw(f64), draw(f64)), draw(f64), draw(f64)),
                  DepthImage(w, h, ranges), det)


messages = st.one_of(
    uplinks(),
    st.builds(Downlink, u64, st.builds(VelocityAction, f32, f32, f32), u64),
    st.builds(SessionInit, st.text(max_size=200), st.none() | f64,
              st.none() | st.builds(Vec3, f64, f64, f64)),
    st.just(Heartbeat()),
    st.builds(ErrorMsg, st.integers(0, 0xFFFF), st.text(max_size=100)),
)


def test_heartbeat_frame_is_fifteen_bytes():
    raw = encode_frame(Heartbeat())
    assert len(raw) == 15
    assert raw == b"NVFL" + struct.pack("<HBI", 1, 0x04, 0) + struct.pack("<I", zlib.crc32(b""))
    assert decode_frame(raw) == Heartbeat()


def test_downlink_layout():
    raw = encode_frame(Downlink(7, VelocityAction(1.5, -0.25, 0.5), 1234))
    payload = raw[HEADER_SIZE:-4]
    assert struct.unpack("<Q3fQ", payload) == (7, 1.5, -0.25, 0.5, 1234)
    assert raw[4:7] == struct.pack("<HB", 1, 0x02)


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip_every_message_type(msg):
    assert decode_frame(encode_frame(msg)) == msg


def test_uplink_fuzz_corpus_round_trip():
    rng = np.random.default_rng(0)
    for k in range(10_000):
        w, h = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        det = Detection(*rng.normal(size=2)) if rng.random() < 0.5 else None
        m = Uplink(int(rng.integers(0, 2**63)), int(rng.integers(0, 2**63)),
                   UavState(Vec3(*rng.normal(0, 100, 3)), float(rng.normal()), float(rng.uniform(0, 1e4))),
                   DepthImage(w, h, rng.uniform(0, 50, w * h).astype(np.float32)), det)
        assert decode_frame(encode_frame(m)) == m


@settings(max_examples=300, deadline=None)
@given(uplinks(), st.data())
def test_payload_bit_flip_is_a_crc_error(msg, data):
    raw = bytearray(encode_frame(msg))
    n = len(raw) - HEADER_SIZE - 4
    bit = data.draw(st.integers(0, 8 * n - 1))
    raw[HEADER_SIZE + bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(CrcError):
        decode_frame(bytes(raw))


def test_distinct_framing_errors():
    good = encode_frame(Downlink(1, VelocityAction(0, 0, 0)))
    with pytest.raises(BadMagicError):
        decode_frame(b"XXXX" + good[4:])
    with pytest.raises(VersionError):
        decode_frame(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(TruncatedError):
        decode_frame(good[:-1])
    with pytest.raises(TruncatedError):
        decode_frame(good[:5])
    with pytest.raises(OversizeError):
        decode_frame(b"NVFL" + struct.pack("<HBI", 1, 1, MAX_PAYLOAD + 1))
    kinds = [BadMagicError, VersionError, TruncatedError, OversizeError, CrcError]
    assert len(set(kinds)) == 5 and all(issubclass(k, ProtocolError) for k in kinds)


@settings(max_examples=2000, deadline=None)
@given(st.binary(max_size=200))
def test_decoder_never_crashes_on_garbage(raw):
    try:
        decode_frame(raw)
    except ProtocolError:
        pass


@settings(max_examples=500, deadline=None)
@given(st.integers(0, 255), st.binary(max_size=80))
def test_decoder_never_crashes_on_well_framed_garbage(mtype, payload):
    raw = b"NVFL" + struct.pack("<HBI", 1, mtype, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))
    try:
        decode_frame(raw)
    except ProtocolError:
        pass


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


def _connect(server):
    host, port = server.address.rsplit(":", 1)
    s = socket.create_connection((host, int(port)), timeout=10)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return s


def _uplink(fid, scene, state):
    return Uplink(fid, fid, state, render_depth(scene, state))


@pytest.fixture
def expert_server():
    srv = serve("127.0.0.1:0", scripted_expert, ZERO)
    yield srv
    srv.shutdown()


def test_one_uplink_one_downlink(expert_server):
    sc = generate_scene(1)
    with _connect(expert_server) as s:
        write_frame(s, SessionInit("fly", None, sc.goal.position))
        write_frame(s, _uplink(42, sc, sample_start(sc, np.random.default_rng(0))))
        reply = read_frame(s)
    assert isinstance(reply, Downlink) and reply.frame_id == 42


def test_heartbeat_echo(expert_server):
    with _connect(expert_server) as s:
        write_frame(s, Heartbeat())
        assert read_frame(s) == Heartbeat()


def test_two_clients_are_isolated(expert_server):
    sc = generate_scene(2)
    st0 = sample_start(sc, np.random.default_rng(0))
    a, b = _connect(expert_server), _connect(expert_server)
    try:
        for s in (a, b):
            write_frame(s, SessionInit("fly", None, sc.goal.position))
        for k in range(20):
            write_frame(a, _uplink(2 * k + 1, sc, st0))
            write_frame(b, _uplink(2 * k + 2, sc, st0))
        got_a = [read_frame(a).frame_id for _ in range(20)]
        got_b = [read_frame(b).frame_id for _ in range(20)]
    finally:
        a.close()
        b.close()
    assert got_a == list(range(1, 41, 2))
    assert got_b == list(range(2, 41, 2))


def test_thousand_frames_match_in_process_policy(expert_server):
    sc = generate_scene(3)
    rng = np.random.default_rng(3)
    states = [sample_start(sc, rng) for _ in range(1000)]
    ups = [_uplink(k + 1, sc, s) for k, s in enumerate(states)]
    local = scripted_expert()
    want = [local.act(PolicyInput(u.depth, u.state, "fly", None, sc.goal.position, u.detection)).action for u in ups]
    got = []
    with _connect(expert_server) as s:
        write_frame(s, SessionInit("fly", None, sc.goal.position))
        for u in ups:
            write_frame(s, u)
            got.append(read_frame(s).action)
    assert got == want


def test_out_of_order_frame_closes_session_only(expert_server):
    sc = generate_scene(4)
    st0 = sample_start(sc, np.random.default_rng(0))
    with _connect(expert_server) as s:
        write_frame(s, SessionInit("fly", None, sc.goal.position))
        write_frame(s, _uplink(5, sc, st0))
        assert read_frame(s).frame_id == 5
        write_frame(s, _uplink(5, sc, st0))
        err = read_frame(s)
    assert isinstance(err, ErrorMsg) and err.code == E_ORDER
    with _connect(expert_server) as s:  # server still serves new sessions
        write_frame(s, SessionInit("fly", None, sc.goal.position))
        write_frame(s, _uplink(1, sc, st0))
        assert read_frame(s).frame_id == 1


def test_uplink_before_init_is_a_state_error(expert_server):
    sc = generate_scene(4)
    with _connect(expert_server) as s:
        write_frame(s, _uplink(1, sc, sample_start(sc, np.random.default_rng(0))))
        err = read_frame(s)
    assert isinstance(err, ErrorMsg) and err.code == E_STATE


def test_graceful_shutdown_drains_in_flight_frames():
    sc = generate_scene(5)
    st0 = sample_start(sc, np.random.default_rng(0))
    srv = serve("127.0.0.1:0", scripted_expert, PipelineConfig(30.0, 30.0, 0.0))
    s = _connect(srv)
    write_frame(s, SessionInit("fly", None, sc.goal.position))
    for k in range(1, 4):
        write_frame(s, _uplink(k, sc, st0))
    time.sleep(0.02)
    srv.shutdown(drain=True)
    got = []
    try:
        while True:
            m = read_frame(s)
            if isinstance(m, Downlink):
                got.append(m.frame_id)
    except (ConnectionError, ProtocolError, OSError):
        pass
    s.close()
    assert got == [1, 2, 3]


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


def test_remote_flight_matches_in_process_run(expert_server):
    sc = generate_scene(6)
    trace = []
    local = run_episode(sc, scripted_expert(), seed=6, trace=trace)
    flog = FlightLog()
    remote = fly_client(expert_server.address, sc, seed=6, log_to=flog, timeout_s=5.0)
    assert flog.timeouts == 0 and flog.error is None
    assert remote == local
    assert [a.as_tuple() for a in flog.actions] == [a.as_tuple() for a in trace]


class _SlowOnce:
    def __init__(self, at, sleep_s):
        self.inner, self.at, self.sleep_s, self.n = scripted_expert(), at, sleep_s, 0

    def reset(self):
        self.inner.reset()

    def act(self, inp):
        self.n += 1
        if self.n == self.at:
            time.sleep(self.sleep_s)
        return self.inner.act(inp)


def test_timeout_injection_gives_one_hover_tick():
    sc = generate_scene(7)
    srv = serve("127.0.0.1:0", lambda: _SlowOnce(5, 0.7), ZERO)
    try:
        flog = FlightLog()
        fly_client(srv.address, sc, seed=7, limits=EpisodeLimits(max_steps=30), timeout_s=0.5, log_to=flog)
    finally:
        srv.shutdown()
    assert flog.timeouts == 1
    assert flog.actions[4] == HOVER
    assert sum(a == HOVER for a in flog.actions[:10]) == 1
    assert flog.stale == 1


def test_server_killed_mid_episode_aborts():
    sc = generate_scene(8)
    srv = serve("127.0.0.1:0", scripted_expert, PipelineConfig(10.0, 10.0, 0.0))
    flog = FlightLog()
    out = {}

    def fly():
        out["o"] = fly_client(srv.address, sc, seed=8, limits=EpisodeLimits(max_steps=1000, d_tau=0.0),
                              timeout_s=2.0, log_to=flog)

    t = threading.Thread(target=fly)
    t.start()
    time.sleep(0.5)
    srv.shutdown(drain=False)
    t.join(10)
    assert not t.is_alive()
    assert out["o"].termination == "aborted"
    assert flog.error is not None


def test_unreachable_server():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError):
        fly_client(f"127.0.0.1:{port}", generate_scene(1), connect_timeout=1.0)


# ---------------------------------------------------------------------------
# pipeline latency model
# ---------------------------------------------------------------------------


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(-1.0)
    with pytest.raises(ValueError):
        PipelineConfig(queue_capacity=2)


def test_sequential_latency_is_v_plus_l():
    r = bench_pipeline(PipelineConfig(), 30, "sequential")
    assert r.steady_state_ms == pytest.approx(120, abs=3)


def test_pipelined_latency_and_throughput():
    r = bench_pipeline(PipelineConfig(), 60, "pipelined")
    assert r.steady_state_ms == pytest.approx(85, abs=5)
    assert r.throughput_fps == pytest.approx(15, abs=1)
    assert r.first_frame_ms >= r.steady_state_ms


def test_single_frame_sees_no_overlap():
    r = bench_pipeline(PipelineConfig(), 1, "pipelined")
    assert r.n_completed == 1
    assert r.first_frame_ms == pytest.approx(140, abs=5)


def test_zero_cost_stages_only_show_scheduler_noise():
    r = bench_pipeline(ZERO, 100, "pipelined")
    assert max(r.latencies_ms) < 5


def test_swapped_stage_costs_are_symmetric():
    a = bench_pipeline(PipelineConfig(55, 65, 20), 40, "pipelined")
    b = bench_pipeline(PipelineConfig(65, 55, 20), 40, "pipelined")
    assert abs(a.steady_state_ms - b.steady_state_ms) <= 5
    assert b.steady_state_ms == pytest.approx(85, abs=5)


@pytest.mark.parametrize("v,l,ipc", [(10, 30, 5), (30, 10, 5), (20, 20, 0)])
def test_steady_state_window(v, l, ipc):
    r = bench_pipeline(PipelineConfig(v, l, ipc), 40, "pipelined")
    target = max(v, l) + ipc
    assert target - 5 <= r.steady_state_ms <= target + 10
    assert r.first_frame_ms >= r.steady_state_ms


def test_pipelining_never_changes_results():
    frames = list(range(50))
    vision = simulated_stage(1, lambda x: x * 3 + 1)
    llm = simulated_stage(2, lambda x: math.sin(x))
    a = pipelined_execute(frames, vision, llm, PipelineConfig(1, 2, 0), "sequential")
    b = pipelined_execute(frames, vision, llm, PipelineConfig(1, 2, 0), "pipelined")
    assert a.results == b.results == [math.sin(3 * x + 1) for x in frames]


@pytest.mark.parametrize("mode", ["sequential", "pipelined"])
def test_stage_failure_returns_partial_results(mode):
    def llm(x):
        if x == 7:
            raise RuntimeError("boom")
        return x

    r = pipelined_execute(range(20), lambda x: x, llm, ZERO, mode)
    assert isinstance(r, LatencyReport)
    assert r.results == list(range(7))
    assert "boom" in r.error


def test_unknown_mode():
    with pytest.raises(ValueError):
        pipelined_execute([1], lambda x: x, lambda x: x, ZERO, "parallel")
