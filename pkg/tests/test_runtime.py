import socket
import struct

import numpy as np
import pytest

from eeoffload.distortion import Kind
from eeoffload.model import BranchRecord, EarlyExitModel, ExitTaken, InferenceResult
from eeoffload.runtime import codec, netem, transport
from eeoffload.runtime.services import (
    CloudService, CostModel, EdgeService, InProcessTransport, LatencyBreakdown, Mode, ModelIdMismatch,
    TransportError,
)


@pytest.fixture(scope="module")
def model():
    m = EarlyExitModel.build(3, (3, 32, 32), width=4)
    m.init_xavier(np.random.default_rng(0))
    for b in m.branches.values():
        b.dense.bias.value[...] = np.random.default_rng(1).normal(size=3)
    return m.finalize()


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(2).integers(0, 256, size=(40, 64, 64, 3), dtype=np.uint8)


def random_request(rng, model_id="m"):
    recs = tuple(BranchRecord(i + 1, int(rng.integers(10)), float(rng.random())) for i in range(3))
    return codec.OffloadRequest(model_id, Kind.NOISE, 10, rng.normal(size=(8, 4, 4)).astype(np.float32),
                                recs, float(rng.random()))


# --- codec -----------------------------------------------------------------------

def test_request_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        req = random_request(rng)
        buf = codec.encode_request(req)
        back = codec.decode_request(buf)
        assert back.payload.tobytes() == req.payload.tobytes() and back.payload.shape == req.payload.shape
        assert (back.model_id, back.kind, back.partition_point, back.per_branch, back.p_tar) == \
            (req.model_id, req.kind, req.partition_point, req.per_branch, req.p_tar)
        assert codec.encode_request(back) == buf


def test_frame_layout_by_hand():
    req = codec.OffloadRequest("ab", Kind.BLUR, 7, np.array([[1.5]], np.float32), (BranchRecord(1, 2, 0.25),), 0.8)
    want_body = (b"\x02\x00ab" + b"\x01" + struct.pack("<I", 7) + struct.pack("<d", 0.8)
                 + struct.pack("<I", 1) + struct.pack("<IId", 1, 2, 0.25)
                 + struct.pack("<III", 2, 1, 1) + struct.pack("<f", 1.5))
    inner = b"EOFF" + struct.pack("<I", 1) + b"\x01" + want_body
    assert codec.encode_request(req) == struct.pack("<I", len(inner)) + inner


def test_response_round_trip():
    recs = (BranchRecord(1, 0, 0.1), BranchRecord(4, 2, 0.7))
    for taken in ExitTaken:
        resp = codec.OffloadResponse(InferenceResult(2, 0.7, taken, 4, recs, True), 1.25)
        back = codec.decode_response(codec.encode_response(resp))
        assert back == resp


def test_structured_errors():
    buf = codec.encode_request(random_request(np.random.default_rng(1)))
    with pytest.raises(codec.TruncatedFrameError):
        codec.decode_request(buf[:-1])
    with pytest.raises(codec.TruncatedFrameError):
        codec.decode_request(buf[:2])
    with pytest.raises(codec.BadMagicError):
        codec.decode_request(buf[:4] + b"XOFF" + buf[8:])
    bumped = buf[:8] + struct.pack("<I", codec.PROTOCOL_VERSION + 1) + buf[12:]
    with pytest.raises(codec.VersionMismatchError, match=r"version 2.*speaks 1"):
        codec.decode_request(bumped)
    with pytest.raises(codec.FrameLengthError):
        codec.decode_request(buf + b"\0")
    # declared length grows, contents don't: field table disagrees with payload
    n = codec.frame_length(buf)
    lying = struct.pack("<I", n + 4) + buf[4:] + b"\0\0\0\0"
    with pytest.raises(codec.FrameLengthError):
        codec.decode_request(lying)
    with pytest.raises(codec.CodecError):
        codec.decode_request(codec.encode_error(1, "x")[:-1])


def test_error_frames():
    frame = codec.encode_error(codec.ERR_SHAPE, "bad shape")
    err = codec.decode_error(frame)
    assert (err.code, err.message) == (codec.ERR_SHAPE, "bad shape")
    with pytest.raises(codec.RemoteError) as info:
        codec.decode_response(frame)
    assert info.value.code == codec.ERR_SHAPE


def test_request_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        codec.OffloadRequest("m", Kind.BLUR, 1, np.zeros(2), (BranchRecord(1, 0, 1.5),), 0.8)
    with pytest.raises(ValueError):
        codec.OffloadRequest("m", Kind.BLUR, 1, np.zeros(2), (), 1.1)
    assert random_request(rng).payload.dtype == np.dtype("<f4")


# --- network emulation -------------------------------------------------------------

def test_emulate_transfer_values():
    sa = netem.PRESETS["sa-east-1"]
    assert netem.emulate_transfer(1_000_000, sa) == pytest.approx(12 + 8e6 / 93e6 * 1000)
    assert abs(netem.emulate_transfer(1_000_000, sa) - 98.0) < 0.1
    assert netem.emulate_transfer(0, sa) == 12.0
    d = [netem.emulate_transfer(4096, netem.PRESETS[n]) for n in ("sa-east-1", "us-west-1", "eu-west-3")]
    assert d[0] < d[1] < d[2]
    with pytest.raises(ValueError):
        netem.emulate_transfer(-1, sa)


def test_presets_match_table():
    got = {n: (p.throughput_bps, p.rtt_ms) for n, p in netem.PRESETS.items()}
    assert got == {"sa-east-1": (93e6, 12.0), "us-west-1": (68e6, 182.0), "eu-west-3": (42e6, 213.0)}


def test_profile_validation_and_files(tmp_path):
    with pytest.raises(ValueError):
        netem.NetworkProfile("x", 0, 10)
    f = tmp_path / "p.csv"
    f.write_text("# lab links\nname,throughput_bps,rtt_ms\nlan,1e9,0.5\n\nwan,5e6,80\n")
    profiles = netem.load_profiles(f)
    assert profiles["wan"] == netem.NetworkProfile("wan", 5e6, 80.0)
    assert netem.get_profile("lan", profiles).rtt_ms == 0.5
    with pytest.raises(ValueError, match="unknown network profile"):
        netem.get_profile("mars")
    f.write_text("name,rtt_ms\nx,3\n")
    with pytest.raises(ValueError):
        netem.load_profiles(f)


def test_virtual_clock_and_jitter():
    c = netem.VirtualClock()
    c.advance(2.5)
    assert c.measure(lambda: 7, 1.0) == (7, 1.0) and c.now_ms() == 3.5
    with pytest.raises(ValueError):
        c.advance(-1)
    prof = netem.PRESETS["us-west-1"]
    a = netem.NetworkEmulator(prof, netem.VirtualClock(), jitter_ms=5.0, seed=3)
    b = netem.NetworkEmulator(prof, netem.VirtualClock(), jitter_ms=5.0, seed=3)
    da = [a.transfer(1000) for _ in range(200)]
    assert da == [b.transfer(1000) for _ in range(200)]
    assert a.clock.now_ms() == pytest.approx(sum(da))
    assert np.std(da) == pytest.approx(5.0, rel=0.2)
    assert netem.NetworkEmulator(prof, netem.VirtualClock()).delay_ms(1000) == netem.emulate_transfer(1000, prof)


# --- services ------------------------------------------------------------------

def edge_for(model, p_tar, mode=Mode.PRISTINE_BASELINE, profile="sa-east-1", classifier=None, **kw):
    tr = InProcessTransport(CloudService(model))
    return EdgeService(model, tr, netem.PRESETS[profile], p_tar, mode, classifier, **kw), tr


def test_local_exit_never_touches_transport(model, images):
    edge, tr = edge_for(model, 0.0)
    for img in images[:10]:
        rep = edge.handle(img)
        assert not rep.result.offloaded and rep.latency.emulated_network_ms == 0
        assert rep.latency.serialize_ms == 0 and rep.latency.cloud_compute_ms == 0
    assert tr.calls == 0


def test_forced_offload_latency_additivity(model, images):
    edge, tr = edge_for(model, 1.0)
    for img in images[:10]:
        rep = edge.handle(img)
        lat = rep.latency
        assert rep.result.offloaded
        assert lat.total_ms >= netem.emulate_transfer(rep.payload_bytes, edge.profile)
        assert abs(lat.total_ms - lat.parts_sum()) < 0.01
        assert min(lat.as_dict().values()) >= 0
    assert tr.calls == 10


def test_profiles_differ_by_transfer_delay(model, images):
    a, _ = edge_for(model, 1.0, profile="sa-east-1")
    b, _ = edge_for(model, 1.0, profile="eu-west-3")
    ra, rb = a.handle(images[0]), b.handle(images[0])
    want = (netem.emulate_transfer(ra.payload_bytes, netem.PRESETS["eu-west-3"])
            - netem.emulate_transfer(ra.payload_bytes, netem.PRESETS["sa-east-1"]))
    assert rb.latency.total_ms - ra.latency.total_ms == pytest.approx(want, abs=1e-9)


def test_split_equality_in_process(model, images):
    from eeoffload import data

    for kind, mode in ((Kind.PRISTINE, Mode.PRISTINE_BASELINE), (Kind.NOISE, Mode.FORCED_NOISE)):
        for p_tar in (0.4, 0.6, 0.9):
            edge, _ = edge_for(model, p_tar, mode)
            for img in images[:15]:
                want = model.infer(kind, data.to_network_input(img, 32), p_tar)
                assert edge.handle(img).result == want


def test_virtual_trace_is_deterministic(model, images):
    runs = []
    for _ in range(2):
        edge, _ = edge_for(model, 0.6, jitter_ms=3.0, seed=9)
        runs.append([(r.result, r.latency) for r in map(edge.handle, images[:12])])
    assert runs[0] == runs[1]


def test_expert_mode_charges_classifier_and_wrong_stub_degrades_gracefully(model, images):
    wrong = {Kind.PRISTINE: Kind.NOISE, Kind.BLUR: Kind.PRISTINE, Kind.NOISE: Kind.BLUR}
    calls = []

    def stub(img):
        calls.append(1)
        return wrong[Kind.PRISTINE]

    edge, _ = edge_for(model, 0.7, Mode.EXPERT, classifier=stub)
    reps = [edge.handle(img) for img in images[:8]]
    assert len(calls) == 8
    assert all(r.kind is Kind.NOISE for r in reps)
    base, _ = edge_for(model, 0.7)
    assert all(base.handle(img).latency.classifier_ms == 0 for img in images[:3])
    with pytest.raises(ValueError):
        edge_for(model, 0.7, Mode.EXPERT)


def test_expert_mode_with_real_classifier_charges_cost(model, images):
    from eeoffload.classifier import DistortionClassifier, build_network

    net = build_network(16, 2)
    net.init_xavier(np.random.default_rng(0))
    clf = DistortionClassifier(net)
    cost = CostModel()
    edge, _ = edge_for(model, 0.5, Mode.EXPERT, classifier=clf, cost=cost)
    rep = edge.handle(images[0])
    assert rep.latency.classifier_ms == pytest.approx(cost.edge_ms(clf.macs() + 2.5 * 4096 * 12))


def test_cloud_errors_are_frames(model):
    cloud = CloudService(model)
    rng = np.random.default_rng(0)
    good = codec.OffloadRequest(model.model_id, Kind.PRISTINE, model.partition_point,
                                np.zeros(model.partition_shape, np.float32), (), 0.8)
    assert isinstance(codec.decode_response(cloud.handle_frame(codec.encode_request(good))), codec.OffloadResponse)
    cases = {
        codec.ERR_UNKNOWN_MODEL: random_request(rng, model_id="nope"),
        codec.ERR_SHAPE: codec.OffloadRequest(model.model_id, Kind.PRISTINE, model.partition_point,
                                              np.zeros((3, 2, 2), np.float32), (), 0.8),
    }
    for code, req in cases.items():
        err = codec.decode_error(cloud.handle_frame(codec.encode_request(req)))
        assert err.code == code
    assert codec.decode_error(cloud.handle_frame(b"garbage!")).code == codec.ERR_BAD_REQUEST
    wrong_pp = codec.OffloadRequest(model.model_id, Kind.PRISTINE, 3, np.zeros(model.partition_shape), (), 0.8)
    assert codec.decode_error(cloud.handle_frame(codec.encode_request(wrong_pp))).code == codec.ERR_SHAPE


def test_cloud_final_and_fallback(model):
    import math

    m = model.clone()
    m.finalized = False
    fb = m.branch(m.final_exit, Kind.PRISTINE)
    fb.dense.weight.value[...] = 0
    cloud = lambda: CloudService(m.finalize())  # noqa: E731
    side = (BranchRecord(1, 0, 0.3), BranchRecord(2, 2, 0.75), BranchRecord(3, 1, 0.5))
    req = lambda: codec.OffloadRequest(m.model_id, Kind.PRISTINE, m.partition_point,  # noqa: E731
                                       np.ones(m.partition_shape, np.float32), side, 0.8)
    fb.dense.bias.value[...] = [math.log(2 * 9), 0, 0]  # 0.9
    r = cloud().handle(req()).result
    assert (r.exit_taken, r.predicted_class) == (ExitTaken.FINAL, 0)
    fb.dense.bias.value[...] = [math.log(2 * 0.6 / 0.4), 0, 0]  # 0.6
    r = cloud().handle(req()).result
    assert (r.exit_taken, r.predicted_class, r.confidence, r.exit_id) == (ExitTaken.FALLBACK, 2, 0.75, 2)


def test_model_id_mismatch(model):
    with pytest.raises(ModelIdMismatch):
        edge_for(model, 0.5, cloud_model_id="different")
    other = model.clone()
    other.branch(1, Kind.PRISTINE).temperature = 3.0
    other.finalize()
    edge = EdgeService(other, InProcessTransport(CloudService(model)), netem.PRESETS["sa-east-1"], 1.0,
                       Mode.PRISTINE_BASELINE)
    with pytest.raises(codec.RemoteError) as info:
        edge.handle(np.zeros((64, 64, 3), np.uint8))
    assert info.value.code == codec.ERR_UNKNOWN_MODEL


class DeadTransport:
    def send(self, frame):
        raise ConnectionRefusedError("nobody home")


def test_unreachable_cloud_reports_partial_breakdown(model, images):
    edge = EdgeService(model, DeadTransport(), netem.PRESETS["us-west-1"], 1.0, Mode.PRISTINE_BASELINE)
    with pytest.raises(TransportError) as info:
        edge.handle(images[0])
    lat = info.value.breakdown
    assert isinstance(lat, LatencyBreakdown)
    assert lat.emulated_network_ms > 0 and lat.cloud_compute_ms == 0 and lat.total_ms > 0


# --- transports ---------------------------------------------------------------------

def test_tcp_split_equality_and_counter(model, images, monkeypatch):
    from eeoffload import data

    with transport.TcpCloudServer(CloudService(model)) as srv:
        tcp = transport.TcpTransport(srv.address)
        opened = []
        real = socket.create_connection
        monkeypatch.setattr(transport.socket, "create_connection",
                            lambda *a, **k: opened.append(1) or real(*a, **k))
        edge = EdgeService(model, tcp, netem.PRESETS["sa-east-1"], 0.6, Mode.PRISTINE_BASELINE)
        local = 0
        for img in images[:20]:
            rep = edge.handle(img)
            assert rep.result == model.infer(Kind.PRISTINE, data.to_network_input(img, 32), 0.6)
            local += not rep.result.offloaded
        assert tcp.calls == len(opened) == 20 - local


def test_tcp_on_device_exit_uses_no_socket(model, images, monkeypatch):
    monkeypatch.setattr(transport.socket, "create_connection",
                        lambda *a, **k: pytest.fail("socket opened for an on-device exit"))
    tcp = transport.TcpTransport("127.0.0.1:9")
    edge = EdgeService(model, tcp, netem.PRESETS["sa-east-1"], 0.0, Mode.PRISTINE_BASELINE)
    for img in images[:5]:
        assert not edge.handle(img).result.offloaded
    assert tcp.calls == 0


def test_tcp_unreachable_is_transport_error(model, images):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    edge = EdgeService(model, transport.TcpTransport(f"127.0.0.1:{port}", timeout=2), netem.PRESETS["sa-east-1"],
                       1.0, Mode.PRISTINE_BASELINE)
    with pytest.raises(TransportError):
        edge.handle(images[0])


def test_http_cloud_and_edge_servers(model, images):
    with transport.HttpCloudServer(CloudService(model)) as cloud_srv:
        ht = transport.HttpTransport(cloud_srv.address)
        edge = EdgeService(model, ht, netem.PRESETS["eu-west-3"], 1.0, Mode.PRISTINE_BASELINE)
        ref = EdgeService(model, InProcessTransport(CloudService(model)), netem.PRESETS["eu-west-3"], 1.0,
                          Mode.PRISTINE_BASELINE)
        with transport.HttpEdgeServer(edge) as edge_srv:
            out = transport.post_image(edge_srv.address, images[3])
            want = ref.handle(images[3])
            assert out["predicted_class"] == want.result.predicted_class
            assert out["confidence"] == want.result.confidence
            assert out["offloaded"] is True and out["kind"] == "pristine"
            assert out["latency"] == want.latency.as_dict()
        assert ht.calls == 1


def test_http_bad_path_and_bad_image(model):
    import http.client

    with transport.HttpCloudServer(CloudService(model)) as srv:
        with pytest.raises(OSError, match="404"):
            transport.HttpTransport(f"http://{srv.address}/elsewhere").send(b"x")
    edge = EdgeService(model, DeadTransport(), netem.PRESETS["sa-east-1"], 0.0, Mode.PRISTINE_BASELINE)
    with transport.HttpEdgeServer(edge) as srv:
        host, port = transport.parse_address(srv.address)
        conn = http.client.HTTPConnection(host, port, timeout=10)
        conn.request("POST", "/v1/infer", body=b"not an image")
        resp = conn.getresponse()
        assert resp.status == 400 and "error" in resp.read().decode()
        conn.close()


def test_parse_address():
    assert transport.parse_address("example:80") == ("example", 80)
    assert transport.parse_address(":81") == ("127.0.0.1", 81)
    with pytest.raises(ValueError):
        transport.parse_address("nohost")
