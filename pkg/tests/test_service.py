"""Cloud state and HTTP service tests: scheduling, idempotence, guide delivery."""
import numpy as np
import pytest
from fastapi.testclient import TestClient

from fedsteer import protocol as proto
from fedsteer.client import CloudError, FilClient
from fedsteer.cloud import CloudState, ServerConfig
from fedsteer.fusion import ModelRegistry, build_scene_bank, fuse_round, train_guide
from fedsteer.imitation import collect_demonstrations, train_bc
from fedsteer.nn import (
    LayerSpec,
    TrainConfig,
    forward,
    init_model,
    serialize_params,
)
from fedsteer.obs import ModalityId
from fedsteer.service import create_app

SPEC = (
    LayerSpec("dense", 256, 64, "relu"),
    LayerSpec("dense", 64, 32, "relu"),
    LayerSpec("dense", 32, 1, "tanh"),
)
GUIDE_CFG = TrainConfig(learning_rate=0.005, weight_decay=1e-3, epochs=10,
                        batch_size=32, seed=0)


@pytest.fixture(scope="module")
def bank():
    return build_scene_bank([560, 561], scenes_per_seed=40, stride=4)


@pytest.fixture(scope="module")
def private_models():
    out = {}
    for i, m in enumerate(ModalityId):
        data = collect_demonstrations([230 + 2 * i, 231 + 2 * i], m, 300)
        cfg = TrainConfig(learning_rate=0.005, epochs=10, batch_size=32, seed=i)
        out[f"robot-{i}"], _ = train_bc(data, SPEC, cfg)
    return out


def fresh_state(bank, mode="synchronous", robots=3, every=2):
    cfg = ServerConfig(robots=robots, fusion_every=every, mode=mode,
                       async_interval=0.05)
    return CloudState(bank=bank, net_spec=SPEC, guide_cfg=GUIDE_CFG,
                      server_cfg=cfg)


def say_hello(state, models):
    for rid, model in models.items():
        reply = state.hello(rid, model.modality)
        assert isinstance(reply, proto.Ack)


class TestSyncScheduling:
    def test_three_fusions_over_six_rounds(self, bank, private_models):
        # n=3, f=2: rounds 1..6 from everyone produce fusions at 2, 4, 6.
        state = fresh_state(bank)
        say_hello(state, private_models)
        for round in range(1, 7):
            for rid, model in private_models.items():
                m = model.copy()
                m.version = round
                reply = state.upload(rid, round, serialize_params(m))
                assert isinstance(reply, proto.Ack), reply
        assert state.fusion_count == 3
        assert state.labels_round == 6

    def test_single_fusion_after_two_rounds(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        for round in (1, 2):
            for rid, model in private_models.items():
                m = model.copy()
                m.version = round
                state.upload(rid, round, serialize_params(m))
        assert state.fusion_count == 1
        assert state.labels_round == 2

    def test_no_fusion_until_all_robots(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        items = list(private_models.items())
        for rid, model in items[:2]:  # third robot never uploads
            m = model.copy()
            m.version = 2
            state.upload(rid, 2, serialize_params(m))
        assert state.fusion_count == 0

    def test_duplicate_upload_changes_nothing(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        rid, model = next(iter(private_models.items()))
        m = model.copy()
        m.version = 1
        blob = serialize_params(m)
        assert isinstance(state.upload(rid, 1, blob), proto.Ack)
        before = (state.registry.get(rid).version, state.uploads_since_fusion)
        assert isinstance(state.upload(rid, 1, blob), proto.Ack)
        after = (state.registry.get(rid).version, state.uploads_since_fusion)
        assert before == after

    def test_stale_round_rejected(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        rid, model = next(iter(private_models.items()))
        m = model.copy()
        m.version = 3
        state.upload(rid, 3, serialize_params(m))
        reply = state.upload(rid, 2, serialize_params(m))
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_STALE_UPLOAD


class TestAsyncMode:
    def test_fusion_with_partial_registry(self, bank, private_models):
        # One slow robot: the timer trigger fuses over the two that arrived.
        state = fresh_state(bank, mode="asynchronous")
        say_hello(state, private_models)
        items = list(private_models.items())
        for rid, model in items[:2]:
            m = model.copy()
            m.version = 1
            state.upload(rid, 1, serialize_params(m))
        assert state.maybe_fuse_async() is True
        assert state.fusion_count == 1
        assert all(len(l.contributors) == 2 for l in state.labels)

    def test_no_refusion_without_new_uploads(self, bank, private_models):
        state = fresh_state(bank, mode="asynchronous")
        say_hello(state, private_models)
        rid, model = next(iter(private_models.items()))
        m = model.copy()
        m.version = 1
        state.upload(rid, 1, serialize_params(m))
        assert state.maybe_fuse_async() is True
        assert state.maybe_fuse_async() is False
        assert state.fusion_count == 1


class TestGuideDelivery:
    def test_guide_before_fusion_is_error(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        reply = state.request_guide("robot-0", ModalityId.OCCUPANCY)
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_NO_GUIDE

    def test_served_guide_matches_local_training(self, bank, private_models):
        # The served bytes must equal a guide trained outside the server from
        # the same registry snapshot, bank, spec, config and fusion round.
        state = fresh_state(bank)
        say_hello(state, private_models)
        for round in (1, 2):
            for rid, model in private_models.items():
                m = model.copy()
                m.version = round
                state.upload(rid, round, serialize_params(m))
        reply = state.request_guide("robot-0", ModalityId.OCCUPANCY)
        assert isinstance(reply, proto.Guide)
        assert reply.fusion_round == 2

        registry = ModelRegistry()
        for rid, model in private_models.items():
            m = model.copy()
            m.version = 2
            registry.register(rid, m, round=2)
        labels = fuse_round(registry, bank, t=2)
        local, _ = train_guide(ModalityId.OCCUPANCY, bank, labels, SPEC,
                               GUIDE_CFG)
        assert reply.params == serialize_params(local)

    def test_guide_cache_reused_and_invalidated(self, bank, private_models):
        state = fresh_state(bank)
        say_hello(state, private_models)
        for round in (1, 2):
            for rid, model in private_models.items():
                m = model.copy()
                m.version = round
                state.upload(rid, round, serialize_params(m))
        a = state.request_guide("robot-0", ModalityId.OCCUPANCY)
        assert state.status()["cached_guides"] == ["occupancy"]
        b = state.request_guide("robot-0", ModalityId.OCCUPANCY)
        assert a.params == b.params
        for rid, model in private_models.items():
            m = model.copy()
            m.version = 4
            state.upload(rid, 4, serialize_params(m))
        assert state.status()["cached_guides"] == []


class TestHandshake:
    def test_duplicate_hello(self, bank):
        state = fresh_state(bank)
        assert isinstance(state.hello("r", ModalityId.OCCUPANCY), proto.Ack)
        reply = state.hello("r", ModalityId.OCCUPANCY)
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_DUPLICATE_ROBOT

    def test_upload_requires_hello(self, bank, private_models):
        state = fresh_state(bank)
        model = next(iter(private_models.values()))
        reply = state.upload("ghost", 1, serialize_params(model))
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_UNKNOWN_ROBOT

    def test_garbage_params_rejected(self, bank):
        state = fresh_state(bank)
        state.hello("r", ModalityId.OCCUPANCY)
        reply = state.upload("r", 1, b"definitely not params")
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_BAD_PARAMS


class TestHttpSurface:
    @pytest.fixture()
    def client(self, bank):
        state = fresh_state(bank)
        app = create_app(state)
        with TestClient(app) as client:
            yield client

    def exchange(self, client, msg):
        resp = client.post("/fil", content=proto.encode(msg),
                           headers={"content-type": "application/octet-stream"})
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("application/octet-stream")
        return proto.decode(resp.content)

    def test_hello_roundtrip(self, client):
        reply = self.exchange(client, proto.Hello("w", ModalityId.DISTANCE))
        assert reply == proto.Ack(0)

    def test_garbage_frame_gets_error_reply(self, client):
        resp = client.post("/fil", content=b"not a frame at all")
        reply = proto.decode(resp.content)
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_BAD_FRAME

    def test_unknown_type_gets_unsupported(self, client):
        frame = bytearray(proto.encode(proto.Ack(1)))
        frame[6] = 0xFF
        reply = proto.decode(client.post("/fil", content=bytes(frame)).content)
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_UNSUPPORTED_TYPE

    def test_ack_is_not_a_server_request(self, client):
        reply = self.exchange(client, proto.Ack(1))
        assert isinstance(reply, proto.Error)
        assert reply.code == proto.ERR_UNSUPPORTED_TYPE

    def test_status_and_healthz(self, client):
        assert client.get("/healthz").json() == {"status": "ok"}
        body = client.get("/status").json()
        assert body["mode"] == "synchronous"
        assert body["bank_size"] == 80
        assert body["fusion_count"] == 0

    def test_labels_empty_before_fusion(self, client):
        body = client.get("/labels").json()
        assert body["count"] == 0

    def test_manual_fuse_endpoint(self, client, private_models):
        for i, (rid, model) in enumerate(private_models.items()):
            self.exchange(client, proto.Hello(rid, model.modality))
            m = model.copy()
            m.version = 1
            self.exchange(client, proto.UploadParams(
                rid, 1, serialize_params(m)))
        body = client.post("/fuse").json()
        assert body["fused"] is True
        labels = client.get("/labels").json()
        assert labels["count"] == 80
        assert all(l["n_contributors"] == 3 for l in labels["labels"])


class TestRealHttpClient:
    def test_end_to_end_over_sockets(self, bank, private_models,
                                     uvicorn_server):
        state = fresh_state(bank)
        handle = uvicorn_server(create_app(state))
        with FilClient(handle.base_url) as client:
            for rid, model in private_models.items():
                assert client.hello(rid, model.modality) == 0
            for round in (1, 2):
                for rid, model in private_models.items():
                    m = model.copy()
                    m.version = round
                    assert client.upload(rid, round, m) == round
            guide, fusion_round = client.request_guide(
                "robot-0", ModalityId.OCCUPANCY)
            assert fusion_round == 2
            assert guide.modality == ModalityId.OCCUPANCY
            assert guide.version == 1
            rng = np.random.default_rng(0)
            from fedsteer.obs import Observation, GRID_SIZE
            obs = Observation(ModalityId.OCCUPANCY,
                              rng.random((GRID_SIZE, GRID_SIZE)).astype(np.float32))
            assert abs(forward(guide, obs)) <= 0.69

    def test_error_surfaced_with_code(self, bank, uvicorn_server):
        state = fresh_state(bank)
        handle = uvicorn_server(create_app(state))
        with FilClient(handle.base_url) as client:
            client.hello("r", ModalityId.OCCUPANCY)
            with pytest.raises(CloudError) as exc:
                client.request_guide("r", ModalityId.OCCUPANCY)
            assert exc.value.code == proto.ERR_NO_GUIDE

    def test_client_mid_upload_crash_leaves_registry_intact(
            self, bank, private_models, uvicorn_server):
        # Open a raw socket, declare a large body, send half a frame, die.
        import socket

        state = fresh_state(bank)
        handle = uvicorn_server(create_app(state))
        with FilClient(handle.base_url) as client:
            client.hello("robot-0", ModalityId.OCCUPANCY)
        blob = serialize_params(next(iter(private_models.values())))
        frame = proto.encode(proto.UploadParams("robot-0", 1, blob))
        head = (f"POST /fil HTTP/1.1\r\nhost: {handle.host}\r\n"
                f"content-type: application/octet-stream\r\n"
                f"content-length: {len(frame)}\r\n\r\n").encode()
        with socket.create_connection((handle.host, handle.port)) as sock:
            sock.sendall(head + frame[:len(frame) // 2])
        # connection closed mid-body: the upload must not have registered
        assert len(state.registry) == 0
        assert state.robots["robot-0"].last_round == 0
