"""Render service endpoints, clamping, purity, and the websocket stream."""

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from emosplat.checkpoint import load_checkpoint
from emosplat.service import create_app
from emosplat.training import Trainer, TrainConfig, synth_dataset


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    ds, oracle = synth_dataset(4, frames=5, size=64)
    cfg = TrainConfig(seed=1, scale=1e12)
    tr = Trainer(ds, cfg, gt_fields=(oracle.mouth_canonical, oracle.face_canonical))
    tr.train()
    tr.save_checkpoint(root / "ck")
    return root / "ck"


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def client(bundle):
    app = create_app(bundle, threads=2)
    with TestClient(app) as c:
        yield c


class TestMeta:
    def test_condition_dims_echo(self, client):
        meta = client.get("/v1/meta").json()
        assert meta["condition_dims"] == {"a": 32, "u": 7, "e": 2}
        assert meta["frame_count"] == 5
        assert len(meta["va_points"]) == 12

    def test_503_before_load(self, bundle):
        app = create_app(bundle)
        c = TestClient(app)  # no lifespan: checkpoint not loaded yet
        assert c.get("/v1/meta").status_code == 503
        assert c.get("/v1/render").status_code == 503


class TestRenderEndpoint:
    def test_out_of_range_valence_clamped_with_header(self, client):
        r = client.get("/v1/render", params={"frame": 0, "v": 1.5})
        assert r.status_code == 200
        assert r.headers["X-Clamped"] == "v"
        clamped = client.get("/v1/render", params={"frame": 0, "v": 1.0})
        assert "X-Clamped" not in clamped.headers
        assert r.content == clamped.content

    def test_unknown_frame_404(self, client):
        assert client.get("/v1/render", params={"frame": 99}).status_code == 404

    def test_invalid_size_400(self, client):
        assert client.get("/v1/render", params={"frame": 0, "w": 0}).status_code == 400

    def test_concurrent_identical_requests_byte_identical(self, client):
        def go(_):
            return client.get("/v1/render", params={"frame": 1, "v": 0.4, "a": -0.2}).content

        with ThreadPoolExecutor(4) as pool:
            blobs = list(pool.map(go, range(8)))
        assert all(b == blobs[0] for b in blobs)
        assert blobs[0][:4] == b"\x89PNG"

    def test_orbit_and_resize(self, client):
        r = client.get("/v1/render", params={"frame": 0, "yaw": 0.3, "pitch": -0.1, "w": 48, "h": 40})
        assert r.status_code == 200
        from io import BytesIO

        from PIL import Image

        img = Image.open(BytesIO(r.content))
        assert img.size == (48, 40)

    def test_request_storm_leaves_checkpoint_unchanged(self, client, bundle):
        before = dir_digest(bundle)
        rng = np.random.default_rng(0)
        for _ in range(100):
            params = {"frame": int(rng.integers(5)), "v": float(rng.uniform(-1.2, 1.2)),
                      "a": float(rng.uniform(-1.2, 1.2))}
            assert client.get("/v1/render", params=params).status_code == 200
        assert dir_digest(bundle) == before


class TestStream:
    def test_websocket_round_trip(self, client):
        with client.websocket_connect("/v1/stream") as ws:
            ws.send_text(json.dumps({"frame": 2, "v": 0.5, "a": 0.5}))
            data = ws.receive_bytes()
            assert data[:4] == b"\x89PNG"
            # matches the GET path byte for byte
            get = client.get("/v1/render", params={"frame": 2, "v": 0.5, "a": 0.5})
            assert data == get.content

    def test_websocket_bad_request(self, client):
        with client.websocket_connect("/v1/stream") as ws:
            ws.send_text("{not json")
            reply = json.loads(ws.receive_text())
            assert reply["status"] == 400

    def test_websocket_unknown_frame(self, client):
        with client.websocket_connect("/v1/stream") as ws:
            ws.send_text(json.dumps({"frame": 50}))
            reply = json.loads(ws.receive_text())
            assert reply["status"] == 404
