"""HTTP session service: lifecycle, error mapping, concurrency guard,
disk persistence across restarts, and byte-exact replay."""

import base64
import hashlib
import io
import json
import os

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

from facemug.checkpoint import capture_model, save_checkpoint
from facemug.config import Config
from facemug.data import (image_to_png, png_to_image, save_semantic,
                          to_uint8)
from facemug.editor import default_registry_path, mine_default_directions
from facemug.embedders import ToyJointEmbedder
from facemug.evaluation import file_digest
from facemug.generator import FacemugModel
from facemug.service import build_app, replay_session


RES = 8


def b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def face_png(seed: int = 3, resolution: int = RES) -> bytes:
    g = torch.Generator().manual_seed(seed)
    return image_to_png(torch.rand(3, resolution, resolution,
                                   generator=g) * 2 - 1)


def mask_png(pixels=((2, 6), (2, 6)), resolution: int = RES) -> bytes:
    arr = np.zeros((resolution, resolution), dtype=np.uint8)
    (r0, r1), (c0, c1) = pixels
    arr[r0:r1, c0:c1] = 255
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_bool(pixels=((2, 6), (2, 6)), resolution: int = RES) -> np.ndarray:
    arr = np.zeros((resolution, resolution), dtype=bool)
    (r0, r1), (c0, c1) = pixels
    arr[r0:r1, c0:c1] = True
    return arr


@pytest.fixture(scope="module")
def svc(tmp_path_factory):
    torch.manual_seed(0)
    root = tmp_path_factory.mktemp("service")
    cfg = Config(resolution=RES, mapping_depth=2, warp_blocks=2,
                 agg_channels=8, text_iters=3)
    model = FacemugModel(cfg)
    ckpt_path = str(root / "model.fmug")
    save_checkpoint(capture_model(model, step=0), ckpt_path)
    registry = mine_default_directions(model, names=["brightness"],
                                       n_samples=32)
    registry.save(default_registry_path(ckpt_path))
    state_dir = str(root / "state")
    app = build_app(ckpt_path, state_dir=state_dir)
    app.state.editor._joint = ToyJointEmbedder(resolution=16)
    client = TestClient(app, raise_server_exceptions=False)
    return {"app": app, "client": client, "ckpt": ckpt_path,
            "state_dir": state_dir}


@pytest.fixture()
def client(svc):
    return svc["client"]


def new_session(client, blob: bytes = None) -> str:
    r = client.post("/v1/sessions", json={"image": b64(blob or face_png())})
    assert r.status_code == 200, r.text
    return r.json()["session_id"]


def post_edit(client, sid: str, **overrides):
    payload = {"mask": b64(mask_png()), "seed": 0}
    payload.update(overrides)
    return client.post(f"/v1/sessions/{sid}/edit", json=payload)


class TestLifecycle:
    def test_create_edit_history_undo_cycle(self, client):
        initial = face_png()
        sid = new_session(client, initial)

        r = post_edit(client, sid, seed=4)
        assert r.status_code == 200
        body = r.json()
        assert body["step_index"] == 1
        assert body["seed"] == 4
        assert body["bg_max_dev"] == 0.0
        assert "total_ms" in body["timings"]

        h = client.get(f"/v1/sessions/{sid}/history").json()
        assert len(h["steps"]) == 1
        step = h["steps"][0]
        assert step["step_index"] == 1
        assert step["output_hash"] and step["inputs_hash"]
        assert step["summary"]["modalities"] == []
        # history is metadata only: no pixel payloads
        assert "image" not in step and "mask" not in step

        u = client.post(f"/v1/sessions/{sid}/undo")
        assert u.status_code == 200
        assert u.json()["step_index"] == 0
        assert u.json()["image"] == b64(initial)
        assert client.get(f"/v1/sessions/{sid}/history").json()["steps"] == []

    def test_png_roundtrip_preserves_background_exactly(self, client):
        initial = face_png(seed=11)
        sid = new_session(client, initial)
        r = post_edit(client, sid)
        out = np.array(Image.open(io.BytesIO(
            base64.b64decode(r.json()["image"]))))
        ref = np.array(Image.open(io.BytesIO(initial)))
        outside = ~mask_bool()
        assert np.array_equal(out[outside], ref[outside])
        assert not np.array_equal(out[~outside], ref[~outside])

    def test_undo_restores_previous_step_bytes(self, client):
        sid = new_session(client)
        first = post_edit(client, sid, seed=1).json()["image"]
        post_edit(client, sid, seed=2,
                  mask=b64(mask_png(((0, 3), (0, 3)))))
        u = client.post(f"/v1/sessions/{sid}/undo").json()
        assert u["image"] == first
        assert u["step_index"] == 1

    def test_undo_on_fresh_session_rejected(self, client):
        sid = new_session(client)
        r = client.post(f"/v1/sessions/{sid}/undo")
        assert r.status_code == 422
        assert "undo" in r.json()["detail"]

    def test_edit_is_deterministic_for_fixed_seed(self, client):
        a = post_edit(client, new_session(client), seed=7).json()["image"]
        b = post_edit(client, new_session(client), seed=7).json()["image"]
        assert a == b

    def test_modalities_accepted_and_logged(self, client, tmp_path):
        sem = torch.zeros(19, RES, RES)
        sem[4] = 1.0
        sem_path = tmp_path / "sem.png"
        save_semantic(sem, str(sem_path))
        sketch = torch.rand(1, RES, RES)
        color = torch.rand(3, RES, RES) * 2 - 1
        sid = new_session(client)
        r = post_edit(
            client, sid,
            sketch=b64(image_to_png(sketch.repeat(3, 1, 1) * 2 - 1)),
            semantic=b64(sem_path.read_bytes()),
            color=b64(image_to_png(color)),
            exemplar=b64(face_png(seed=21)))
        assert r.status_code == 200
        assert r.json()["bg_max_dev"] == 0.0
        h = client.get(f"/v1/sessions/{sid}/history").json()
        assert h["steps"][0]["summary"]["modalities"] == [
            "color", "exemplar", "semantic", "sketch"]

    def test_attribute_edit_identity_at_zero_epsilon(self, client):
        base = face_png(seed=13)
        plain = post_edit(client, new_session(client, base),
                          seed=9).json()["image"]
        zeroed = post_edit(client, new_session(client, base), seed=9,
                           attrs=[{"name": "brightness", "epsilon": 0.0}])
        assert zeroed.json()["image"] == plain
        moved = post_edit(client, new_session(client, base), seed=9,
                          attrs=[{"name": "brightness", "epsilon": 2.0}])
        assert moved.json()["image"] != plain

    def test_text_edit_reports_trajectory(self, client):
        r = post_edit(client, new_session(client), text="wider smile")
        assert r.status_code == 200
        body = r.json()
        assert 1 <= len(body["text_trajectory"]) <= 3
        assert body["text_aborted"] is False
        assert body["bg_max_dev"] == 0.0


class TestErrorMapping:
    def test_unknown_session_404(self, client):
        assert post_edit(client, "deadbeef").status_code == 404
        assert client.get("/v1/sessions/deadbeef/history").status_code == 404
        assert client.post("/v1/sessions/deadbeef/undo").status_code == 404

    def test_zero_mask_422_with_explanation(self, client):
        sid = new_session(client)
        r = post_edit(client, sid, mask=b64(mask_png(((0, 0), (0, 0)))))
        assert r.status_code == 422
        assert "mask" in r.json()["detail"]

    def test_unknown_direction_422(self, client):
        r = post_edit(client, new_session(client),
                      attrs=[{"name": "nose_length", "epsilon": 1.0}])
        assert r.status_code == 422
        assert "nose_length" in r.json()["detail"]

    def test_invalid_base64_400(self, client):
        r = post_edit(client, new_session(client), mask="@@not-base64@@")
        assert r.status_code == 400
        assert "mask" in r.json()["detail"]

    def test_non_png_payload_400(self, client):
        r = post_edit(client, new_session(client), mask=b64(b"JFIF garbage"))
        assert r.status_code == 400

    def test_truncated_png_400(self, client):
        r = post_edit(client, new_session(client),
                      mask=b64(mask_png()[:40]))
        assert r.status_code == 400

    def test_missing_required_field_400(self, client):
        sid = new_session(client)
        r = client.post(f"/v1/sessions/{sid}/edit", json={"seed": 1})
        assert r.status_code == 400
        assert r.json()["detail"] == "malformed payload"

    def test_malformed_json_body_400(self, client):
        r = client.post("/v1/sessions", content=b"{not json",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400

    def test_internal_error_500_with_correlation_id(self, svc, client,
                                                    monkeypatch):
        sid = new_session(client)

        def boom(req):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(svc["app"].state.editor, "edit", boom)
        r = post_edit(client, sid)
        assert r.status_code == 500
        assert len(r.json()["correlation_id"]) == 32

    def test_payload_cap_413(self, svc, tmp_path):
        capped = build_app(svc["ckpt"], state_dir=str(tmp_path / "s"),
                           max_payload=4096)
        small = TestClient(capped, raise_server_exceptions=False)
        big = b64(os.urandom(8192))
        r = small.post("/v1/sessions", json={"image": big})
        assert r.status_code == 413


class TestConcurrency:
    def test_busy_session_409_while_others_proceed(self, svc, client):
        sid_a = new_session(client)
        sid_b = new_session(client)
        session_a = svc["app"].state.sessions[sid_a]
        assert session_a.lock.acquire(blocking=False)
        try:
            assert post_edit(client, sid_a).status_code == 409
            assert client.post(
                f"/v1/sessions/{sid_a}/undo").status_code == 409
            assert post_edit(client, sid_b).status_code == 200
        finally:
            session_a.lock.release()
        assert post_edit(client, sid_a).status_code == 200


class TestResize:
    def test_create_resizes_with_warning(self, client):
        r = client.post("/v1/sessions",
                        json={"image": b64(face_png(resolution=16))})
        assert r.status_code == 200
        assert "resized" in r.json()["warning"]

    def test_edit_input_resize_warning(self, client):
        sid = new_session(client)
        r = post_edit(client, sid,
                      mask=b64(mask_png(((4, 12), (4, 12)), resolution=16)))
        assert r.status_code == 200
        assert "mask resized" in r.json()["warning"]


class TestPersistence:
    def test_restart_preserves_sessions_and_continues(self, svc, client):
        sid = new_session(client)
        first = post_edit(client, sid, seed=3).json()
        second = post_edit(client, sid, seed=4,
                           mask=b64(mask_png(((1, 4), (1, 4))))).json()

        reborn = TestClient(build_app(svc["ckpt"],
                                      state_dir=svc["state_dir"]),
                            raise_server_exceptions=False)
        h = reborn.get(f"/v1/sessions/{sid}/history").json()
        assert [s["step_index"] for s in h["steps"]] == [1, 2]
        for entry, response in zip(h["steps"], (first, second)):
            digest = hashlib.sha256(
                base64.b64decode(response["image"])).hexdigest()
            assert entry["output_hash"] == digest

        cont = reborn.post(f"/v1/sessions/{sid}/edit",
                           json={"mask": b64(mask_png()), "seed": 5})
        assert cont.status_code == 200
        assert cont.json()["step_index"] == 3

    def test_restart_current_image_matches(self, svc, client):
        sid = new_session(client)
        edited = post_edit(client, sid, seed=8).json()["image"]
        reborn = TestClient(build_app(svc["ckpt"],
                                      state_dir=svc["state_dir"]),
                            raise_server_exceptions=False)
        u = reborn.post(f"/v1/sessions/{sid}/undo")
        assert u.status_code == 200
        again = reborn.post(f"/v1/sessions/{sid}/edit",
                            json={"mask": b64(mask_png()), "seed": 8})
        assert again.json()["image"] == edited

    def test_replay_reproduces_disk_steps_bitwise(self, svc, client):
        sid = new_session(client)
        post_edit(client, sid, seed=1)
        post_edit(client, sid, seed=2, mask=b64(mask_png(((0, 3), (5, 8)))))
        client.post(f"/v1/sessions/{sid}/undo")
        post_edit(client, sid, seed=6, mask=b64(mask_png(((4, 8), (0, 4)))),
                  attrs=[{"name": "brightness", "epsilon": 0.5}])

        replayed = replay_session(svc["app"].state.editor,
                                  svc["state_dir"], sid)
        assert len(replayed) == 2
        sess_dir = os.path.join(svc["state_dir"], sid)
        for index, png in zip((1, 2), replayed):
            with open(os.path.join(sess_dir,
                                   f"step_{index:05d}.png"), "rb") as fh:
                assert fh.read() == png

    def test_log_records_undo_markers(self, svc, client):
        sid = new_session(client)
        post_edit(client, sid)
        client.post(f"/v1/sessions/{sid}/undo")
        log_path = os.path.join(svc["state_dir"], sid, "log.jsonl")
        with open(log_path) as fh:
            entries = [json.loads(line) for line in fh]
        assert entries[0]["step_index"] == 1
        assert entries[1] == {"op": "undo",
                              "timestamp": entries[1]["timestamp"]}


class TestFuzzChain:
    def test_multi_step_chain_never_touches_background(self, client):
        rng = np.random.default_rng(17)
        initial = face_png(seed=29)
        sid = new_session(client, initial)
        prev = np.array(Image.open(io.BytesIO(initial)))
        for step in range(6):
            r0, c0 = rng.integers(0, RES - 2, size=2)
            h, w = rng.integers(1, RES - max(r0, c0), size=2)
            pixels = ((int(r0), int(r0 + h)), (int(c0), int(c0 + w)))
            r = post_edit(client, sid, seed=int(rng.integers(1 << 30)),
                          mask=b64(mask_png(pixels)))
            assert r.status_code == 200
            assert r.json()["bg_max_dev"] == 0.0
            out = np.array(Image.open(io.BytesIO(
                base64.b64decode(r.json()["image"]))))
            outside = ~mask_bool(pixels)
            assert np.array_equal(out[outside], prev[outside])
            prev = out
        h = client.get(f"/v1/sessions/{sid}/history").json()
        assert len(h["steps"]) == 6


class TestIntrospection:
    def test_healthz_reports_checkpoint_hash(self, svc, client):
        r = client.get("/v1/healthz").json()
        assert r["status"] == "ok"
        assert r["ckpt_hash"] == file_digest(svc["ckpt"])
        assert r["resolution"] == RES

    def test_directions_listing(self, client):
        r = client.get("/v1/directions").json()
        names = {d["name"] for d in r["directions"]}
        assert names == {"brightness"}
        assert all(d["default_epsilon"] > 0 for d in r["directions"])

    def test_directions_empty_without_registry(self, svc, tmp_path):
        bare_ckpt = str(tmp_path / "bare.fmug")
        with open(svc["ckpt"], "rb") as src, open(bare_ckpt, "wb") as dst:
            dst.write(src.read())
        app = build_app(bare_ckpt, state_dir=str(tmp_path / "s"))
        c = TestClient(app, raise_server_exceptions=False)
        assert c.get("/v1/directions").json() == {"directions": []}
