"""HTTP surface tests: every endpoint through the FastAPI test client."""

import pytest
from fastapi.testclient import TestClient

from flowfuse.service import create_app


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, client):
    root = tmp_path_factory.mktemp("service")
    reply = client.post("/phantoms", json={
        "out": str(root / "data"), "task": "t1pd-t2", "count": 6,
        "test_count": 2, "size": 8})
    assert reply.status_code == 200, reply.text
    manifest = reply.json()["manifest"]
    reply = client.post("/train", json={
        "out": str(root / "run"), "manifest": manifest, "epochs": 2,
        "blocks": 1, "hidden": 2, "batch_size": 2, "lr0": 1e-3, "seed": 2})
    assert reply.status_code == 200, reply.text
    return {"root": root, "manifest": manifest,
            "checkpoint": reply.json()["checkpoint"]}


class TestHealth:
    def test_health(self, client):
        reply = client.get("/health")
        assert reply.status_code == 200
        body = reply.json()
        assert body["status"] == "ok" and body["version"]


class TestTrainEndpoint:
    def test_train_response_shape(self, client, workspace):
        reply = client.post("/train", json={
            "out": str(workspace["root"] / "run2"),
            "manifest": workspace["manifest"], "epochs": 1, "blocks": 1,
            "hidden": 2, "batch_size": 2, "lambda": 0.5})
        assert reply.status_code == 200
        body = reply.json()
        assert body["epochs_run"] == 1
        assert body["channels"] == 2
        assert body["final"]["total"] > 0

    def test_unknown_key_is_422(self, client):
        reply = client.post("/train", json={"out": "/tmp/x", "task": "t1-t2",
                                            "epochz": 3})
        assert reply.status_code == 422

    def test_config_error_kind(self, client, workspace):
        reply = client.post("/train", json={
            "out": str(workspace["root"] / "bad"),
            "manifest": workspace["manifest"], "task": "t1-t2", "epochs": 1})
        assert reply.status_code == 400
        body = reply.json()
        assert body["kind"] == "config"

    def test_data_error_kind(self, client, workspace):
        reply = client.post("/train", json={
            "out": str(workspace["root"] / "bad2"),
            "manifest": str(workspace["root"] / "nope.txt"), "epochs": 1})
        assert reply.status_code == 400
        assert reply.json()["kind"] == "data"


class TestInferenceEndpoints:
    def test_infer_forward(self, client, workspace):
        reply = client.post("/infer", json={
            "checkpoint": workspace["checkpoint"],
            "manifest": workspace["manifest"],
            "out": str(workspace["root"] / "pred")})
        assert reply.status_code == 200
        body = reply.json()
        assert body["count"] == 2 and body["direction"] == "forward"

    def test_infer_inverse(self, client, workspace):
        reply = client.post("/infer", json={
            "checkpoint": workspace["checkpoint"],
            "manifest": workspace["manifest"],
            "out": str(workspace["root"] / "rec"), "direction": "inverse"})
        assert reply.status_code == 200
        files = reply.json()["files"]
        assert any("_t1" in f for f in files) and any("_pd" in f for f in files)

    def test_evaluate(self, client, workspace):
        client.post("/infer", json={
            "checkpoint": workspace["checkpoint"],
            "manifest": workspace["manifest"],
            "out": str(workspace["root"] / "pred")})
        reply = client.post("/evaluate", json={
            "manifest": workspace["manifest"],
            "pred_dir": str(workspace["root"] / "pred"),
            "out": str(workspace["root"] / "eval"),
            "ssim_window": 5, "piella_window": 5})
        assert reply.status_code == 200
        body = reply.json()
        assert body["rows"] == 2
        assert set(body["aggregates"]) >= {"psnr", "ssim", "nmse", "ag", "sf", "en"}


class TestCheckEndpoints:
    def test_roundtrip_check(self, client, workspace):
        reply = client.post("/roundtrip-check", json={
            "checkpoint": workspace["checkpoint"], "size": 8, "samples": 2})
        assert reply.status_code == 200
        body = reply.json()
        assert body["passed"] is True
        assert body["max_abs_float32"] <= body["tol32"]

    def test_gradcheck(self, client):
        reply = client.post("/gradcheck", json={"size": 6, "hidden": 3})
        assert reply.status_code == 200
        body = reply.json()
        assert body["passed"] is True and body["max_rel_error"] <= body["tol"]
