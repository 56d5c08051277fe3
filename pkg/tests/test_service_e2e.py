"""Live-service conformance and the CLI round trip through it.

The service package reimplements the wire format instead of importing
this library, so these tests pin both sides to one protocol: the real
client drives the real server over a socket, and the results must be
indistinguishable from the in-process stand-in.
"""

import json

import httpx
import numpy as np
import pytest

from helpers import NOVEL_CLASSES, make_reference, make_scene

from ctxforge.cli import _LocalService, main
from ctxforge.compositing import Backend, compose_diffusion, make_bundle
from ctxforge.core import BBox, PlacementSpec
from ctxforge.filtering import build_stitch
from ctxforge.integration import (
    IntegrationClient,
    encode_coarse,
    encode_request,
    local_client,
    unb64_png,
)
from ctxforge.manifest import load_voc

NOVEL_ARG = ",".join(NOVEL_CLASSES)


@pytest.fixture(scope="module")
def service():
    svc = _LocalService()
    yield svc
    svc.stop()


@pytest.fixture(scope="module")
def scene_bundle():
    scene = make_scene(seed=2, width=56, height=48)
    ref = make_reference(seed=3, width=16, height=8)
    placement = PlacementSpec(target=BBox(18, 20, 34, 28))
    stitch, _ = build_stitch(ref, placement, affine_seed=1, context_shape=(48, 56))
    return scene, make_bundle(scene.pixels, ref, stitch), placement


class TestServiceConformance:
    def test_integrate_is_context_sized_and_byte_stable(self, service, scene_bundle):
        scene, bundle, _ = scene_bundle
        body = encode_request(bundle, steps=6, seed=3)
        with httpx.Client(base_url=service.endpoint, timeout=30.0) as http:
            first = http.post("/v1/integrate", json=body)
            second = http.post("/v1/integrate", json=body)
        assert first.status_code == 200
        payload = first.json()
        assert payload["mode"] == "mock"
        assert payload["timing_ms"] >= 0.0
        composite = unb64_png(payload["image"], channels=3)
        assert composite.shape == scene.pixels.shape
        assert payload["image"] == second.json()["image"]

    def test_wrong_coarse_width_is_rejected_with_shapes(self, service, scene_bundle):
        _, bundle, _ = scene_bundle
        body = encode_request(bundle, steps=6, seed=3)
        body["coarse_feature"] = encode_coarse(
            np.zeros((257, 1535), dtype=np.float32)
        )
        with httpx.Client(base_url=service.endpoint, timeout=30.0) as http:
            resp = http.post("/v1/integrate", json=body)
        assert resp.status_code == 400
        payload = resp.json()
        assert payload["error"] == "coarse_feature"
        assert payload["got"] == [257, 1535]
        assert payload["expected"] == [257, 1536]

    def test_health_reports_mode(self, service):
        with httpx.Client(base_url=service.endpoint, timeout=30.0) as http:
            resp = http.get("/v1/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "mode": "mock", "model_loaded": False}

    def test_live_service_matches_in_process_stub(self, service, scene_bundle):
        _, bundle, placement = scene_bundle
        with IntegrationClient(service.endpoint) as client:
            over_wire = compose_diffusion(client, bundle, placement, steps=8, seed=1)
        with local_client() as client:
            in_process = compose_diffusion(client, bundle, placement, steps=8, seed=1)
        assert over_wire.backend is Backend.DIFFUSION
        assert np.array_equal(over_wire.pixels, in_process.pixels)


class TestCliThroughLiveService:
    def run_synth(self, voc_root, out, backend_args):
        return main(
            [
                "synth",
                "--root", str(voc_root),
                "--novel", NOVEL_ARG,
                "--out", str(out),
                "--seed", "1",
                "--contexts", "2",
                "--backend", "diffusion",
                *backend_args,
            ]
        )

    def test_synth_against_spawned_service_merges_cleanly(self, voc_root, tmp_path):
        out = tmp_path / "out"
        assert self.run_synth(voc_root, out, ["--mock-endpoint"]) == 0

        train = load_voc(out)  # full structural validation happens on load
        synthetic = [r for r in train.images if "__syn" in r.id]
        assert len(synthetic) == 2
        assert train.kshot is not None and train.kshot.k == 3
        for record in synthetic:
            name = record.file.rsplit("/", 1)[-1]
            assert (out / "JPEGImages" / name).is_file()
            labels = {
                a.label.name for a in train.annotations if a.image_id == record.id
            }
            assert labels and labels <= set(NOVEL_CLASSES)

        coco = json.loads((out / "coco.json").read_text())
        assert len(coco["images"]) == len(train.images)
        assert len(coco["annotations"]) == len(train.annotations)

    def test_spawned_service_and_stub_build_identical_datasets(
        self, voc_root, tmp_path
    ):
        in_process = tmp_path / "stub"
        over_wire = tmp_path / "wire"
        assert self.run_synth(voc_root, in_process, ["--mock"]) == 0
        assert self.run_synth(voc_root, over_wire, ["--mock-endpoint"]) == 0
        assert (in_process / "coco.json").read_bytes() == (
            over_wire / "coco.json"
        ).read_bytes()
        train = load_voc(in_process)
        probe = next(r for r in train.images if "__syn" in r.id)
        name = probe.file.rsplit("/", 1)[-1]
        assert (in_process / "JPEGImages" / name).read_bytes() == (
            over_wire / "JPEGImages" / name
        ).read_bytes()
