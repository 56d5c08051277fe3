"""Plan construction, placement sampling, and synthesis invariants."""

import numpy as np
import pytest

from helpers import NOVEL_CLASSES, make_reference, make_scene

from ctxforge.compositing import Backend
from ctxforge.core import BBox, iou
from ctxforge.errors import ConfigError, DataError
from ctxforge.integration import local_client
from ctxforge.manifest import sample_kshot
from ctxforge.seeding import rng_for
from ctxforge.synthesis import (
    PlanItem,
    SynthesisPlan,
    _draw_placement,
    build_plan,
    context_scene,
    novel_free_ids,
    synthesis_summary,
    synthesize,
)


def sampled_corpus(corpus, k=3, seed=0):
    return sample_kshot(corpus, NOVEL_CLASSES, k=k, seed=seed)


def scenes_for(manifest, ids):
    return {cid: context_scene(manifest, cid) for cid in ids}


class TestPlan:
    def test_validation(self):
        with pytest.raises(DataError):
            SynthesisPlan(items=())
        item = PlanItem("ctx", "airplane")
        with pytest.raises(DataError):
            SynthesisPlan(items=(PlanItem("ctx", "airplane", count=0),))
        with pytest.raises(DataError):
            SynthesisPlan(items=(item,), overlap_threshold=1.0)
        with pytest.raises(DataError):
            SynthesisPlan(items=(item,), scale_range=(0.0, 1.0))
        with pytest.raises(DataError):
            SynthesisPlan(items=(item,), max_attempts=0)

    def test_backend_coerced_from_string(self):
        plan = SynthesisPlan(items=(PlanItem("c", "airplane"),), backend="poisson")
        assert plan.backend is Backend.POISSON

    def test_context_ids_ordered_unique(self):
        plan = SynthesisPlan(
            items=(
                PlanItem("b", "airplane"),
                PlanItem("a", "windmill"),
                PlanItem("b", "windmill"),
            )
        )
        assert plan.context_ids == ("b", "a")

    def test_build_plan_shape_and_determinism(self):
        ids = ("s1", "s2", "s3")
        plan_a = build_plan(ids, NOVEL_CLASSES, per_context=2, seed=5, variants=2)
        plan_b = build_plan(ids, NOVEL_CLASSES, per_context=2, seed=5, variants=2)
        assert plan_a == plan_b
        assert len(plan_a.items) == 3 * 2 * 2
        assert plan_a.context_ids == ids
        assert {i.class_name for i in plan_a.items} <= set(NOVEL_CLASSES)
        plan_c = build_plan(ids, NOVEL_CLASSES, per_context=2, seed=6, variants=2)
        assert plan_a != plan_c

    def test_build_plan_rejects_empty_classes(self):
        with pytest.raises(DataError):
            build_plan(("s1",), (), per_context=1)


class TestDrawPlacement:
    def test_box_respects_margin_and_scale(self):
        ref = make_reference(seed=2, width=20, height=10)
        src_area = 200.0
        for seed in range(100):
            rng = rng_for(seed, "placement-test")
            box = _draw_placement(rng, ref, (80, 100), (0.7, 1.3))
            assert box is not None
            assert box.x_min >= 1 and box.y_min >= 1
            assert box.x_max <= 99 and box.y_max <= 79
            # integer grid
            assert box.x_min == int(box.x_min) and box.y_max == int(box.y_max)
            # rounding the sides moves area by at most one pixel per side
            assert 0.7 * src_area * 0.8 <= box.area <= 1.3 * src_area * 1.25
            ratio = box.width / box.height
            r = ref.aspect_ratio
            close_to = min(abs(ratio - r), abs(ratio - 1.0 / r))
            assert close_to < 0.45  # aspect follows R_r or its reciprocal

    def test_aspect_swap_occurs(self):
        ref = make_reference(seed=2, width=20, height=10)
        wide = tall = 0
        for seed in range(60):
            rng = rng_for(seed, "swap-test")
            box = _draw_placement(rng, ref, (80, 100), (1.0, 1.0))
            if box.width > box.height:
                wide += 1
            else:
                tall += 1
        assert wide > 10 and tall > 10

    def test_none_when_too_large(self):
        ref = make_reference(seed=2, width=20, height=10)
        rng = rng_for(0, "too-big")
        assert _draw_placement(rng, ref, (12, 12), (1.0, 1.0)) is None


class TestHelpers:
    def test_novel_free_ids(self, corpus):
        free = novel_free_ids(corpus)
        assert len(free) == 24
        for cid in free:
            assert all(
                a.label.split != "novel" for a in corpus.annotations_for(cid)
            )

    def test_context_scene_carries_boxes(self, corpus):
        free = novel_free_ids(corpus)
        scene = context_scene(corpus, free[0])
        assert scene.novel_free
        assert len(scene.existing_boxes) == len(corpus.annotations_for(free[0]))
        rec = corpus.image(free[0])
        assert scene.pixels.shape == (rec.height, rec.width, 3)


class TestSynthesize:
    def _setup(self, corpus, backend=Backend.NAIVE, n_ctx=4, per_context=2,
               variants=1, seed=0, k=3):
        manifest = sampled_corpus(corpus, k=k, seed=seed)
        ids = novel_free_ids(manifest)[:n_ctx]
        plan = build_plan(
            ids,
            NOVEL_CLASSES,
            per_context=per_context,
            backend=backend,
            seed=seed,
            variants=variants,
        )
        return manifest, scenes_for(manifest, ids), plan

    def test_invariants_naive(self, corpus):
        manifest, scenes, plan = self._setup(corpus)
        synthetic = synthesize(manifest, scenes, plan)
        assert synthetic.seed == plan.seed
        assert synthetic.kshot is None
        for rec in synthetic.images:
            ctx_id, sep, n = rec.id.rpartition("__syn")
            assert sep and n.isdigit() and ctx_id in scenes
            assert rec.file == f"JPEGImages/{rec.id}.png"
            canvas = synthetic.pixels[rec.id]
            assert canvas.shape == (rec.height, rec.width, 3)
            anns = synthetic.annotations_for(rec.id)
            existing = [b for b, _ in scenes[ctx_id].existing_boxes]
            for i, ann in enumerate(anns):
                assert ann.id == f"{rec.id}#obj{i}"
                assert ann.label.split == "novel"
                box = ann.box
                assert box.x_min >= 1 and box.y_min >= 1
                assert box.x_max <= rec.width - 1
                assert box.y_max <= rec.height - 1
                for other in existing:
                    assert iou(box, other) <= plan.overlap_threshold
            for i, a in enumerate(anns):
                for b in anns[i + 1 :]:
                    assert iou(a.box, b.box) <= plan.overlap_threshold

    def test_pixels_change_only_inside_placed_boxes(self, corpus):
        manifest, scenes, plan = self._setup(corpus, n_ctx=2)
        synthetic = synthesize(manifest, scenes, plan)
        for rec in synthetic.images:
            ctx_id = rec.id.rpartition("__syn")[0]
            before = scenes[ctx_id].pixels
            after = synthetic.pixels[rec.id]
            inside = np.zeros(before.shape[:2], dtype=bool)
            for ann in synthetic.annotations_for(rec.id):
                x0, y0, x1, y1 = (int(v) for v in ann.box.as_tuple())
                inside[y0:y1, x0:x1] = True
            assert np.array_equal(after[~inside], before[~inside])

    @pytest.mark.parametrize("backend", [Backend.NAIVE, Backend.POISSON])
    def test_repeat_seed_byte_identical(self, corpus, backend):
        manifest, scenes, plan = self._setup(corpus, backend=backend, n_ctx=2)
        first = synthesize(manifest, scenes, plan, jobs=1)
        second = synthesize(manifest, scenes, plan, jobs=4)
        assert first == second
        assert set(first.pixels) == set(second.pixels)
        for image_id in first.pixels:
            assert np.array_equal(first.pixels[image_id], second.pixels[image_id])

    def test_variants_make_distinct_images(self, corpus):
        manifest, scenes, plan = self._setup(corpus, n_ctx=2, variants=3)
        synthetic = synthesize(manifest, scenes, plan)
        by_ctx = {}
        for rec in synthetic.images:
            ctx_id, _, n = rec.id.rpartition("__syn")
            by_ctx.setdefault(ctx_id, []).append(int(n))
        for ctx_id, ns in by_ctx.items():
            assert sorted(ns) == list(range(len(ns)))

    def test_variant_numbering_follows_plan_runs(self, corpus):
        manifest = sampled_corpus(corpus)
        ids = novel_free_ids(manifest)[:2]
        a, b = ids
        plan = SynthesisPlan(
            items=(
                PlanItem(a, "airplane"),
                PlanItem(a, "windmill"),
                PlanItem(b, "tenniscourt"),
                PlanItem(a, "baseballfield"),
            ),
            seed=1,
        )
        synthetic = synthesize(manifest, scenes_for(manifest, ids), plan)
        got = sorted(r.id for r in synthetic.images)
        assert got == sorted([f"{a}__syn0", f"{a}__syn1", f"{b}__syn0"])
        # first run of context a carried two items
        assert len(synthetic.annotations_for(f"{a}__syn0")) == 2

    def test_novel_free_enforced(self, corpus):
        manifest = sampled_corpus(corpus)
        tainted = [
            r.id for r in manifest.images if r.id not in novel_free_ids(manifest)
        ]
        plan = SynthesisPlan(items=(PlanItem(tainted[0], "airplane"),))
        scenes = {tainted[0]: context_scene(manifest, tainted[0])}
        with pytest.raises(DataError, match="novel-free"):
            synthesize(manifest, scenes, plan)
        relaxed = SynthesisPlan(
            items=(PlanItem(tainted[0], "airplane"),), require_novel_free=False
        )
        result = synthesize(manifest, scenes, relaxed)
        assert len(result.images) == 1

    def test_sequence_contexts_must_match_plan(self, corpus):
        manifest, scenes, plan = self._setup(corpus, n_ctx=3)
        ordered = [scenes[cid] for cid in plan.context_ids]
        ok = synthesize(manifest, ordered, plan)
        assert len(ok.images) >= 1
        with pytest.raises(DataError, match="scenes for"):
            synthesize(manifest, ordered[:2], plan)

    def test_unknown_context_rejected(self, corpus):
        manifest = sampled_corpus(corpus)
        plan = SynthesisPlan(items=(PlanItem("nowhere", "airplane"),))
        with pytest.raises(DataError, match="unknown context"):
            synthesize(manifest, {}, plan)

    def test_missing_references_rejected(self, corpus):
        manifest = sampled_corpus(corpus)
        free = novel_free_ids(manifest)[:1]
        plan = SynthesisPlan(items=(PlanItem(free[0], "airplane"),))
        bare = corpus  # no kshot selection at all
        with pytest.raises(DataError, match="K-shot"):
            synthesize(bare, scenes_for(corpus, free), plan)

    def test_impossible_plan_raises_after_skips(self, corpus, caplog):
        manifest = sampled_corpus(corpus)
        tiny = make_scene(seed=3, width=14, height=14)
        plan = SynthesisPlan(
            items=(PlanItem("tiny", "airplane"),), max_attempts=5
        )
        with caplog.at_level("WARNING"):
            with pytest.raises(DataError, match="zero placements"):
                synthesize(manifest, {"tiny": tiny}, plan)
        assert any("skipped" in r.message for r in caplog.records)

    def test_partial_skips_counted_in_summary(self, corpus, caplog):
        manifest = sampled_corpus(corpus)
        free = novel_free_ids(manifest)[:1]
        # zero tolerance and far too many instances for one small scene
        plan = SynthesisPlan(
            items=tuple(PlanItem(free[0], "airplane") for _ in range(40)),
            overlap_threshold=0.0,
            max_attempts=3,
            seed=2,
        )
        with caplog.at_level("WARNING"):
            synthetic = synthesize(manifest, scenes_for(manifest, free), plan)
        summary = synthesis_summary(plan, synthetic)
        planned, placed, skipped = summary["airplane"]
        assert planned == 40
        assert placed + skipped == planned
        assert skipped > 0
        assert placed == len(synthetic.annotations)

    def test_diffusion_without_client_is_config_error(self, corpus):
        manifest, scenes, plan = self._setup(corpus, backend=Backend.DIFFUSION, n_ctx=1)
        with pytest.raises(ConfigError, match="client"):
            synthesize(manifest, scenes, plan)

    def test_diffusion_with_stub_client(self, corpus):
        manifest, scenes, plan = self._setup(
            corpus, backend=Backend.DIFFUSION, n_ctx=2, per_context=1
        )
        with local_client() as client:
            synthetic = synthesize(manifest, scenes, plan, client=client, steps=3)
        assert len(synthetic.images) >= 1
        for rec in synthetic.images:
            ctx_id = rec.id.rpartition("__syn")[0]
            before = scenes[ctx_id].pixels
            after = synthetic.pixels[rec.id]
            assert after.shape == before.shape
            assert not np.array_equal(after, before)


class TestSummary:
    def test_summary_shape(self, corpus):
        manifest, scenes, plan = (
            TestSynthesize()._setup(corpus, n_ctx=3, per_context=3)
        )
        synthetic = synthesize(manifest, scenes, plan)
        summary = synthesis_summary(plan, synthetic)
        for name, (planned, placed, skipped) in summary.items():
            assert planned >= 1
            assert planned == placed + skipped
        total_placed = sum(v[1] for v in summary.values())
        assert total_placed == len(synthetic.annotations)
