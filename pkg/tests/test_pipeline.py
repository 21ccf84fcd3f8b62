import json

import numpy as np
import pytest
from sklearn.base import clone

from textprop.exceptions import AnnotationParseError, FrameProcessingError, InvalidArgumentError
from textprop.geometry import apply_homography, canonical_quad, invert, signed_distance_to_quad, warp
from textprop.imgcore import write_png
from textprop.metrics import ssim
from textprop.pipeline import (FrameAnnotation, PipelineConfig, TextPropagator, build_recipes,
                               frontalizing_homographies, ingest, load_recipes, parse_annotations,
                               propagate, propagate_many, save_recipes)
from textprop.synth import render_text_roi

from conftest import clip_from_bundle

SIZE = (256, 64)


def quad_mask(frame, quad, margin):
    h, w = frame.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return signed_distance_to_quad(np.asarray(quad), gx, gy) >= margin


@pytest.fixture(scope="module")
def pan_fit(pan_bundle):
    clip = clip_from_bundle(pan_bundle)
    recipes, ref, scores = build_recipes(clip)
    return clip, recipes, ref, scores


@pytest.fixture(scope="module")
def static_fit(static_bundle):
    clip = clip_from_bundle(static_bundle)
    return clip, build_recipes(clip)[0]


# -- annotations and ingestion -----------------------------------------------

def test_parse_sorts_by_index():
    text = json.dumps({"frames": [{"index": 2, "file": "b.png", "quad": [[0, 0], [9, 0], [9, 3], [0, 3]],
                                   "ocr_confidence": 0.999, "ocr_text": "HI"},
                                  {"index": 1, "file": "a.png"}]})
    anns = parse_annotations(text)
    assert [a.index for a in anns] == [1, 2]
    assert not anns[0].active and anns[1].active and anns[1].ocr_text == "HI"


def test_malformed_json_reports_line():
    with pytest.raises(AnnotationParseError) as info:
        parse_annotations('{"frames": [\n  {"index": 0, "file": "a.png"},\n  {"index": 1 "file": "b.png"}\n]}')
    assert info.value.line == 3 and "line 3" in str(info.value)


@pytest.mark.parametrize("entry,needle", [
    ('{"file": "b.png"}', "index"),
    ('{"index": 1, "file": "b.png", "quad": [[0, 0], [1, 1]]}', "quad"),
    ('{"index": 1, "file": "b.png", "ocr_confidence": 1.5}', "ocr_confidence"),
])
def test_bad_entry_reports_its_line(entry, needle):
    text = '{\n "frames": [\n  {"index": 0, "file": "a.png"},\n\n  ' + entry + "\n ]\n}"
    with pytest.raises(AnnotationParseError) as info:
        parse_annotations(text)
    assert info.value.line == 5 and needle in str(info.value)


def test_duplicate_index_rejected():
    with pytest.raises(AnnotationParseError):
        parse_annotations('{"frames": [{"index": 0, "file": "a"}, {"index": 0, "file": "b"}]}')


def write_manifest(tmp_path, frames):
    (tmp_path / "ann.json").write_text(json.dumps({"frames": frames}))
    return tmp_path / "ann.json"


def test_empty_manifest_rejected(tmp_path):
    with pytest.raises(InvalidArgumentError):
        ingest(write_manifest(tmp_path, []), tmp_path)


def test_missing_image_named(tmp_path):
    path = write_manifest(tmp_path, [{"index": 0, "file": "ghost.png"}])
    with pytest.raises(FileNotFoundError, match="ghost.png"):
        ingest(path, tmp_path)


def test_missing_and_degenerate_quads_pass_through(tmp_path):
    img = np.full((20, 30, 3), 0.5)
    for i in range(3):
        write_png(tmp_path / f"f{i}.png", img)
    quad = [[2, 2], [20, 2], [20, 10], [2, 10]]
    path = write_manifest(tmp_path, [
        {"index": 0, "file": "f0.png", "quad": quad, "ocr_confidence": 1.0},
        {"index": 1, "file": "f1.png"},
        {"index": 2, "file": "f2.png", "quad": [[0, 0], [1, 0], [2, 0], [3, 0]], "ocr_confidence": 1.0},
        {"index": 3, "file": "f1.png", "quad": quad, "ocr_confidence": 1.0}])
    clip = ingest(path, tmp_path)
    assert [ann.active for _, ann in clip] == [True, False, False, True]


def test_synth_manifest_roundtrip(tmp_path, pan_bundle):
    pan_bundle.save(tmp_path)
    clip = ingest(tmp_path / "annotations.json", tmp_path)
    assert len(clip) == len(pan_bundle.frames)
    for (img, ann), q, f in zip(clip, pan_bundle.annotated_quads, pan_bundle.frames):
        np.testing.assert_allclose(ann.quad, q, atol=1e-12)
        assert np.abs(img - f).max() <= 0.5 / 255 + 1e-12


# -- configuration -----------------------------------------------------------

def test_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"alpha1": 0.5, "canonical_size": [128, 32]}))
    cfg = PipelineConfig.from_file(tmp_path / "c.json")
    assert cfg.alpha1 == 0.5 and cfg.canonical_size == (128, 32)
    (tmp_path / "bad.json").write_text(json.dumps({"alpah1": 0.5}))
    with pytest.raises(InvalidArgumentError):
        PipelineConfig.from_file(tmp_path / "bad.json")


@pytest.mark.parametrize("kw", [{"window": 2}, {"window": 0}, {"lambda_t": -1}, {"epsilon": 0}])
def test_config_rejects(kw):
    with pytest.raises(InvalidArgumentError):
        PipelineConfig(**kw)


# -- frontalization ----------------------------------------------------------

def test_padded_smoothing_halves_pan_noise():
    rng = np.random.default_rng(11)
    base = np.array([[60, 40], [316, 48], [312, 118], [64, 110]], dtype=float)
    truth = [base + np.array([2.0 * t, 0.3 * t]) for t in range(40)]
    noisy = [q + rng.normal(0, 0.5, (4, 2)) for q in truth]
    corners = canonical_quad(*SIZE)
    smooth = frontalizing_homographies(noisy, SIZE, 10.0)
    err_raw = np.stack(noisy) - np.stack(truth)
    err = np.stack([apply_homography(invert(h), corners) for h in smooth]) - np.stack(truth)
    assert (err ** 2).mean() <= 0.5 * (err_raw ** 2).mean()
    # the ends are not dragged toward the interior
    assert np.abs(err[[0, -1]]).max() < 1.0


def test_zero_lambda_is_raw_dlt():
    quads = [np.array([[0, 0], [100, 5], [98, 40], [2, 30]], dtype=float) + t for t in range(5)]
    for h, q in zip(frontalizing_homographies(quads, SIZE, 0.0), quads):
        np.testing.assert_allclose(apply_homography(h, q), canonical_quad(*SIZE), atol=1e-8)


# -- recipe building ---------------------------------------------------------

def test_static_clip_gives_identity_recipes(static_fit):
    _, recipes = static_fit
    for r in recipes:
        assert abs(r.psi.w) <= 0.05
        assert np.abs(r.ratio.gains - 1.0).max() <= 1e-3
        np.testing.assert_allclose(r.theta, recipes[0].theta, atol=1e-9)


def test_reference_recipe_is_identity(pan_fit):
    _, recipes, ref, scores = pan_fit
    refs = [r for r in recipes if r.reference]
    assert len(refs) == 1 and refs[0].frame_index == ref
    assert refs[0].psi.w == 0.0 and np.all(refs[0].ratio.gains == 1.0)
    assert len(scores) == len(recipes)


def test_pan_recipes_match_ground_truth(pan_bundle, pan_fit):
    _, recipes, _, _ = pan_fit
    corners = canonical_quad(*SIZE)
    for r, q in zip(recipes, pan_bundle.quads):
        assert np.abs(r.output_quad(SIZE) - q).max() <= 0.5


def test_passthrough_frame_is_skipped(static_bundle):
    clip = clip_from_bundle(static_bundle)
    img, ann = clip[2]
    clip[2] = (img, FrameAnnotation(ann.index, ann.file, None, 0.0, ""))
    recipes, ref, _ = build_recipes(clip, ref_index=0)
    assert [r.frame_index for r in recipes] == [0, 1, 3, 4, 5]
    out = propagate(clip, recipes, render_text_roi("WORLD")[0])
    np.testing.assert_array_equal(out[2], img)


def test_inactive_reference_rejected(static_bundle):
    with pytest.raises(InvalidArgumentError):
        build_recipes(clip_from_bundle(static_bundle), ref_index=99)


def test_no_quads_rejected(static_bundle):
    clip = [(img, FrameAnnotation(ann.index, ann.file)) for img, ann in clip_from_bundle(static_bundle)]
    with pytest.raises(InvalidArgumentError):
        build_recipes(clip)


def test_blank_frame_tagged_with_index(static_bundle):
    clip = clip_from_bundle(static_bundle)
    img, ann = clip[3]
    # a solid black ROI masks entirely as text on the reference's glyph positions and more
    clip[3] = (np.zeros_like(img), ann)
    try:
        build_recipes(clip, ref_index=0, config=PipelineConfig(register=False))
    except FrameProcessingError as exc:
        assert exc.frame_index == 3 and "frame 3" in str(exc)


# -- propagation -------------------------------------------------------------

def test_self_replacement_identity(pan_bundle, pan_fit):
    clip, recipes, ref, _ = pan_fit
    rec = next(r for r in recipes if r.reference)
    ref_img = next(img for img, ann in clip if ann.index == ref)
    ref_roi = warp(ref_img, rec.theta, *SIZE)
    out = propagate(clip, recipes, ref_roi)
    for o, (img, _), q in zip(out, clip, pan_bundle.quads):
        assert ssim(o, img, quad_mask(o, q, 2.0)) >= 0.97


def test_static_clip_outputs_identical_in_quad(static_bundle, static_fit):
    clip, recipes = static_fit
    out = propagate(clip, recipes, render_text_roi("NEW 99", {"fg": (0.7, 0.1, 0.1)})[0])
    m = quad_mask(out[0], static_bundle.quads[0], 0.0)
    for o in out[1:]:
        assert np.abs(o[m] - out[0][m]).max() <= 1e-3


def test_pixels_outside_quads_untouched(pan_fit):
    clip, recipes, _, _ = pan_fit
    out = propagate(clip, recipes, render_text_roi("WORLD")[0], feather=2.0)
    for o, (img, _), r in zip(out, clip, recipes):
        outside = ~quad_mask(o, r.output_quad(SIZE), -1.0 - 1e-9)
        np.testing.assert_array_equal(o[outside], img[outside])


def test_wrong_roi_size_rejected(pan_fit):
    clip, recipes, _, _ = pan_fit
    with pytest.raises(InvalidArgumentError):
        propagate(clip, recipes, np.zeros((64, 200, 3)))


def test_recipe_file_roundtrip_is_bit_exact(tmp_path, pan_fit):
    clip, recipes, ref, _ = pan_fit
    save_recipes(tmp_path / "r.json", recipes, SIZE, ref)
    loaded, size, ref2 = load_recipes(tmp_path / "r.json")
    assert size == SIZE and ref2 == ref
    roi = render_text_roi("WORLD")[0]
    for a, b in zip(propagate(clip, recipes, roi), propagate(clip, loaded, roi)):
        np.testing.assert_array_equal(a, b)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["format"] == "textprop-recipes" and doc["version"] == 1


def test_recipe_file_wrong_version(tmp_path, pan_fit):
    _, recipes, ref, _ = pan_fit
    save_recipes(tmp_path / "r.json", recipes, SIZE, ref)
    doc = json.loads((tmp_path / "r.json").read_text())
    doc["version"] = 99
    (tmp_path / "r.json").write_text(json.dumps(doc))
    with pytest.raises(InvalidArgumentError):
        load_recipes(tmp_path / "r.json")


def test_deterministic_across_worker_counts(pan_bundle, pan_fit):
    clip, recipes, ref, _ = pan_fit
    again, _, _ = build_recipes(clip, ref, PipelineConfig(n_jobs=2))
    for a, b in zip(recipes, again):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.ratio.gains, b.ratio.gains)
        assert a.psi == b.psi


def test_propagate_many(pan_fit):
    clip, recipes, _, _ = pan_fit
    roi = render_text_roi("WORLD")[0]
    single = propagate(clip, recipes, roi)
    (one,), report = propagate_many(clip, recipes, [roi], build_seconds=1.5)
    for a, b in zip(single, one):
        np.testing.assert_array_equal(a, b)
    assert report["copies"] == 1 and report["recipe_build_seconds"] == 1.5
    clips, _ = propagate_many(clip, recipes, [roi] * 3)
    for k in (1, 2):
        for a, b in zip(clips[0], clips[k]):
            np.testing.assert_array_equal(a, b)
    seen = []
    assert propagate_many(clip, recipes, [roi] * 2, sink=lambda k, f: seen.append(k))[0] is None
    assert seen == [0, 1]


def test_text_propagator_estimator(static_bundle):
    clip = clip_from_bundle(static_bundle)
    est = TextPropagator(reference_index=1, lambda_T=0.2)
    assert clone(est).get_params() == est.get_params()
    est.fit(clip)
    assert est.reference_index_ == 1 and est.recipe_build_seconds_ > 0
    roi = est.reference_roi()
    assert roi.shape == (64, 256, 3)
    out = est.transform(roi)
    assert len(out) == len(clip)
    clips, report = est.transform_many([roi, roi])
    assert len(clips) == 2 and report["recipe_build_seconds"] == est.recipe_build_seconds_
