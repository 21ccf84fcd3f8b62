import json

import numpy as np
import pytest

from textprop.blur import BlurParams
from textprop.exceptions import InvalidArgumentError, LayoutError
from textprop.geometry import signed_distance_to_quad
from textprop.metrics import ssim
from textprop.photometry import RatioMap
from textprop.pipeline import TransformRecipe, propagate
from textprop.refselect import sharpness_score
from textprop.synth import ScenarioSpec, generate_clip, render_text_roi
from textprop.synth.font import glyph
from textprop.synth.render import layout

from conftest import clip_from_bundle


def inside_mask(frame, quad, margin=2.0):
    h, w = frame.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return signed_distance_to_quad(np.asarray(quad), gx, gy) >= margin


# -- text rendering ----------------------------------------------------------

def font_table_coverage(char, scale, x0, y0, width, height, ss=4):
    """Oracle: glyph ink as the 0.5 level set of a bilinear field over the font table cells,
    supersampled ``ss`` x ``ss`` per pixel; a pixel counts when at least half its samples are ink."""
    cells = np.pad(glyph(char).astype(float), 1)
    count = 0
    for py in range(height):
        for px in range(width):
            ink = 0
            for sy in range(ss):
                for sx in range(ss):
                    u = (px + (sx + 0.5) / ss - x0) / scale + 0.5
                    v = (py + (sy + 0.5) / ss - y0) / scale + 0.5
                    if not (0 <= u < cells.shape[1] - 1 and 0 <= v < cells.shape[0] - 1):
                        continue
                    i, j = int(v), int(u)
                    fv, fu = v - i, u - j
                    val = ((1 - fv) * ((1 - fu) * cells[i, j] + fu * cells[i, j + 1])
                           + fv * ((1 - fu) * cells[i + 1, j] + fu * cells[i + 1, j + 1]))
                    ink += val > 0.5
            count += ink >= ss * ss / 2
    return count


def test_single_glyph_mask_matches_font_table():
    _, mask = render_text_roi("A")
    scale, x0, y0 = layout("A", 256, 64, 6)
    assert mask.sum() == font_table_coverage("A", scale, x0, y0, 256, 64)
    # rounding only trims block corners
    assert 0.9 * glyph("A").sum() * scale ** 2 < mask.sum() <= glyph("A").sum() * scale ** 2


def test_w_covers_more_than_i():
    assert render_text_roi("W")[1].sum() > render_text_roi("I")[1].sum()


def test_render_deterministic():
    style = {"bg": {"kind": "perlin-texture", "seed": 4}}
    a, b = render_text_roi("SALE", style), render_text_roi("SALE", style)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


@pytest.mark.parametrize("text", ["", "   ", "X" * 60, "héllo"])
def test_layout_errors(text):
    with pytest.raises(LayoutError):
        render_text_roi(text)


def test_perlin_amplitude_capped():
    img, mask = render_text_roi("A", {"bg": {"kind": "perlin-texture", "amplitude": 5.0, "color": [0.5] * 3}})
    bg = img[mask[:, :, 0] == 0]
    assert np.abs(bg - 0.5).max() <= 0.2 * np.sqrt(2) + 1e-9


# -- clip generation ---------------------------------------------------------

def test_identity_chain_gives_identical_frames():
    b = generate_clip(ScenarioSpec(frame_count=4, seed=1))
    for f in b.frames[1:]:
        np.testing.assert_array_equal(f, b.frames[0])


def test_lighting_ramp_scales_frames():
    b = generate_clip(ScenarioSpec(frame_count=5, lighting_path={"kind": "global-ramp", "start": 1.0, "end": 0.5}))
    for t, f in enumerate(b.frames):
        gain = 1.0 - 0.5 * t / 4
        np.testing.assert_allclose(f, np.clip(gain * b.frames[0], 0, 1), atol=1e-12)


def test_blur_ramp_lowers_sharpness():
    # w runs 0 -> -1: the differential transform moves from identity to a full Gaussian
    b = generate_clip(ScenarioSpec(frame_count=6, blur_path={
        "kind": "ramp", "start": [1.5, 1.5, 0.0, 0.0], "end": [1.5, 1.5, 0.0, -1.0]}))
    s = [sharpness_score(f) for f in b.frames]
    assert all(x > y for x, y in zip(s, s[1:]))


def test_bundle_lengths_and_ranges():
    spec = ScenarioSpec(frame_count=7, camera_path={"kind": "curved-orbit"},
                        lighting_path={"kind": "moving-half-shadow"},
                        blur_path={"kind": "keyframes", "keys": [[0, [0.5, 0.5, 0, 0]], [6, [2, 1, 60, -0.8]]]})
    b = generate_clip(spec)
    for seq in (b.frames, b.target_frames, b.quads, b.annotated_quads, b.homographies, b.psis, b.gains,
                b.ocr_confidences):
        assert len(seq) == 7
    assert all(isinstance(p, BlurParams) for p in b.psis)


def test_generation_deterministic():
    spec = ScenarioSpec(frame_count=3, seed=9, camera_path={"kind": "linear-pan"},
                        background={"kind": "perlin-texture", "seed": 3})
    a, b = generate_clip(spec), generate_clip(spec)
    for x, y in zip(a.frames + a.target_frames + a.annotated_quads, b.frames + b.target_frames + b.annotated_quads):
        np.testing.assert_array_equal(x, y)


@pytest.mark.parametrize("kw", [{"frame_count": 0}, {"blur_path": {"psis": [[1, 1, 0, 0]]}},
                                {"camera_path": {"kind": "teleport"}}, {"lighting_path": {"kind": "strobe"}},
                                {"blur_path": {"kind": "wobble"}}])
def test_invalid_specs_rejected(kw):
    with pytest.raises(InvalidArgumentError):
        generate_clip(ScenarioSpec(**{"frame_count": 3, **kw}))


def test_spec_dict_roundtrip_and_unknown_keys():
    spec = ScenarioSpec(frame_count=5, camera_path={"kind": "linear-pan"})
    assert ScenarioSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(InvalidArgumentError):
        ScenarioSpec.from_dict({"frame_cnt": 3})


def test_save_writes_documented_files(tmp_path):
    b = generate_clip(ScenarioSpec(frame_count=2))
    b.save(tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"frame_0000.png", "frame_0001.png", "target_0000.png", "target_0001.png",
            "annotations.json", "ground_truth.json"} <= names
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    assert len(gt["frames"][0]["theta"]) == 9 and len(gt["frames"][0]["psi"]) == 4
    manifest = json.loads((tmp_path / "annotations.json").read_text())
    np.testing.assert_allclose(manifest["frames"][1]["quad"], b.annotated_quads[1])


@pytest.mark.parametrize("spec", [
    ScenarioSpec(frame_count=5, seed=3, camera_path={"kind": "linear-pan"},
                 lighting_path={"kind": "moving-half-shadow"},
                 blur_path={"kind": "ramp", "start": [0.5, 0.5, 0, 0], "end": [2.0, 1.0, 30, -0.8]}),
    ScenarioSpec(frame_count=4, seed=4, camera_path={"kind": "curved-orbit"},
                 background={"kind": "perlin-texture", "seed": 1},
                 lighting_path={"kind": "global-ramp", "end": 0.6, "tint": [1.0, 0.9, 0.8]},
                 blur_path={"kind": "constant", "params": [1.0, 2.0, 100, 0.5]}),
])
def test_oracle_recipes_reconstruct_targets(spec):
    b = generate_clip(spec)
    recipes = [TransformRecipe(t, h, RatioMap(g), p, t == 0)
               for t, (h, g, p) in enumerate(zip(b.homographies, b.gains, b.psis))]
    out = propagate(clip_from_bundle(b, b.quads), recipes, b.target_roi)
    for o, tgt, q in zip(out, b.target_frames, b.quads):
        assert ssim(o, tgt, inside_mask(o, q)) >= 0.98
