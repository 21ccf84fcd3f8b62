import numpy as np
import pytest

from textprop.pipeline import FrameAnnotation
from textprop.synth import ScenarioSpec, generate_clip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def clip_from_bundle(bundle, quads=None):
    """Pipeline clip ``[(frame, FrameAnnotation)]`` from a synthetic bundle."""
    quads = bundle.annotated_quads if quads is None else quads
    return [(f, FrameAnnotation(i, f"frame_{i:04d}.png", np.asarray(q), c, bundle.spec.text_source))
            for i, (f, q, c) in enumerate(zip(bundle.frames, quads, bundle.ocr_confidences))]


@pytest.fixture(scope="session")
def pan_bundle():
    return generate_clip(ScenarioSpec(frame_count=12, seed=5, camera_path={"kind": "linear-pan"}))


@pytest.fixture(scope="session")
def static_bundle():
    return generate_clip(ScenarioSpec(frame_count=6, seed=2, quad_noise=0.0))


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Queue one acceptance verdict line for the end-of-run summary."""
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
