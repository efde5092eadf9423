"""Shared fixtures and the acceptance-criteria summary printed after the run."""
from pathlib import Path

import numpy as np
import pytest

from lapsrn.data import extract_y, load_image

DATA = Path(__file__).parent / "data"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            if rep.when != "call" and not rep.failed:
                continue
            number, title = props["criterion"]
            ok = rep.passed and rows.get(number, (True,))[0]
            rows[number] = (ok, title, props.get("detail", ""))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(rows):
        ok, title, detail = rows[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def camera64():
    """64x64 grayscale natural-image crop, values in [0, 1]."""
    return load_image(DATA / "camera_64.png")


@pytest.fixture(scope="session")
def camera160():
    return load_image(DATA / "camera_160.png")


@pytest.fixture(scope="session")
def astronaut96():
    """96x96 RGB crop."""
    return load_image(DATA / "astronaut_96.png")


@pytest.fixture
def image_dir(tmp_path, camera160, astronaut96):
    """Directory with one gray and one color HR image, for CLI and training runs."""
    from lapsrn.data import save_image

    d = tmp_path / "hr"
    d.mkdir()
    save_image(camera160, d / "camera.png")
    save_image(astronaut96, d / "astronaut.bmp")
    return d


def smooth_image(h, w, seed=0):
    """Band-limited random image in [0, 1] (sum of a few low-frequency cosines)."""
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w))
    for _ in range(6):
        fy, fx = r.uniform(0.5, 4.0, 2)
        img += r.uniform(0.2, 1.0) * np.cos(2 * np.pi * (fy * y + fx * x) + r.uniform(0, 2 * np.pi))
    img -= img.min()
    return img / img.max()


def luminance(img):
    return extract_y(img)
