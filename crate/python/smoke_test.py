"""Smoke test for the `selfrecon` Python module.

Build and install first:
    pip install --no-build-isolation ./crates/py
or
    maturin develop -m crates/py/Cargo.toml
"""

import math
import sys
import tempfile
from pathlib import Path

import selfrecon as sr


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok: {msg}")


def main():
    gray = sr.Image.filled(16, 16, [0.5, 0.5, 0.5])
    check(sr.psnr(gray, gray) == 99.0, "psnr of identical images hits the cap")
    darker = sr.Image.filled(16, 16, [0.4, 0.4, 0.4])
    check(abs(sr.psnr(gray, darker) - 20.0) < 1e-9, "psnr at mse 0.01 is 20 dB")
    check(abs(sr.ssim(gray, gray) - 1.0) < 1e-12, "ssim of identical images is 1")
    check(sr.perceptual_distance(gray, gray) == 0.0, "perceptual distance to itself is 0")

    check(sr.curriculum_bounds(0, 100) == (15.0, 15.0), "curriculum starts at 15 degrees")
    check(sr.curriculum_bounds(100, 100) == (90.0, 90.0), "curriculum ends at 90 degrees")

    pose = sr.RelativePose(30.0, 10.0)
    inv = pose.inverse()
    check(inv.azimuth_deg == -30.0 and inv.elevation_deg == -10.0, "pose inverse negates angles")
    center = sr.RelativePose(0.0, 0.0).camera_center()
    check(math.isclose(center[2], 1.8) and abs(center[0]) < 1e-12, "canonical camera sits on +z")

    views = sr.render_toy_shape(3, [sr.RelativePose(0.0, 0.0)], 24, 32)
    check(len(views) == 1 and views[0].width == 24, "toy shape renders")

    cfg = """
[train.model]
input_resolution = 16
patch_size = 4
token_width = 16
blocks = 1
triplane_res = 8
triplane_channels = 4
plane_tokens = 4
decoder_hidden = [16]
"""
    model = sr.Model.init(cfg, 1)
    scene = model.reconstruct(views[0])
    img = scene.render(45.0, 20.0, 12, 16)
    check(img.width == 12 and all(0.0 <= v <= 1.0 + 1e-9 for v in img.data()), "reconstruct and render")

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "synth"
        code = sr.run_cli(["generate-data", "--kind", "synthetic", "--shapes", "2", "--seed", "7",
                           "--out", str(out), "--resolution", "16", "--samples-per-ray", "16"])
        check(code == 0, "cli generate-data succeeds")
        check(len([p for p in (out / "shapes").iterdir() if p.is_dir()]) == 2, "two shape folders written")
        check(sr.run_cli(["generate-data", "--kind", "synthetic", "--shapes", "2"]) == 2, "missing --out exits 2")

    try:
        sr.RelativePose(0.0, 120.0)
    except ValueError:
        check(True, "out-of-range elevation raises ValueError")
    else:
        check(False, "out-of-range elevation raises ValueError")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
