"""Smoke test for the xtrack Python module on a small phantom."""

import tempfile

import xtrack

SMALL = """
seed = 2
[phantom]
dims = [32, 32, 32]
n_lines = 3
n_ellipsoids = 4
[deformation]
line_magnitude = [1.0, 2.0]
amplitude = 1.0
[geometry]
detector = [32, 32]
[reg2d]
max_iterations = 40
[reg3d]
max_iterations = 30
"""


def main():
    cfg = xtrack.Config(SMALL)
    assert cfg.dims == [32, 32, 32]
    try:
        xtrack.Config("[noise]\nbogus = 1\n")
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    frames = xtrack.deformation_sequence(cfg)
    assert len(frames) == 2
    (start, start_lines), (moved_vol, truth_lines) = frames
    assert len(start_lines) == 3 and start.dims == [32, 32, 32]

    noisy = [
        xtrack.add_poisson_noise(xtrack.forward_project(moved_vol, cfg, v), 0.24 * 64, 10 + v)
        for v in range(2)
    ]
    assert noisy[0].width == 32 and noisy[0].min() >= 0.0

    moved, dx, dy = xtrack.register_2d(xtrack.forward_project(start, cfg, 0), noisy[0], cfg)
    assert len(dx) == len(dy) == 32 * 32
    response, binary, threshold = xtrack.detect_features(moved, cfg)
    assert 0.0 <= response.min() and response.max() <= 1.0 and threshold > 0.0

    est = xtrack.track_frame(start, start_lines, noisy[0], noisy[1], cfg)
    truth = xtrack.rasterize(truth_lines, [32, 32, 32])
    chamfer = xtrack.volume_chamfer(est.feature_volume, truth)
    assert chamfer < 3.0, chamfer
    assert len(est.checksums()) == 9

    assert xtrack.chamfer_distance([[0, 0, 0]], [[3, 4, 0]]) == 5.0
    assert xtrack.roc_auc([0.9, 0.8, 0.3, 0.1], [True, False, True, False]) == 0.75

    with tempfile.TemporaryDirectory() as d:
        n = xtrack.gen(cfg, f"{d}/dataset")
        assert n > 0
        digest = xtrack.track(cfg, f"{d}/dataset", f"{d}/run")
        assert len(digest) == 64
        passed, text = xtrack.evaluate(f"{d}/run")
        assert "chamfer" in text

    print(f"ok: frame chamfer {chamfer:.3f} voxels, eval passed={passed}")


if __name__ == "__main__":
    main()
