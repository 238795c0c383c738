"""Smoke test for the Python bindings.

Build the extension and run this script with the built library on the path:

    cargo build --release -p rayloc-py
    ln -sf ../target/release/librayloc_py.so python/rayloc_py.so
    python3 python/smoke.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import rayloc_py as rl


def rot_z(angle, t):
    c, s = math.cos(angle), math.sin(angle)
    return [[c, -s, 0.0, t[0]], [s, c, 0.0, t[1]], [0.0, 0.0, 1.0, t[2]], [0.0, 0.0, 0.0, 1.0]]


def main():
    poses = [rot_z(0.3, [1.0, 2.0, 3.0]), rot_z(-0.2, [4.0, -1.0, 2.0])]
    normalized, scale = rl.normalize_poses(poses)
    # Relative translation of the second camera: R0^T (t1 - t0).
    c, s0 = math.cos(0.3), math.sin(0.3)
    d = [3.0, -3.0, -1.0]
    rel = [c * d[0] + s0 * d[1], -s0 * d[0] + c * d[1], d[2]]
    assert abs(scale - max(abs(x) for x in rel)) < 1e-12, scale
    for i in range(4):
        for j in range(4):
            assert abs(normalized[0][i][j] - (1.0 if i == j else 0.0)) < 1e-12

    e_t, e_r = rl.pose_error(poses[0], poses[0])
    assert e_t == 0.0 and e_r < 1e-6

    # Camera at the origin looking down +z.
    k = [100.0, 100.0, 64.0, 48.0, 128.0, 96.0]
    points = [[0.5, 0.2, 4.0], [-0.7, 0.4, 5.0], [0.1, -0.6, 3.0]]
    pixels = [(k[0] * x / z + k[2], k[1] * y / z + k[3]) for x, y, z in points]
    solutions = rl.p3p(pixels, points, k)
    best = min(rl.pose_error(s, rot_z(0.0, [0.0, 0.0, 0.0]))[0] for s in solutions)
    assert best < 1e-6, best

    ids = [10, 11, 12]
    desc = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    assert rl.topk(ids, desc, [1.0, 0.1], 2) == [10, 12]

    worst = max(e for _, e in rl.gradient_check(points=1))
    assert worst < 1e-5, worst

    csv = rl.results_csv([(1, 0.1, 1.0), (2, float("inf"), float("inf"))])
    summary = rl.summarize(csv)
    assert "failures,1" in summary, summary

    with tempfile.TemporaryDirectory() as tmp:
        train, test = rl.generate_dataset(os.path.join(tmp, "d.bin"), scenes=2)
        assert (train, test) == (1, 1)

    print("python bindings ok")


if __name__ == "__main__":
    main()
