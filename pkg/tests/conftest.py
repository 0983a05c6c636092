import numpy as np
import pytest

from keycongeal import geometry


def random_homography(rng, scale=0.05, persp=1e-4, shift=20.0):
    """Well-conditioned homography near the identity."""
    H = np.eye(3)
    H[:2, :2] += rng.uniform(-scale, scale, (2, 2))
    H[:2, 2] = rng.uniform(-shift, shift, 2)
    H[2, :2] = rng.uniform(-persp, persp, 2)
    return geometry.normalize(H)


def corner_gap(A, B, size=(320, 240)):
    """Mean distance between the frame corners warped by two homographies."""
    w, h = size
    c = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
    return float(np.mean(np.linalg.norm(geometry.warp_points(A, c) - geometry.warp_points(B, c), axis=1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def congeal_scene(scene, delta_f, config=None, init=None, seed=0):
    """Init, connect and congeal the keyframes of a harness scene (injected keypoints)."""
    from keycongeal.congeal import FrameStack, SolverConfig, congeal_keyframes, select_keyframes
    from keycongeal.keypoints import normalize_scales
    from keycongeal.linkgraph import connect_stack, estimate_translations

    kps = scene.keypoints
    normalize_scales(kps)
    offs, _ = estimate_translations(kps, seed=seed)
    keys = select_keyframes(len(kps), delta_f)
    graph = connect_stack({k: kps[k] for k in keys}, {k: offs[k] for k in keys}, scene.size,
                          seed=seed)
    H0 = {k: geometry.translation(*offs[k]) for k in keys}
    if init is not None:
        H0 = {k: geometry.compose(init, H) for k, H in H0.items()}
    stack = FrameStack(keys, graph, scene.size, H0)
    H, report = congeal_keyframes(stack, config or SolverConfig())
    return keys, H, report, stack, offs


def pair_errors(H, gt, keys, size, only_overlapping=True):
    from keycongeal import harness
    out = []
    for x, i in enumerate(keys):
        for j in keys[x + 1:]:
            if only_overlapping and not harness.overlapping(gt, i, j, size):
                continue
            out.append(harness.relative_corner_error(H, gt, i, j, size))
    return np.array(out)


ACCEPTANCE = []


def verdict(number, name, ok, detail=""):
    """Record and print one acceptance line, then assert it."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
