import numpy as np
import pytest

from dynsplat.geometry import CameraModel
from dynsplat.raster import ProjectedGaussians
from dynsplat.synthetic import SyntheticSceneSpec, generate_synthetic

TINY_SPEC = dict(n_gaussians=400, n_frames=8, width=32, height=32, focal=32.0, seed=3)


def random_projected(rng, n, width, height, scale=(1.0, 6.0), opacity=(0.05, 0.95)):
    """Random screen-space Gaussians with well-conditioned covariances."""
    means = np.column_stack([rng.uniform(-4, width + 3, n), rng.uniform(-4, height + 3, n)])
    sx = rng.uniform(*scale, n)
    sy = rng.uniform(*scale, n)
    th = rng.uniform(0, np.pi, n)
    c, s = np.cos(th), np.sin(th)
    a = c * c * sx ** 2 + s * s * sy ** 2
    b = c * s * (sx ** 2 - sy ** 2)
    cc = s * s * sx ** 2 + c * c * sy ** 2
    return ProjectedGaussians(means, np.column_stack([a, b, cc]), rng.uniform(0, 1, (n, 3)),
                              rng.uniform(*opacity, n), rng.uniform(1.0, 5.0, n))


def image_camera(width, height, f=None):
    f = f or float(width)
    return CameraModel(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """A small synthetic scene on disk: ``(path, spec, teacher checkpoint)``."""
    spec = SyntheticSceneSpec(**TINY_SPEC)
    out, ck = generate_synthetic(spec, tmp_path_factory.mktemp("tiny"))
    return out, spec, ck


def five_gaussian_model(kind="sad", seed=0):
    """Five Gaussians, a small HexPlane and a decoder with live heads: ``(model, camera, target)``."""
    from dynsplat.cloud import init_from_points
    from dynsplat.decoder import init_params
    from dynsplat.geometry import look_at
    from dynsplat.hexplane import HexPlaneField
    from dynsplat.pipeline import Model
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, (5, 3))
    cloud = init_from_points(pts, rng.uniform(0, 1, (5, 3)), 1.0, sh_degree=1, opacity=0.6)
    cloud.log_scales += 1.0
    R, t = look_at([0, 0, -3], [0, 0, 0])
    cam = CameraModel(20, 20, 7.5, 7.5, 16, 16, R, t)
    field = HexPlaneField.create(-np.ones(3), np.ones(3), hidden=8, resolution=4, time_resolution=4, seed=seed + 1)
    dec = init_params(8, seed=seed + 2, kind=kind)
    for k in dec:
        if "head" in k:
            dec[k] = rng.normal(0, 0.05, dec[k].shape)
    if kind == "sad":
        dec["dec.gamma1"] = np.array(0.3)
        dec["dec.gamma2"] = np.array(0.3)
    m = Model(cloud, field, dec, kind)
    m.update_max_rate([cam])
    return m, cam, rng.uniform(0, 1, (16, 16, 3))


SMALL_CFG = dict(hidden=8, resolution=8, time_resolution=4, warmup_iters=3, total_iters=6,
                 densify_start=4, densify_interval=2, densify_stop=4, init_fraction=0.5, init_stride=4)


@pytest.fixture
def small_cfg():
    from dynsplat.config import TrainConfig
    return TrainConfig(**SMALL_CFG)


@pytest.fixture(scope="session")
def tiny_trained(tiny_scene):
    """A few iterations of training on the tiny scene: ``(dataset, config, result)``."""
    from dynsplat.config import TrainConfig
    from dynsplat.datasets import load_scene
    from dynsplat.trainer import train
    ds = load_scene(tiny_scene[0])
    cfg = TrainConfig(**SMALL_CFG)
    return ds, cfg, train(ds, cfg)


CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(num, name, ok, detail)`` records a verdict line and asserts it."""
    def record(num, name, ok, detail=""):
        CRITERIA[num] = f"criterion {num} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        assert ok, CRITERIA[num]
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
