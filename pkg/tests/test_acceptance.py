"""Acceptance criteria, one test each, at their stated tolerances.

The conftest summary hook prints a PASS/FAIL line per criterion.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from snowldm import checkpoint
from snowldm import tensor as T
from snowldm.cli import main
from snowldm.config import PipelineConfig
from snowldm.diffusion import DiffusionSchedule, cfg_combine, guided_eps, partial_augment, q_sample
from snowldm.metrics import chamfer, jsd_voxel
from snowldm.nets import Denoiser, DenoiserConfig
from snowldm.pipeline import reconstruction_scores
from snowldm.postprocess import PostprocessParams, depth_threshold, postprocess, select_static
from snowldm.quantize import LqCodebooks, VqCodebook, lq_indices, make_quantizer, vq_indices
from snowldm.range_codec import (
    PointCloud, RangeImage, SensorConfig, default_beam_elevations, depth_of, project, read_rimg,
    unproject,
)
from snowldm.synthdata import near_field_count
from snowldm.tensor import Tape, Tensor, check_gradients
from snowldm.train import load_pairs, train_autoencoder


# ---------------------------------------------------------------- 1. quantizer oracles

def brute_vq(z, vectors):
    flat = z.reshape(-1, z.shape[-1]).tolist()
    best = []
    for v in flat:
        d = [sum((a - b) ** 2 for a, b in zip(v, c)) for c in vectors.tolist()]
        best.append(min(range(len(d)), key=lambda k: (d[k], k)))
    return np.array(best).reshape(z.shape[:-1])


def brute_lq(z, table):
    """Exhaustive search over every combination of per-component codes."""
    flat = z.reshape(-1, z.shape[-1]).tolist()
    rows = table.tolist()
    best = []
    for v in flat:
        combos = itertools.product(*[range(len(r)) for r in rows])
        best.append(min(combos, key=lambda c: (sum((v[n] - rows[n][c[n]]) ** 2 for n in range(len(v))), c)))
    return np.array(best).reshape(z.shape)


def brute_lq_per_component(z, table):
    rows = table.tolist()
    return np.array([[min(range(len(rows[n])), key=lambda r: (abs(x - rows[n][r]), r))
                      for n, x in enumerate(site)]
                     for site in z.reshape(-1, z.shape[-1]).tolist()]).reshape(z.shape)


def test_criterion_01_quantizer_oracle_equivalence(note):
    rng = np.random.default_rng(0)
    lib_seconds = 0.0
    for _ in range(500):
        h, w, n_z = (int(v) for v in rng.integers(1, 5, size=3))
        z = rng.normal(size=(h, w, n_z))
        vectors = rng.normal(size=(int(rng.integers(1, 17)), n_z))
        table = rng.normal(size=(n_z, int(rng.integers(1, 17))))
        t0 = time.perf_counter()
        got_vq = vq_indices(z, vectors)
        got_lq = lq_indices(z, table)
        lib_seconds += time.perf_counter() - t0
        assert np.array_equal(got_vq, brute_vq(z, vectors))
        assert np.array_equal(got_lq, brute_lq_per_component(z, table))
        # the joint search is exponential in n_z, so it only runs on small tables
        if table.shape[1] ** n_z <= 256:
            assert np.array_equal(got_lq, brute_lq(z, table))
    note(f"library time {lib_seconds:.3f} s")
    assert lib_seconds < 5.0


# ---------------------------------------------------------------- 2. straight-through

@pytest.mark.parametrize("kind", ["vq", "lq"])
def test_criterion_02_straight_through_contract(kind):
    rng = np.random.default_rng(2)
    q = make_quantizer(kind, 4, 16, rng)
    z = Tensor(rng.normal(size=(3, 4, 4, 4)), requires_grad=True)
    with Tape() as tape:
        g = tape.backward(T.sum(q(z).z_q), wrt=[z])
    assert np.array_equal(g[z.id].data, np.ones(z.shape))


# ---------------------------------------------------------------- 3. learnable budgets

def test_criterion_03_learnable_budgets():
    assert VqCodebook.init(16384, 16, np.random.default_rng(0)).learnable_scalars() == 262_144
    assert LqCodebooks.init(256, 16).learnable_scalars() == 4_096


# ---------------------------------------------------------------- 4. autodiff

def _away_from_zero(a, margin=0.05):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin * 2, a)


def _op_builders():
    """name -> (builder, tolerance); each graph ends in a plain weighted sum."""
    def w(make):
        def builder(rng):
            fn, arrays = make(rng)
            wts = rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape)
            return (lambda *xs: T.sum(T.mul(fn(*xs), Tensor(wts)))), arrays
        return builder

    b = {}
    b["matmul"] = (w(lambda r: (lambda x, y, c: T.matmul(x, y, c),
                                [r.normal(size=(3, 4)), r.normal(size=(4, 5)), r.normal(size=5)])), 1e-4)

    def conv(r):
        x, k, c = r.normal(size=(2, 3, 6, 7)), r.normal(size=(4, 3, 3, 3)), r.normal(size=4)
        return (lambda x, k, c: T.conv2d(x, k, c, stride=(2, 1), padding=1)), [x, k, c]
    b["conv2d"] = (w(conv), 1e-3)

    def convt(r):
        x, k, c = r.normal(size=(2, 3, 3, 4)), r.normal(size=(3, 2, 4, 4)), r.normal(size=2)
        return (lambda x, k, c: T.conv2d_transpose(x, k, c, stride=2, padding=1)), [x, k, c]
    b["conv2d_transpose"] = (w(convt), 1e-3)
    b["add"] = (w(lambda r: (T.add, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])), 1e-4)
    b["sub"] = (w(lambda r: (T.sub, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])), 1e-4)
    b["mul"] = (w(lambda r: (T.mul, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])), 1e-4)
    b["relu"] = (w(lambda r: (T.relu, [_away_from_zero(r.normal(size=(4, 5)))])), 1e-3)
    b["silu"] = (w(lambda r: (T.silu, [r.normal(size=(4, 5)) * 2])), 1e-4)
    b["tanh"] = (w(lambda r: (T.tanh, [r.normal(size=(4, 5))])), 1e-4)
    b["reshape"] = (w(lambda r: ((lambda a: T.reshape(a, (6, 2))), [r.normal(size=(3, 4))])), 1e-4)
    b["transpose"] = (w(lambda r: ((lambda a: T.transpose(a, (2, 0, 1))), [r.normal(size=(2, 3, 4))])), 1e-4)
    b["concat"] = (w(lambda r: ((lambda a, c: T.concat([a, c], axis=1)),
                                [r.normal(size=(2, 3)), r.normal(size=(2, 5))])), 1e-4)

    def gather(r):
        idx = r.integers(0, 5, size=(3, 2))
        return (lambda s: T.gather(s, idx)), [r.normal(size=(5, 4))]
    b["gather"] = (w(gather), 1e-4)
    b["mean"] = (w(lambda r: (T.mean, [r.normal(size=(3, 4))])), 1e-4)
    b["sum"] = (w(lambda r: (T.sum, [r.normal(size=(3, 4))])), 1e-4)

    def l1(r):
        a = r.normal(size=(3, 4))
        c = a + _away_from_zero(r.normal(size=(3, 4)))   # keep |a - c| clear of the kink
        return T.l1_loss, [a, c]
    b["l1_loss"] = (w(l1), 1e-4)
    b["mse_loss"] = (w(lambda r: (T.mse_loss, [r.normal(size=(3, 4)), r.normal(size=(3, 4))])), 1e-4)
    b["affine_scale_shift"] = (w(lambda r: (T.affine_scale_shift, [r.normal(size=(2, 3, 4, 5)),
                                                                    r.normal(size=(2, 3)),
                                                                    r.normal(size=3)])), 1e-4)
    return b


OPS = _op_builders()


def test_criterion_04_autodiff_finite_differences(note):
    t0 = time.perf_counter()
    worst = {}
    for name, (builder, tol) in OPS.items():
        for seed in range(5):
            err = check_gradients(builder, seed)
            worst[name] = max(worst.get(name, 0.0), err)
            assert err < tol, f"{name} seed {seed}: relative error {err:.3g} >= {tol}"
    # stop_gradient: the tape must agree with differencing a graph where the stopped branch is frozen
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        with T.precision(np.float64):
            leaf = Tensor(x, requires_grad=True)
            with Tape() as tape:
                g = tape.backward(T.sum(T.mul(T.silu(leaf), T.stop_gradient(T.tanh(leaf)))), wrt=[leaf])[leaf.id].data
        frozen = np.tanh(x)
        err = check_gradients(lambda r: ((lambda a: T.sum(T.mul(T.silu(a), Tensor(frozen)))), [x]), seed)
        assert err < 1e-4
        sig = 1 / (1 + np.exp(-x))
        np.testing.assert_allclose(g, frozen * sig * (1 + x * (1 - sig)), rtol=1e-12)
    seconds = time.perf_counter() - t0
    note(f"{len(OPS) + 1} ops, worst {max(worst.values()):.2e}, {seconds:.1f} s")
    assert seconds < 30.0


# ---------------------------------------------------------------- 5. projection round trip

def _cloud_one_per_bin(cfg, rng, n):
    flat = rng.choice(cfg.H * cfg.W, size=n, replace=False)
    rows, cols = flat // cfg.W, flat % cfg.W
    theta = -math.pi + (cols + rng.uniform(0.01, 0.99, n)) * (2 * math.pi / cfg.W)
    phi = cfg.row_elevations()[rows]
    r = rng.uniform(0.5, cfg.r_max * 0.999, n)
    pts = np.stack([r * np.cos(phi) * np.cos(theta), r * np.cos(phi) * np.sin(theta), r * np.sin(phi)], 1)
    return PointCloud(pts, rows), r, theta, flat


@pytest.mark.parametrize("sensor", ["full", "toy"])
def test_criterion_05_projection_round_trip(sensor):
    cfg = SensorConfig(H=128, W=1024, r_max=120.0, beam_elevations=default_beam_elevations(128)) if sensor == "full" else SensorConfig.toy()
    cloud, r, theta, flat = _cloud_one_per_bin(cfg, np.random.default_rng(5), 1000)
    img = project(cloud, cfg)
    back = unproject(img, cfg)
    assert len(back) == 1000
    order = np.argsort(flat)   # unprojection emits pixels in row-major order
    assert np.all(np.abs(back.ranges - r[order]) <= cfg.r_max * 1e-6)
    back_theta = np.arctan2(back.points[:, 1], back.points[:, 0])
    dtheta = np.abs(np.angle(np.exp(1j * (back_theta - theta[order]))))
    assert np.all(dtheta <= math.pi / cfg.W)


# ---------------------------------------------------------------- 6. forward diffusion

def test_criterion_06_forward_diffusion_statistics():
    s = DiffusionSchedule.linear(100)
    rng = np.random.default_rng(6)
    z = q_sample(np.zeros(100_000), s.T, rng.standard_normal(100_000), s)
    assert abs(z.mean()) < 0.05 and 0.95 <= z.std() <= 1.05
    model = Denoiser(DenoiserConfig(n_z=4, channels=(4, 8), T=100), seed=0)
    z0 = rng.normal(size=(2, 4, 8, 4)).astype(np.float32)
    assert np.array_equal(partial_augment(model, z0, 0, s, rng), z0)


# ---------------------------------------------------------------- 7. guidance

def test_criterion_07_classifier_free_guidance():
    model = Denoiser(DenoiserConfig(n_z=2, channels=(3, 4), T=100, d_e=8, d_label=4), seed=1)
    rng = np.random.default_rng(7)
    state = model.state_dict()
    for k, v in state.items():
        if ".film." in k:   # make the label matter
            state[k] = rng.normal(scale=0.2, size=v.shape).astype(np.float32)
    model.set_parameters(state)
    z = rng.normal(size=(2, 4, 4, 2)).astype(np.float32)
    cond = model(Tensor(z), np.full(2, 9), np.full(2, 1)).data
    uncond = model(Tensor(z), np.full(2, 9), np.full(2, 2)).data
    assert not np.array_equal(cond, uncond)
    assert np.array_equal(guided_eps(model, z, 10, 1, 0.0), cond)
    for w in (0.5, 2.0, 7.5):
        np.testing.assert_allclose(guided_eps(model, z, 10, 1, w), (1 + w) * cond - w * uncond, atol=1e-6)
    c = np.array([[0.5, -1.0], [2.0, 0.25]])
    u = np.array([[0.1, 0.3], [-1.0, 0.0]])
    np.testing.assert_allclose(cfg_combine(c, u, 2.0), [[1.3, -3.6], [8.0, 0.75]], atol=1e-6)


# ---------------------------------------------------------------- 8. postprocessing

R_MAX = 120.0


def _img(meters):
    return RangeImage(np.array([[2 * m / R_MAX - 1 for m in meters]]), R_MAX)


def test_criterion_08_postprocessing():
    p = PostprocessParams(0.3, 0.02)
    # scalar examples; thresholds are evaluated at d_y
    x, y = _img([40.0, 30.0]), _img([40.2, 5.0])
    d_t = depth_threshold(np.array([40.2, 5.0]), p)
    np.testing.assert_allclose(d_t, [0.3 * math.exp(0.804), 0.3 * math.exp(0.1)], rtol=1e-12)
    assert d_t[0] > 0.2 and d_t[1] < 25.0
    static, _ = select_static(x, y, p)
    assert static.tolist() == [[True, False]]
    out = postprocess(x, y, p).depth
    assert out[0, 0] == x.depth[0, 0] and out[0, 1] == y.depth[0, 1]
    assert depth_threshold(50.0, p) == pytest.approx(0.8155, abs=5e-5)

    rng = np.random.default_rng(8)
    for _ in range(100):
        shape = (8, 16)
        xd, yd = rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape)
        xd[rng.random(shape) < 0.15] = -1.0
        yd[rng.random(shape) < 0.15] = -1.0
        close = rng.random(shape) < 0.3
        yd[close] = np.clip(xd[close] + rng.normal(0, 0.003, close.sum()), -1, 1)
        x, y = RangeImage(xd, R_MAX), RangeImage(yd, R_MAX)
        xd, yd = x.depth, y.depth   # as stored by the image
        p = PostprocessParams(float(rng.uniform(0, 1)), float(rng.uniform(0, 0.05)))
        out = postprocess(x, y, p).depth
        assert np.all((out == xd) | (out == yd))
        assert np.array_equal(postprocess(x, y, PostprocessParams(1e6, p.nu)).depth, xd)
        mx, vx = depth_of(x)
        my, vy = depth_of(y)
        cx, cy = np.where(vx, mx, R_MAX), np.where(vy, my, R_MAX)
        blend = np.where(cx <= cy, xd, yd)
        assert np.array_equal(postprocess(x, y, PostprocessParams(0.0, p.nu)).depth, blend)


# ---------------------------------------------------------------- 9. metrics

def brute_chamfer(a, b):
    def directed(src, dst):
        return sum(min(math.dist(p, q) for q in dst) for p in src) / len(src)
    return directed(a, b) + directed(b, a)


def test_criterion_09_metrics():
    rng = np.random.default_rng(9)
    for _ in range(5):
        a, b = rng.normal(size=(100, 3)) * 4, rng.normal(size=(100, 3)) * 4 + 1
        assert abs(chamfer(a, b) - brute_chamfer(a.tolist(), b.tolist())) <= 1e-6
        assert chamfer(a, a) == 0.0
        assert jsd_voxel(a, a) == 0.0
        assert 0.0 <= jsd_voxel(a, b) <= 1.0
        assert jsd_voxel(a, a + [50.0, 0.0, 0.0]) == 1.0


# ---------------------------------------------------------------- 10. LQ versus VQ

SWEEP_SEEDS = (0, 1, 2)
VQ_K = 128


@dataclass
class Sweep:
    scores: dict          # (kind, seed) -> (cd, jsd)
    lq_seed0_state: dict
    seconds: float


@pytest.fixture(scope="session")
def ae_sweep(toy_data) -> Sweep:
    """LQ and VQ autoencoders with the same training budget for every seed."""
    cfg = PipelineConfig()
    sensor = cfg.sensor()
    clear, snow, _ = load_pairs(toy_data.train)
    h_clear, h_snow, _ = load_pairs(toy_data.held_out)
    held_out = np.concatenate([h_clear, h_snow])
    t0 = time.perf_counter()
    scores, lq0 = {}, None
    for seed in SWEEP_SEEDS:
        for kind, size in (("lq", cfg.ae_codebook_size), ("vq", VQ_K)):
            cfg.seed, cfg.ae_quantizer, cfg.ae_codebook_size = seed, kind, size
            ae, _ = train_autoencoder(clear, snow, cfg.encoder(), cfg.ae_train())
            scores[kind, seed] = reconstruction_scores(ae, held_out, sensor, cfg.min_range)
            if (kind, seed) == ("lq", 0):
                lq0 = ae.to_state()
        cfg.ae_codebook_size = PipelineConfig().ae_codebook_size
    return Sweep(scores, lq0, time.perf_counter() - t0)


def test_criterion_10_lq_not_worse_than_vq(ae_sweep, note):
    lq = np.mean([ae_sweep.scores["lq", s] for s in SWEEP_SEEDS], axis=0)
    vq = np.mean([ae_sweep.scores["vq", s] for s in SWEEP_SEEDS], axis=0)
    note(f"LQ CD {lq[0]:.4f} JSD {lq[1]:.4f} | VQ CD {vq[0]:.4f} JSD {vq[1]:.4f} | {ae_sweep.seconds / 60:.1f} min")
    assert ae_sweep.seconds < 30 * 60
    assert lq[0] <= 1.05 * vq[0]
    assert lq[1] <= 1.05 * vq[1]


# ---------------------------------------------------------------- 11. end to end

def _augment(run, out_dir):
    inputs = sorted(str(p) for p in run.data.held_out.glob("scene_*_clear.rimg"))
    assert len(inputs) == 50
    cfg = PipelineConfig()
    assert main(["augment", *inputs, "--ae", str(run.ae_ckpt), "--ldm", str(run.ldm_ckpt),
                 "--out", str(out_dir), "--t-aug", str(cfg.diffusion_T // 2)]) == 0
    return inputs


def test_criterion_11_end_to_end_augmentation(toy_run, ae_sweep, tmp_path, note):
    t0 = time.perf_counter()
    inputs = _augment(toy_run, tmp_path / "a")
    augment_seconds = time.perf_counter() - t0
    wins = 0
    for path in inputs:
        stem = path.rsplit("/", 1)[-1].removesuffix(".rimg")
        x = read_rimg(path)
        refined = read_rimg(tmp_path / "a" / f"{stem}_y_refined.rimg")
        wins += near_field_count(*depth_of(refined)) > near_field_count(*depth_of(x))
    # determinism: the augmentation replays byte for byte, and the CLI autoencoder
    # equals the one the library trains from the same seed
    _augment(toy_run, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    cli_state = checkpoint.load(toy_run.ae_ckpt)
    for k, v in ae_sweep.lq_seed0_state.items():
        assert np.array_equal(cli_state[k], v), k
    total = toy_run.seconds + augment_seconds
    note(f"{wins}/50 scenes gain near-field returns; pipeline {total / 60:.1f} min")
    assert total < 30 * 60
    assert wins >= 40
