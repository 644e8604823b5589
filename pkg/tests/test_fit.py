# pylint: disable=redefined-outer-name
# required to avoid trouble with fixture declaration

"""Test module for fitting and evaluation."""

import math
import os

import numpy as np
import torch

from pytest import mark
from pytest import raises

from modules.deform import CharacterModel
from modules.deform import PosedVolumeView
from modules.deform import load_model
from modules.fit import RAW_INIT
from modules.fit import AdamState
from modules.fit import DivergenceError
from modules.fit import FitError
from modules.fit import FitParams
from modules.fit import Frame
from modules.fit import adam_step
from modules.fit import backward
from modules.fit import evaluate
from modules.fit import fit
from modules.fit import frame_loss
from modules.fit import load_frames
from modules.fit import loss_l1
from modules.fit import loss_l2
from modules.fit import psnr
from modules.fit import save_checkpoint
from modules.fit import weight_agreement
from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.kinematics import motion_bases
from modules.manifest import ManifestHandler
from modules.render import Camera
from modules.render import composite
from modules.render import render_image
from modules.render import to_bytes
from modules.schemas import FitConfig
from modules.schemas import GridConfig
from modules.synthdata import figure_model
from modules.synthdata import generate_dataset
from modules.synthdata import interior_region
from modules.synthdata import sample_cameras
from modules.synthdata import sample_poses
from modules.volume import VoxelGrid
from modules.volume import gaussian_prior

from tests.common import constant_grid
from tests.common import figure_spec
from tests.common import unit_box


def two_bone_setup():
    """Two-bone chain, its canonical pose, a target pose and a camera."""
    skel = Skeleton(
        parents=(-1, 0),
        offsets=np.array([[0.0, 0.0, -0.2], [0.0, 0.0, 0.4]]),
        sigma=np.array([0.3, 0.3]),
    )
    canonical = Pose.canonical(skel)
    target = Pose(
        joints=canonical.joints,
        angles=np.array([[0.1, -0.2, 0.05], [0.3, 0.1, -0.2]]),
    )
    cam = Camera.look_at(np.array([2.0, 1.0, 1.5]), np.zeros(3), 8, 8)
    return skel, canonical, target, cam


def softplus_inv(v: torch.Tensor) -> torch.Tensor:
    """Raw value whose softplus is `v`."""
    return torch.log(torch.expm1(v))


def random_params(rng: np.random.Generator, affine: bool = False) -> FitParams:
    """Parameters on a 6³ canonical and 4³ weight grid.

    With `affine` the activated canonical volume is an affine function of
    position, which trilinear sampling reproduces exactly.
    """
    box = unit_box((6, 6, 6), half=0.6)
    if affine:
        x = box.centers()
        rgb = 0.3 + 0.2 * x
        alpha = 0.2 + 0.1 * x[..., 1:2]
        raw = softplus_inv(torch.cat([rgb, alpha], dim=-1))
    else:
        raw = torch.from_numpy(rng.uniform(-3.0, 0.3, size=(6, 6, 6, 4)))
    wbox = unit_box((4, 4, 4), half=0.5)
    delta = torch.from_numpy(rng.normal(scale=0.5, size=(4, 4, 4, 3)))
    return FitParams(
        raw_canonical=VoxelGrid(box=box, values=raw),
        delta_w=VoxelGrid(box=wbox, values=delta, background=True),
    )


def opaque_frame(pose, cam, rgb) -> Frame:
    """Frame with an opaque ground truth image."""
    rgb = torch.as_tensor(rgb, dtype=torch.float64)
    ones = torch.ones(rgb.shape[:2], dtype=torch.float64)
    return Frame("0", pose, cam, rgb, ones, ones)


def rendered_frames(model: CharacterModel, poses, cams) -> list[Frame]:
    """Frames rendered from a model and quantized like stored images."""
    frames = []
    for i, (pose, cam) in enumerate(zip(poses, cams)):
        img = render_image(model.pose(pose), cam)
        rgb = to_bytes(img.rgb.numpy()) / 255.0
        alpha = to_bytes(img.alpha.numpy()) / 255.0
        frames.append(
            Frame(
                str(i),
                pose,
                cam,
                torch.from_numpy(rgb),
                torch.from_numpy(alpha),
                torch.from_numpy((alpha > 0).astype(np.float64)),
            )
        )
    return frames


def test_losses():
    """Tests the L2 and masked L1 losses."""
    zeros = torch.zeros(2, 2, 3, dtype=torch.float64)
    ones = torch.ones(2, 2, 3, dtype=torch.float64)
    assert float(loss_l2(zeros, zeros)) == 0.0
    assert float(loss_l2(zeros, ones)) == 12.0

    rng = np.random.default_rng(0)
    a = rng.uniform(size=(4, 5, 3))
    b = rng.uniform(size=(4, 5, 3))
    oracle = 0.0
    for i in range(4):
        for j in range(5):
            for c in range(3):
                oracle += (a[i, j, c] - b[i, j, c]) ** 2
    res = float(loss_l2(torch.from_numpy(a), torch.from_numpy(b)))
    assert abs(res - oracle) < 1e-12

    truth = zeros.clone()
    truth[0, 1] = torch.tensor([0.5, 0.0, 0.25])
    mask = torch.zeros(2, 2)
    assert float(loss_l1(zeros, truth, mask)) == 0.0
    mask[0, 1] = 1.0
    assert float(loss_l1(zeros, truth, mask)) == 0.75
    assert float(loss_l1(truth, truth, mask)) == 0.0

    with raises(FitError) as err:
        loss_l2(zeros, torch.zeros(2, 3, 3))
    assert str(err.value) == "images (2, 2, 3) and (2, 3, 3) differ in shape"

    with raises(FitError) as err:
        loss_l1(zeros, zeros, torch.zeros(3, 2))
    assert str(err.value) == "mask (3, 2) does not match image (2, 2, 3)"


def finite_difference_check(params, which, frame, setup):
    """Compares every gradient entry of a grid with central differences."""
    skel, canonical = setup
    cfg = FitConfig(loss="l2")
    bg = [0.2, 0.5, 0.7]
    prior = gaussian_prior(skel, canonical, params.delta_w.box)
    _, grads = backward(params, frame, skel, canonical, prior, cfg, bg)

    h = 1e-4
    base = params.tensors()[which]
    for idx in range(base.numel()):
        losses = []
        for sign in (1.0, -1.0):
            values = base.clone().reshape(-1)
            values[idx] += sign * h
            tensors = list(params.tensors())
            tensors[which] = values.reshape(base.shape)
            with torch.no_grad():
                loss = frame_loss(
                    params.with_tensors(tensors),
                    frame,
                    skel,
                    canonical,
                    prior,
                    cfg,
                    bg,
                )
            losses.append(float(loss))
        fd = (losses[0] - losses[1]) / (2.0 * h)
        g = float(grads[which].reshape(-1)[idx])
        assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g)) + 1e-8


@mark.parametrize("seed", range(5))
def test_backward_finite_differences(seed):
    """Tests gradients of both parameter grids against finite differences.

    The weight offsets are checked over an affine canonical volume, which
    trilinear sampling reproduces without kinks at cell faces.
    """
    rng = np.random.default_rng(seed)
    skel, canonical, target, cam = two_bone_setup()
    frame = opaque_frame(target, cam, rng.uniform(size=(8, 8, 3)))

    params = random_params(rng)
    assert params.tensors()[0].numel() == 864
    finite_difference_check(params, 0, frame, (skel, canonical))

    params = random_params(rng, affine=True)
    assert params.tensors()[1].numel() == 192
    finite_difference_check(params, 1, frame, (skel, canonical))


def test_backward_stationary():
    """Tests zero gradients at zero residual and linearity in the residual."""
    rng = np.random.default_rng(11)
    skel, canonical, target, cam = two_bone_setup()
    params = random_params(rng)
    prior = gaussian_prior(skel, canonical, params.delta_w.box)
    cfg = FitConfig(loss="l2")
    bg = torch.tensor([0.1, 0.9, 0.4], dtype=torch.float64)

    view = params.to_model(skel, canonical, prior).pose(target)
    img = render_image(view, cam, differentiable=True)
    ones = torch.ones(8, 8, dtype=torch.float64)
    exact = Frame("0", target, cam, img.rgb, img.alpha, ones)
    loss, grads = backward(params, exact, skel, canonical, prior, cfg, bg)
    assert loss == 0.0
    assert all(int(torch.count_nonzero(g)) == 0 for g in grads)

    truth = torch.from_numpy(rng.uniform(size=(8, 8, 3)))
    rendered = composite(img, bg)
    _, g1 = backward(
        params,
        opaque_frame(target, cam, truth),
        skel,
        canonical,
        prior,
        cfg,
        bg,
    )
    _, g2 = backward(
        params,
        opaque_frame(target, cam, 2.0 * truth - rendered),
        skel,
        canonical,
        prior,
        cfg,
        bg,
    )
    assert torch.allclose(g2[0], 2.0 * g1[0], rtol=1e-10, atol=1e-15)


def test_render_affine_in_colors():
    """Tests that renders are affine in the canonical colors."""
    rng = np.random.default_rng(4)
    skel, canonical, target, cam = two_bone_setup()
    box = unit_box((6, 6, 6), half=0.6)
    alpha = torch.from_numpy(rng.uniform(0.0, 0.8, size=(6, 6, 6, 1)))
    c1 = torch.from_numpy(rng.uniform(size=(6, 6, 6, 3)))
    c2 = torch.from_numpy(rng.uniform(size=(6, 6, 6, 3)))
    weights = gaussian_prior(skel, canonical, unit_box((4, 4, 4), half=0.5))
    bases = motion_bases(skel, canonical, target)

    def render(rgb):
        view = PosedVolumeView(
            canonical=VoxelGrid(box=box, values=torch.cat([rgb, alpha], -1)),
            weights=weights,
            bases=bases,
        )
        return render_image(view, cam, differentiable=True).rgb

    zero = render(torch.zeros_like(c1))
    assert torch.allclose(
        render(c1 + c2), render(c1) + render(c2) - zero, atol=1e-6
    )


def test_adam_step():
    """Tests Adam against hand-computed and scalar reference steps."""
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    state = AdamState.create((p,), FitConfig(lr=1e-4))

    (q,), zero_state = adam_step(state, (p,), (torch.zeros_like(p),))
    assert torch.equal(q, p)
    assert zero_state.t == 1

    g = torch.full_like(p, 0.5)
    (q,), state = adam_step(state, (p,), (g,))
    expected = p - 1e-4 * 0.5 / (0.5 + 1e-8)
    assert torch.allclose(q, expected, rtol=0.0, atol=1e-15)

    (r,), state = adam_step(state, (q,), (g,))
    assert state.t == 2

    # scalar reference
    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = 0.9 * m + 0.1 * 0.5
        v = 0.999 * v + 0.001 * 0.25
        mhat = m / (1.0 - 0.9**t)
        vhat = v / (1.0 - 0.999**t)
        x -= 1e-4 * mhat / (math.sqrt(vhat) + 1e-8)
    assert abs(float(r[0]) - x) < 1e-12


def test_psnr():
    """Tests PSNR values, the perfect sentinel and negative errors."""
    assert abs(psnr(65025.0)) < 1e-12
    assert abs(psnr(650.25) - 20.0) < 1e-12
    assert psnr(0.0) == math.inf

    with raises(FitError) as err:
        psnr(-1.0)
    assert str(err.value) == "mse must be non-negative, got -1.0"


def test_fit_initialization():
    """Tests that zero iterations return the initialization."""
    spec = figure_spec()
    skel = spec.skeleton
    canonical = Pose.canonical(skel)
    model = figure_model(spec, (10, 10, 10))
    cams = sample_cameras(4, 2.25, 8, 8)
    frames = rendered_frames(model, sample_poses(skel, 1, 0.5, 0), cams)
    grid = GridConfig(canonical=(6, 6, 6), weights=(4, 4, 4))

    res = fit(frames, skel, canonical, grid, FitConfig(iterations=0))
    raw, delta = res.params.tensors()
    assert raw.shape == (6, 6, 6, 4) and delta.shape == (4, 4, 4, 5)
    assert torch.equal(raw, torch.full_like(raw, RAW_INIT))
    assert torch.equal(delta, torch.zeros_like(delta))
    assert res.losses == []
    assert abs(math.log1p(math.exp(RAW_INIT)) - 0.01) < 1e-15

    with raises(FitError) as err:
        fit([], skel, canonical, grid, FitConfig())
    assert str(err.value) == "no training frames"


def test_fit_determinism(tmp_path):
    """Tests that fitting does not depend on the worker count."""
    spec = figure_spec()
    skel = spec.skeleton
    canonical = Pose.canonical(skel)
    model = figure_model(spec, (10, 10, 10))
    poses = sample_poses(skel, 3, 0.5, 0)
    frames = rendered_frames(model, poses, sample_cameras(3, 2.25, 8, 8))
    grid = GridConfig(canonical=(6, 6, 6), weights=(4, 4, 4))

    results = []
    for workers in (1, 2):
        cfg = FitConfig(iterations=2, lr=1e-2, workers=workers, eval_every=1)
        results.append(
            fit(
                frames,
                skel,
                canonical,
                grid,
                cfg,
                eval_frames=frames[:1],
                log_path=tmp_path / f"fit{workers}.log",
            )
        )
    a, b = results
    assert a.losses == b.losses
    for x, y in zip(a.params.tensors(), b.params.tensors()):
        assert torch.equal(x, y)

    lines = (tmp_path / "fit1.log").read_text().splitlines()
    assert len(lines) == 2
    it, loss, score = lines[1].split(",")
    assert it == "2" and float(loss) > 0 and math.isfinite(float(score))

    cfg = FitConfig(iterations=1, eval_every=0)
    fit(frames, skel, canonical, grid, cfg, log_path=tmp_path / "noeval.log")
    assert (tmp_path / "noeval.log").read_text().strip().endswith(",nan")


def test_fit_divergence():
    """Tests that a non-finite loss keeps the last good parameters."""
    skel, canonical, target, cam = two_bone_setup()
    bad = opaque_frame(target, cam, torch.full((8, 8, 3), math.nan))
    grid = GridConfig(canonical=(6, 6, 6), weights=(4, 4, 4))

    with raises(DivergenceError) as err:
        fit([bad], skel, canonical, grid, FitConfig(iterations=3))
    assert str(err.value) == "iteration 1 :: frame 0 :: non-finite loss nan"
    raw, delta = err.value.params.tensors()
    assert torch.equal(raw, torch.full_like(raw, RAW_INIT))
    assert torch.equal(delta, torch.zeros_like(delta))


def test_evaluate():
    """Tests the ground-truth oracle and the empty test set."""
    spec = figure_spec()
    skel = spec.skeleton
    model = figure_model(spec, (10, 10, 10))
    poses = sample_poses(skel, 2, 0.5, 0)
    frames = rendered_frames(model, poses, sample_cameras(2, 1.5, 8, 8))

    res = evaluate(model, frames)
    assert res.psnr == math.inf and res.mse == 0.0

    params = FitParams.initial(
        skel, Pose.canonical(skel), GridConfig(canonical=(6, 6, 6))
    )
    prior = gaussian_prior(skel, Pose.canonical(skel), params.delta_w.box)
    res = evaluate(params.to_model(skel, Pose.canonical(skel), prior), frames)
    assert math.isfinite(res.psnr) and res.mse > 0

    with raises(FitError) as err:
        evaluate(model, [])
    assert str(err.value) == "no frames to evaluate"


def test_weight_agreement():
    """Tests agreement of identical and swapped one-hot weights."""
    box = unit_box((5, 5, 5))
    x = box.centers()
    left = (x[..., 0] < 0).double()[..., None]
    reference = VoxelGrid(
        box=box,
        values=torch.cat([left, 1.0 - left, torch.zeros_like(left)], -1),
        background=True,
    )
    region = torch.ones(5, 5, 5, dtype=torch.bool)
    assert weight_agreement(reference, reference, region) == 1.0

    swapped = reference.replace(reference.values[..., [1, 0, 2]])
    assert weight_agreement(swapped, reference, region) == 0.0

    with raises(FitError) as err:
        weight_agreement(reference, reference, torch.zeros(5, 5, 5))
    assert str(err.value) == "empty agreement region"

    with raises(FitError) as err:
        weight_agreement(constant_grid(box, [1.0, 0.0]), reference, region)
    assert str(err.value) == "weights have 2 channels, reference 3"


def test_checkpoint(tmp_path):
    """Tests fitted checkpoints through the model loader."""
    rng = np.random.default_rng(2)
    skel, canonical, _, _ = two_bone_setup()
    params = random_params(rng)
    save_checkpoint(params, skel, canonical, tmp_path / "ckpt")

    model = load_model(tmp_path / "ckpt")
    prior = gaussian_prior(skel, canonical, params.delta_w.box)
    expected = params.to_model(skel, canonical, prior)
    assert np.array_equal(model.canonical_pose.joints, canonical.joints)
    assert torch.allclose(
        model.canonical.values, expected.canonical.values, atol=1e-6
    )
    assert torch.allclose(
        model.weights.values, expected.weights.values, atol=1e-6
    )


def test_load_frames(tmp_path):
    """Tests reading manifest frames with premultiplied images."""
    spec = figure_spec()
    model = figure_model(spec, (10, 10, 10))
    poses = sample_poses(spec.skeleton, 2, 0.5, 0)
    handler = generate_dataset(
        model, poses, sample_cameras(4, 2.25, 8, 8), tmp_path, holdout_poses=0
    )
    frames = load_frames(handler.query("train"), tmp_path)
    assert [f.name for f in frames] == ["0", "1"]
    for f in frames:
        assert f.rgb.shape == (8, 8, 3) and f.alpha.shape == (8, 8)
        assert torch.equal(f.mask, (f.alpha > 0).double())

    assert evaluate(model, frames).psnr == math.inf

    rec = handler.query()[0]
    broken = rec.model_copy(update={"image": "images/missing.png"})
    with raises(FileNotFoundError) as err:
        load_frames([broken], tmp_path)
    assert str(err.value) == f"{tmp_path / 'images/missing.png'} not found"


@mark.skipif(
    os.environ.get("VOLRIG_SLOW") != "1", reason="set VOLRIG_SLOW=1 to run"
)
def test_synthetic_round_trip(tmp_path):
    """Tests held-out PSNR and weight recovery of the desk preset fit."""
    spec = figure_spec()
    skel = spec.skeleton
    canonical = Pose.canonical(skel)
    truth = figure_model(spec, (24, 24, 24))
    poses = sample_poses(skel, 220, 0.6, seed=0)
    cams = sample_cameras(144, 2.25, 32, 32)
    handler = generate_dataset(
        truth,
        poses,
        cams,
        tmp_path / "data",
        holdout_poses=0.0909,
        test_radius=1.5,
        workers=4,
    )
    assert isinstance(handler, ManifestHandler)
    assert handler.summarize() == {"train": 200, "test": 20}
    train = load_frames(handler.query("train"), tmp_path / "data")
    test = load_frames(handler.query("test"), tmp_path / "data")

    grid = GridConfig()
    assert grid.canonical == (24, 24, 24) and grid.weights == (16, 16, 16)
    init = FitParams.initial(skel, canonical, grid)
    init_prior = gaussian_prior(skel, canonical, init.delta_w.box)
    init_psnr = evaluate(init.to_model(skel, canonical, init_prior), test).psnr

    cfg = FitConfig(
        iterations=5000, batch_size=2, lr=2e-2, eval_every=0, workers=2
    )
    res = fit(train, skel, canonical, grid, cfg, show_progress=True)

    # 20-iteration moving average of the first 200 losses
    smooth = np.convolve(res.losses[:200], np.ones(20) / 20, mode="valid")
    tol = 1e-3 * smooth[0]
    assert np.all(np.diff(smooth) <= tol)

    prior = gaussian_prior(skel, canonical, res.params.delta_w.box)
    model = res.params.to_model(skel, canonical, prior)
    fitted_psnr = evaluate(model, test).psnr
    assert fitted_psnr >= 22.0
    assert fitted_psnr >= init_psnr + 10.0

    box = truth.weights.box
    margin = float(box.voxel_size.min())
    region = interior_region(spec, canonical, box, margin)
    agreement = weight_agreement(model.weights, truth.weights, region)
    assert agreement >= 0.7
