# pylint: disable=redefined-outer-name
# required to avoid trouble with fixture declaration

"""Test module for voxel grids."""

import math
import struct

import numpy as np
import torch

from pytest import raises

from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.volume import GridBox
from modules.volume import VolumeError
from modules.volume import VolumeFormatError
from modules.volume import VoxelGrid
from modules.volume import WeightLogits
from modules.volume import activate_canonical
from modules.volume import bone_gaussians
from modules.volume import bounding_box
from modules.volume import gaussian_prior
from modules.volume import read_volume
from modules.volume import trilinear_sample
from modules.volume import weights_from_logits
from modules.volume import write_volume

from tests.common import random_grid
from tests.common import unit_box


def z_bone() -> Skeleton:
    """Root at (0, 0, -0.5) plus a unit bone along z centered at 0."""
    return Skeleton(
        parents=(-1, 0),
        offsets=np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 1.0]]),
        sigma=np.array([0.1, 0.1]),
    )


def corner_oracle(grid: VoxelGrid, x: np.ndarray) -> np.ndarray:
    """Direct 8-corner weighted sum at an interior point."""
    V = grid.values.numpy()
    u = (x - grid.box.lo) / (grid.box.hi - grid.box.lo)
    u = u * (np.array(grid.box.dims) - 1)
    i = np.floor(u).astype(int)
    f = u - i
    out = np.zeros(grid.C)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[0] if dx else 1 - f[0])
                    * (f[1] if dy else 1 - f[1])
                    * (f[2] if dz else 1 - f[2])
                )
                out += w * V[i[2] + dz, i[1] + dy, i[0] + dx]
    return out


def test_grid_box():
    """Tests box validation and node geometry."""
    box = GridBox(lo=[-1.0, -1.0, -1.0], hi=[1.0, 3.0, 1.0], dims=(5, 3, 2))
    assert box.shape == (2, 3, 5)
    assert np.allclose(box.voxel_size, [0.5, 2.0, 2.0])
    centers = box.centers()
    assert centers.shape == (2, 3, 5, 3)
    assert torch.allclose(
        centers[1, 2, 4], torch.tensor([1.0, 3.0, 1.0], dtype=torch.float64)
    )

    with raises(VolumeError) as err:
        GridBox(lo=[0.0, 0.0, 0.0], hi=[1.0, 0.0, 1.0], dims=(2, 2, 2))
    assert str(err.value) == "box max corner must exceed min corner"

    with raises(VolumeError) as err:
        GridBox(lo=[0.0, 0.0, 0.0], hi=[1.0, 1.0, 1.0], dims=(2, 1, 2))
    assert str(err.value) == "grid dims (2, 1, 2) must be at least 2 per axis"

    with raises(VolumeError) as err:
        VoxelGrid(box=box, values=torch.zeros(3, 3, 5, 1))
    assert str(err.value) == "values (3, 3, 5, 1) do not match grid (2, 3, 5)"


def test_trilinear_sample():
    """Tests sampling at nodes, midpoints and random interior points."""
    rng = np.random.default_rng(1)
    grid = random_grid(unit_box((5, 4, 6)), 3, rng)
    V = grid.values

    node = grid.box.centers()[2, 1, 3]
    assert torch.allclose(trilinear_sample(grid, node), V[2, 1, 3], atol=1e-14)

    mid = 0.5 * (grid.box.centers()[2, 1, 3] + grid.box.centers()[2, 1, 4])
    expected = 0.5 * (V[2, 1, 3] + V[2, 1, 4])
    assert torch.allclose(trilinear_sample(grid, mid), expected, atol=1e-14)

    # max corner is inside and exact
    assert torch.equal(
        trilinear_sample(grid, torch.as_tensor(grid.box.hi)), V[-1, -1, -1]
    )

    pts = rng.uniform(grid.box.lo, grid.box.hi, size=(50, 3))
    got = trilinear_sample(grid, torch.as_tensor(pts)).numpy()
    for p, g in zip(pts, got):
        assert np.abs(g - corner_oracle(grid, p)).max() < 1e-12


def test_trilinear_outside():
    """Tests out-of-grid values for color and weight grids."""
    rng = np.random.default_rng(2)
    box = unit_box((3, 3, 3))
    far = torch.tensor(
        [[2.0, 0.0, 0.0], [0.0, -1.5, 0.0]], dtype=torch.float64
    )

    color = random_grid(box, 4, rng)
    assert torch.equal(
        trilinear_sample(color, far), torch.zeros(2, 4, dtype=torch.float64)
    )

    weights = random_grid(box, 3, rng, background=True)
    expected = torch.tensor([[0.0, 0.0, 1.0]] * 2, dtype=torch.float64)
    assert torch.equal(trilinear_sample(weights, far), expected)


def test_trilinear_continuity():
    """Tests continuity of samples across voxel boundaries."""
    rng = np.random.default_rng(3)
    grid = random_grid(unit_box((6, 6, 6)), 2, rng)
    spread = float(grid.values.max() - grid.values.min())
    delta = 1e-7 * grid.box.voxel_size
    for node in grid.box.centers()[1:-1, 1:-1, 1:-1].reshape(-1, 3)[::7]:
        a = trilinear_sample(grid, node)
        b = trilinear_sample(grid, node + torch.as_tensor(delta))
        c = trilinear_sample(grid, node - torch.as_tensor(delta))
        assert (a - b).abs().max() < 1e-5 * spread
        assert (a - c).abs().max() < 1e-5 * spread


def test_bone_gaussians():
    """Tests the unnormalized Gaussian against a hand evaluation."""
    skel = z_bone()
    pose = Pose.canonical(skel)
    x = torch.tensor([[0.1, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    g = bone_gaussians(skel, pose, x)
    assert abs(float(g[0, 1]) - math.exp(-0.5)) < 1e-12
    assert float(g[1, 1]) == 1.0
    # zero-length root bone is isotropic
    root = torch.tensor([[0.0, 0.1, -0.5]], dtype=torch.float64)
    value = float(bone_gaussians(skel, pose, root)[0, 0])
    assert abs(value - math.exp(-0.5)) < 1e-12


def test_gaussian_prior():
    """Tests the normalized prior peak, tail and normalization."""
    skel = z_bone()
    pose = Pose.canonical(skel)

    prior = gaussian_prior(skel, pose, unit_box((2, 2, 2)), dims=(5, 5, 5))
    assert prior.box.dims == (5, 5, 5)
    assert prior.C == 3
    assert torch.allclose(
        prior.values.sum(dim=-1),
        torch.ones(5, 5, 5, dtype=torch.float64),
        atol=1e-12,
    )
    bone = prior.values[..., 1]
    assert float(bone[2, 2, 2]) == float(bone.max())
    assert (prior.values > 0).all()

    wide = GridBox(lo=[-3.0] * 3, hi=[3.0] * 3, dims=(7, 7, 7))
    far = gaussian_prior(skel, pose, wide)
    assert float(far.values[-1, -1, -1, -1]) >= 1 - 1e-6


def test_bounding_box():
    """Tests the default box dilation."""
    skel = z_bone()
    box = bounding_box(skel, Pose.canonical(skel), (4, 4, 4))
    assert np.allclose(box.lo, [-0.3, -0.3, -0.8])
    assert np.allclose(box.hi, [0.3, 0.3, 0.8])


def test_weights_from_logits():
    """Tests softmax weights on zero offsets, symmetry and dominance."""
    skel = z_bone()
    pose = Pose.canonical(skel)
    prior = gaussian_prior(skel, pose, unit_box((4, 4, 4)))

    W = weights_from_logits(
        WeightLogits(
            grid=prior.replace(torch.zeros_like(prior.values)), prior=prior
        )
    )
    assert torch.allclose(W.values, prior.values, rtol=1e-12, atol=1e-15)
    assert W.background

    box = unit_box((2, 2, 2))
    uniform = VoxelGrid(
        box=box, values=torch.full((2, 2, 2, 5), 0.2), background=True
    )
    equal = VoxelGrid(box=box, values=torch.full((2, 2, 2, 5), 3.0))
    W = weights_from_logits(WeightLogits(grid=equal, prior=uniform))
    assert torch.allclose(
        W.values,
        torch.full((2, 2, 2, 5), 0.2, dtype=torch.float64),
        atol=1e-15,
    )

    big = torch.zeros(2, 2, 2, 5)
    big[..., 2] = 1000.0
    W = weights_from_logits(
        WeightLogits(grid=equal.replace(big), prior=uniform)
    )
    assert torch.isfinite(W.values).all()
    assert (W.values[..., 2] >= 1 - 1e-6).all()

    rng = np.random.default_rng(4)
    rand = torch.as_tensor(rng.uniform(0.1, 1.0, size=(4, 4, 4, 3)))
    rand = VoxelGrid(
        box=prior.box,
        values=rand / rand.sum(dim=-1, keepdim=True),
        background=True,
    )
    noisy = random_grid(prior.box, 3, rng, scale=5.0)
    W = weights_from_logits(WeightLogits(grid=noisy, prior=rand))
    sums = W.values.sum(dim=-1)
    assert (sums - 1).abs().max() < 1e-6
    assert ((W.values > 0) & (W.values < 1)).all()

    with raises(VolumeError) as err:
        WeightLogits(grid=equal, prior=prior)
    assert str(err.value) == "weight offsets and prior differ in shape"


def test_activate_canonical():
    """Tests softplus activation and the α clamp."""
    box = unit_box((2, 2, 2))
    raw = torch.zeros(2, 2, 2, 4, dtype=torch.float64)
    raw[0, 0, 0] = torch.tensor([-100.0, 0.0, 3.0, 50.0])
    raw[1, 1, 1, 3] = -100.0
    out = activate_canonical(VoxelGrid(box=box, values=raw)).values

    assert abs(float(out[0, 0, 1, 0]) - math.log(2.0)) < 1e-12
    assert float(out[0, 0, 0, 3]) == 1.0
    assert 0.0 <= float(out[0, 0, 0, 0]) < 1e-40
    assert float(out[1, 1, 1, 3]) >= 0.0
    assert (out >= 0).all() and (out[..., 3] <= 1).all()

    with raises(VolumeError) as err:
        activate_canonical(VoxelGrid(box=box, values=raw[..., :3]))
    assert str(err.value) == "canonical grid needs 4 channels, got 3"


def test_volume_round_trip(tmp_path):
    """Tests that a written grid reads back bitwise-equal."""
    rng = np.random.default_rng(5)
    values = rng.normal(size=(4, 4, 4, 2)).astype(np.float32)
    values = values.astype(np.float64)
    box = GridBox(lo=[-0.25, -1.0, 0.5], hi=[0.75, 1.0, 2.0], dims=(4, 4, 4))
    grid = VoxelGrid(box=box, values=torch.from_numpy(values))

    path = tmp_path / "grid.vol"
    write_volume(grid, path)
    back = read_volume(path, background=True)
    assert torch.equal(back.values, grid.values)
    assert np.array_equal(back.box.lo, box.lo)
    assert np.array_equal(back.box.hi, box.hi)
    assert back.box.dims == (4, 4, 4)
    assert back.background


def test_volume_format_errors(tmp_path):
    """Tests each malformed-file error."""
    grid = VoxelGrid(box=unit_box((2, 2, 2)), values=torch.ones(2, 2, 2, 3))
    good = tmp_path / "good.vol"
    write_volume(grid, good)
    data = good.read_bytes()

    bad = tmp_path / "bad.vol"
    bad.write_bytes(b"VOLX" + data[4:])
    with raises(VolumeFormatError) as err:
        read_volume(bad)
    assert str(err.value) == f"{bad} :: bad magic"

    bad.write_bytes(data[:-4])
    with raises(VolumeFormatError) as err:
        read_volume(bad)
    assert str(err.value) == f"{bad} :: truncated payload"

    header = struct.pack(
        "<4sI4I6d",
        b"VOLR",
        1,
        2000,
        2000,
        2000,
        4,
        *([0.0] * 3),
        *([1.0] * 3),
    )
    bad.write_bytes(header)
    with raises(VolumeFormatError) as err:
        read_volume(bad)
    assert str(err.value) == f"{bad} :: dimension overflow"

    bad.write_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with raises(VolumeFormatError) as err:
        read_volume(bad)
    assert str(err.value) == f"{bad} :: unsupported version 7"

    missing = tmp_path / "missing.vol"
    with raises(FileNotFoundError) as err:
        read_volume(missing)
    assert str(err.value) == f"{missing} not found"
