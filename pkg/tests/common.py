# pylint: disable=redefined-outer-name
# required to avoid trouble with fixture declaration

"""Common testing utilities."""


from pathlib import Path

import numpy as np
import torch

from modules.kinematics import MotionBasisSet
from modules.kinematics import Pose
from modules.kinematics import RigidTransform
from modules.kinematics import Skeleton
from modules.kinematics import read_skeleton_config
from modules.synthdata import FigureSpec
from modules.volume import GridBox
from modules.volume import VoxelGrid


RESOURCES = Path(__file__).parent.parent / "resources"


def unit_box(dims: tuple[int, int, int], half: float = 1.0) -> GridBox:
    """Return the box [-half, half]³ with the given node counts.

    Parameters
    -----------------------
    dims : tuple[int, int, int]
        Node counts (nx, ny, nz).
    half : float
        Half side of the box. Default is 1.

    Returns
    -----------------------
    GridBox
        The box.
    """
    return GridBox(lo=[-half] * 3, hi=[half] * 3, dims=dims)


def chain_skeleton(K: int, length: float = 0.3) -> Skeleton:
    """Return a straight chain along z, root at the origin.

    Parameters
    -----------------------
    K : int
        Number of bones.
    length : float
        Length of every non-root bone. Default is 0.3.

    Returns
    -----------------------
    Skeleton
        The chain, radial sigmas 0.1.
    """
    offsets = np.zeros((K, 3))
    offsets[1:, 2] = length
    return Skeleton(
        parents=tuple(range(-1, K - 1)), offsets=offsets, sigma=np.full(K, 0.1)
    )


def random_pose(
    skel: Skeleton, rng: np.random.Generator, scale: float, shift: float = 0.0
) -> Pose:
    """Return a pose with uniform random angles and a random root shift.

    Parameters
    -----------------------
    skel : Skeleton
        Skeleton of the pose.
    rng : np.random.Generator
        Random generator.
    scale : float
        Bound of every angle component.
    shift : float
        Bound of every component of the global translation. Default is 0.

    Returns
    -----------------------
    Pose
        The pose.
    """
    angles = rng.uniform(-scale, scale, size=(skel.K, 3))
    d = rng.uniform(-shift, shift, size=3)
    return Pose(joints=skel.rest_joints() + d, angles=angles)


def random_grid(
    box: GridBox,
    C: int,
    rng: np.random.Generator,
    background: bool = False,
    scale: float = 1.0,
) -> VoxelGrid:
    """Return a grid of normal random values.

    Parameters
    -----------------------
    box : GridBox
        Box of the grid.
    C : int
        Number of channels.
    rng : np.random.Generator
        Random generator.
    background : bool
        Out-of-grid convention. Default is `False`.
    scale : float
        Standard deviation of the values. Default is 1.

    Returns
    -----------------------
    VoxelGrid
        The grid.
    """
    values = rng.normal(scale=scale, size=(*box.shape, C))
    return VoxelGrid(
        box=box, values=torch.from_numpy(values), background=background
    )


def constant_grid(
    box: GridBox, values: list[float], background: bool = False
) -> VoxelGrid:
    """Return a grid holding the same channel values at every node."""
    v = torch.tensor(values, dtype=torch.float64)
    return VoxelGrid(
        box=box,
        values=v.expand(*box.shape, v.shape[0]).clone(),
        background=background,
    )


def translation_bases(shifts: list[list[float]]) -> MotionBasisSet:
    """Return pure-translation bases, one per shift."""
    return MotionBasisSet(
        bases=tuple(
            RigidTransform(A=np.eye(3), t=np.asarray(s, dtype=np.float64))
            for s in shifts
        )
    )


def figure_spec() -> FigureSpec:
    """Capsule figure of the four-bone example skeleton."""
    return FigureSpec.from_config(
        read_skeleton_config(RESOURCES / "skeleton-figure4.yaml")
    )
