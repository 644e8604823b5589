"""Procedural capsule figure and synthetic dataset generation.

The figure gives every bone a capsule around its segment; voxels inside a
capsule take that bone's color and a one-hot weight, so the ground truth of
both volumes is known exactly. Datasets render every pose once, from one
randomly chosen camera of its split.

Classes
-----------------------
SynthError
    Exception raised for errors in figure and dataset generation.
FigureSpec
    Capsule radius, color and opacity of every bone.

Functions
-----------------------
capsule_distances()
    Distance of points from every bone segment.
figure_box()
    Default grid box enclosing the figure.
make_figure()
    Canonical volume and one-hot weights of the figure.
figure_model()
    Character model of the figure.
interior_region()
    Voxels deep inside exactly one capsule.
sample_cameras()
    Cameras spread on a sphere, looking at the origin.
sample_poses()
    Random poses away from the canonical pose.
generate_dataset()
    Render a synthetic dataset with its manifest.
"""

# Copyright (c) 2023 Adriano Angelone
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# This file is part of volrig.
#
# This file may be used under the terms of the GNU General Public License
# version 3.0 as published by the Free Software Foundation and appearing in the
# file LICENSE included in the packaging of this file. Please review the
# following information to ensure the GNU General Public License version 3.0
# requirements will be met:
# http://www.gnu.org/copyleft/gpl.html.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from rich.progress import Progress

from modules.deform import CharacterModel
from modules.deform import save_model
from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.manifest import ManifestHandler
from modules.render import Camera
from modules.render import render_image
from modules.render import to_bytes
from modules.render import write_mask
from modules.render import write_png
from modules.schemas import FrameRecord
from modules.schemas import SkeletonConfig
from modules.volume import GridBox
from modules.volume import VoxelGrid


logger = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
MIN_POSE_DISTANCE = 1e-3


class SynthError(Exception):
    """Exception raised for errors in figure and dataset generation."""


@dataclass(frozen=True)
class FigureSpec:
    """Capsule radius, color and opacity of every bone.

    Attributes
    -----------------------
    skeleton : Skeleton
        Skeleton carrying the capsules.
    radius : np.ndarray
        (K,) capsule radii, world units.
    color : np.ndarray
        (K, 3) base colors in [0, 1].
    alpha : float
        Opacity inside the capsules. Default is 1.
    """

    skeleton: Skeleton
    radius: np.ndarray
    color: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        radius = np.asarray(self.radius, dtype=np.float64)
        color = np.asarray(self.color, dtype=np.float64)
        K = self.skeleton.K
        if radius.shape != (K,) or color.shape != (K, 3):
            raise SynthError(f"figure needs {K} radii and colors")
        if (radius <= 0).any():
            raise SynthError("capsule radii must be positive")
        if ((color < 0) | (color > 1)).any():
            raise SynthError("figure colors must lie in [0, 1]")
        object.__setattr__(self, "radius", radius)
        object.__setattr__(self, "color", color)

    @classmethod
    def from_config(cls, cfg: SkeletonConfig) -> "FigureSpec":
        """Figure of a skeleton config with a figure section.

        Raises
        -----------------------
        SynthError
            If the config has no figure section.
        """
        if cfg.figure is None:
            raise SynthError("skeleton config has no figure section")
        return cls(
            skeleton=Skeleton.from_config(cfg),
            radius=np.asarray(cfg.figure.radius),
            color=np.asarray(cfg.figure.color),
            alpha=cfg.figure.alpha,
        )


def capsule_distances(
    spec: FigureSpec, canonical: Pose, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Distance of points from every bone segment.

    Parameters
    -----------------------
    spec : FigureSpec
        Figure.
    canonical : Pose
        Pose placing the segments.
    x : np.ndarray
        (..., 3) points.

    Returns
    -----------------------
    tuple[np.ndarray, np.ndarray]
        (..., K) distances and (..., K) positions along each segment in
        [0, 1]; the degenerate root segment reports 0.5 + 0.5 dz / radius
        instead.
    """
    x = np.asarray(x, dtype=np.float64)
    start, end = spec.skeleton.bone_segments(canonical.joints)
    dist = []
    along = []
    for k in range(spec.skeleton.K):
        a, b = start[k], end[k]
        ab = b - a
        L2 = float(ab @ ab)
        if L2 < 1e-24:
            dist.append(np.linalg.norm(x - a, axis=-1))
            along.append(
                np.clip(0.5 + 0.5 * (x[..., 2] - a[2]) / spec.radius[k], 0, 1)
            )
            continue
        s = np.clip(((x - a) @ ab) / L2, 0.0, 1.0)
        dist.append(np.linalg.norm(x - (a + s[..., None] * ab), axis=-1))
        along.append(s)
    return np.stack(dist, axis=-1), np.stack(along, axis=-1)


def figure_box(
    spec: FigureSpec,
    canonical: Pose,
    dims: tuple[int, int, int],
    pad: float = 0.1,
) -> GridBox:
    """Default grid box enclosing the figure.

    The joint bounding box grown by the largest radius, then by `pad` times
    its longest side on every face.
    """
    r = float(spec.radius.max())
    lo = canonical.joints.min(axis=0) - r
    hi = canonical.joints.max(axis=0) + r
    margin = pad * float((hi - lo).max())
    return GridBox(lo=lo - margin, hi=hi + margin, dims=dims)


def make_figure(
    spec: FigureSpec,
    dims: tuple[int, int, int],
    canonical: Pose | None = None,
    box: GridBox | None = None,
) -> tuple[VoxelGrid, VoxelGrid]:
    """Canonical volume and one-hot weights of the figure.

    A node inside one or more capsules belongs to the nearest bone, ties going
    to the lower index; it takes the bone color tinted from 60% at the start
    of the segment to 100% at its end, opacity `spec.alpha` and the one-hot
    weight of the bone. Other nodes are empty and background.

    Parameters
    -----------------------
    spec : FigureSpec
        Figure.
    dims : tuple[int, int, int]
        Grid node counts (nx, ny, nz), shared by both volumes.
    canonical : Pose | None
        Pose placing the capsules. Default is `None` (the T-pose).
    box : GridBox | None
        Grid box. Default is `None` (`figure_box()`).

    Returns
    -----------------------
    tuple[VoxelGrid, VoxelGrid]
        RGBα canonical volume and K+1 channel weights.

    Raises
    -----------------------
    SynthError
        If a capsule does not fit in the box.
    """
    skel = spec.skeleton
    canonical = Pose.canonical(skel) if canonical is None else canonical
    canonical.check(skel)
    if box is None:
        box = figure_box(spec, canonical, dims)
    else:
        box = box.with_dims(dims)

    start, end = skel.bone_segments(canonical.joints)
    for k in range(skel.K):
        ends = np.stack([start[k], end[k]])
        if (ends - spec.radius[k] < box.lo).any() or (
            ends + spec.radius[k] > box.hi
        ).any():
            raise SynthError(f"bone {k} capsule leaves the grid box")

    x = box.centers().numpy()
    dist, along = capsule_distances(spec, canonical, x)
    inside = dist <= spec.radius
    occupied = inside.any(axis=-1)
    # argmin keeps the first of equal distances
    owner = np.argmin(np.where(inside, dist, np.inf), axis=-1)

    tint = 0.6 + 0.4 * np.take_along_axis(along, owner[..., None], axis=-1)
    rgb = spec.color[owner] * tint
    alpha = np.full(owner.shape + (1,), spec.alpha)
    rgba = np.concatenate([rgb, alpha], axis=-1)
    rgba = np.where(occupied[..., None], rgba, 0.0)

    label = np.where(occupied, owner, skel.K)
    weights = np.eye(skel.K + 1)[label]
    return (
        VoxelGrid(box=box, values=torch.from_numpy(rgba)),
        VoxelGrid(box=box, values=torch.from_numpy(weights), background=True),
    )


def figure_model(
    spec: FigureSpec, dims: tuple[int, int, int], canonical: Pose | None = None
) -> CharacterModel:
    """Character model of the figure on a `dims` grid."""
    if canonical is None:
        canonical = Pose.canonical(spec.skeleton)
    rgba, weights = make_figure(spec, dims, canonical)
    return CharacterModel(
        skeleton=spec.skeleton,
        canonical_pose=canonical,
        canonical=rgba,
        weights=weights,
    )


def interior_region(
    spec: FigureSpec, canonical: Pose, box: GridBox, margin: float
) -> torch.Tensor:
    """Voxels deep inside exactly one capsule.

    Returns
    -----------------------
    torch.Tensor
        Boolean (nz, ny, nx) selection of nodes deeper than `margin` inside a
        capsule and farther than `margin` outside every other one.
    """
    dist, _ = capsule_distances(spec, canonical, box.centers().numpy())
    depth = np.sort(spec.radius - dist, axis=-1)
    deep = depth[..., -1] > margin
    if spec.skeleton.K > 1:
        deep &= depth[..., -2] < -margin
    return torch.from_numpy(deep)


def sample_cameras(
    n: int,
    radius: float,
    width: int,
    height: int,
    focal_scale: float = 0.8,
) -> list[Camera]:
    """Cameras spread on a sphere, looking at the origin.

    Centers follow a Fibonacci lattice, z_i = 1 - (2i + 1) / n with the
    azimuth advancing by the golden angle (half a turn for n = 2, so the two
    centers are antipodal). The up vector is +z.

    Parameters
    -----------------------
    n : int
        Number of cameras.
    radius : float
        Sphere radius.
    width, height : int
        Image size.
    focal_scale : float
        Focal length over image width. Default is 0.8.

    Returns
    -----------------------
    list[Camera]
        The cameras.
    """
    if n < 1 or radius <= 0:
        raise SynthError("cameras need n >= 1 and a positive radius")
    dphi = math.pi if n == 2 else GOLDEN_ANGLE
    cams = []
    for i in range(n):
        z = 1.0 - (2 * i + 1) / n
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = i * dphi
        eye = radius * np.array([r * math.cos(phi), r * math.sin(phi), z])
        cams.append(
            Camera.look_at(
                eye, np.zeros(3), width, height, focal_scale=focal_scale
            )
        )
    return cams


def sample_poses(
    skel: Skeleton,
    n: int,
    max_angle: float,
    seed: int,
    joints: np.ndarray | None = None,
) -> list[Pose]:
    """Random poses away from the canonical pose.

    Every axis-angle component is uniform in [-max_angle, max_angle]; poses
    within 1e-3 of the zero rotation are drawn again.

    Parameters
    -----------------------
    skel : Skeleton
        Skeleton.
    n : int
        Number of poses.
    max_angle : float
        Component bound, in (0, π).
    seed : int
        Seed of the generator.
    joints : np.ndarray | None
        Rest joints of every pose. Default is `None` (skeleton rest joints).

    Returns
    -----------------------
    list[Pose]
        The poses.
    """
    if not 0 < max_angle < math.pi:
        raise SynthError(f"max angle {max_angle} not in (0, π)")
    if max_angle * math.sqrt(3 * skel.K) <= MIN_POSE_DISTANCE:
        raise SynthError(
            f"max angle {max_angle} cannot leave the canonical pose"
        )
    joints = skel.rest_joints() if joints is None else joints
    rng = np.random.default_rng(seed)
    poses = []
    while len(poses) < n:
        angles = rng.uniform(-max_angle, max_angle, size=(skel.K, 3))
        if np.linalg.norm(angles) < MIN_POSE_DISTANCE:
            continue
        poses.append(Pose(joints=joints, angles=angles))
    return poses


def _split(
    n: int, fraction: float, rng: np.random.Generator, minimum: int = 0
) -> np.ndarray:
    """Sorted held-out indices, keeping at least one index in training."""
    k = min(max(int(round(fraction * n)), minimum), n - 1)
    return np.sort(rng.permutation(n)[:k])


def _move(cam: Camera, radius: float) -> Camera:
    c = cam.center
    return Camera.look_at(
        c / np.linalg.norm(c) * radius,
        np.zeros(3),
        cam.width,
        cam.height,
        focal_scale=cam.fx / cam.width,
    )


def generate_dataset(
    model: CharacterModel,
    poses: list[Pose],
    cameras: list[Camera],
    out_dir: str | Path,
    holdout_poses: float = 0.1,
    holdout_cameras: float = 0.1,
    seed: int = 0,
    test_radius: float | None = None,
    workers: int = 1,
    show_progress: bool = False,
) -> ManifestHandler:
    """Render a synthetic dataset with its manifest.

    Poses and cameras are split by the holdout fractions. Every training
    pose is rendered once by a random training camera and every held-out pose
    once by a random held-out camera (moved to `test_radius` when given).
    Images are written as RGBA PNGs premultiplied over black, masks as the
    support of the stored alpha, the manifest as manifest.jsonl and the
    figure itself as the explicit checkpoint figure/.

    Parameters
    -----------------------
    model : CharacterModel
        Ground-truth model.
    poses : list[Pose]
        Poses to render.
    cameras : list[Camera]
        Cameras to draw from.
    out_dir : str | Path
        Dataset directory, created if missing.
    holdout_poses, holdout_cameras : float
        Held-out fractions. Defaults are 0.1.
    seed : int
        Seed of the splits and camera choices. Default is 0.
    test_radius : float | None
        Sphere radius of held-out cameras. Default is `None` (unchanged).
    workers : int
        Threads rendering frames. Default is 1.
    show_progress : bool
        Show a progress bar. Default is `False`.

    Returns
    -----------------------
    ManifestHandler
        The written manifest.

    Raises
    -----------------------
    SynthError
        - If there are no poses or cameras.
        - If held-out poses need a held-out camera and there is only one
          camera.
    """
    if not poses or not cameras:
        raise SynthError("dataset needs at least one pose and one camera")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    test_poses = set(_split(len(poses), holdout_poses, rng).tolist())
    # held-out poses need at least one held-out camera
    need = int(holdout_cameras > 0 and bool(test_poses))
    if need and len(cameras) < 2:
        raise SynthError("camera holdout needs at least two cameras")
    held = _split(len(cameras), holdout_cameras, rng, minimum=need).tolist()
    train_cams = [c for i, c in enumerate(cameras) if i not in held]
    test_cams = [cameras[i] for i in held] or train_cams
    if test_radius is not None and held:
        test_cams = [_move(c, test_radius) for c in test_cams]

    jobs = []
    for i, pose in enumerate(poses):
        split = "test" if i in test_poses else "train"
        pool = test_cams if split == "test" else train_cams
        jobs.append((i, pose, pool[int(rng.integers(len(pool)))], split))

    def render(job) -> FrameRecord:
        i, pose, cam, split = job
        img = render_image(model.pose(pose), cam)
        image = f"images/{i:05d}.png"
        mask = f"masks/{i:05d}.png"
        write_png(out_dir / image, img.rgb, img.alpha)
        write_mask(out_dir / mask, to_bytes(img.alpha.numpy()) > 0)
        logger.debug("frame %d rendered (%s)", i, split)
        return FrameRecord(
            frame=i,
            image=image,
            mask=mask,
            pose=pose.to_record(),
            camera=cam.to_record(),
            split=split,
        )

    with Progress(transient=True, disable=not show_progress) as bar:
        task = bar.add_task("rendering", total=len(jobs))
        records = []
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                for rec in ex.map(render, jobs):
                    records.append(rec)
                    bar.advance(task)
        else:
            for job in jobs:
                records.append(render(job))
                bar.advance(task)

    handler = ManifestHandler(records)
    handler.save(out_dir / "manifest.jsonl")
    save_model(model, out_dir / "figure")
    counts = handler.summarize()
    logger.info(
        "dataset written to %s: %d train, %d test frames",
        out_dir,
        counts["train"],
        counts["test"],
    )
    return handler
