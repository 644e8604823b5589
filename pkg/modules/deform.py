"""Volumetric skinning warp, mask volume and posed target volume.

A target-pose point x is carried to canonical space by every bone basis
B_i; the weight of bone i is sampled from channel i of W at B_i(x), the
normalized weights blend the warped points, and the summed bone weights mask
the canonical sample.

Classes
-----------------------
DeformError
    Exception raised for errors in posed volumes.
PosedVolumeView
    Canonical volume and weights seen through a pose.
CharacterModel
    Skeleton, canonical pose, canonical volume and weights.

Functions
-----------------------
normalized_weights()
    Normalized per-bone weights at target points.
warp_point()
    Canonical-space image of target points.
mask_at()
    Mask volume at target points.
sample_target()
    Posed RGBα at target points.
save_model()
    Write a model as an explicit checkpoint directory.
load_model()
    Read a model from a checkpoint directory of either kind.
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
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import yaml
from pydantic import ValidationError

from modules.kinematics import MotionBasisSet
from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.kinematics import motion_bases
from modules.kinematics import read_skeleton_config
from modules.schemas import ModelConfig
from modules.volume import VoxelGrid
from modules.volume import WeightLogits
from modules.volume import activate_canonical
from modules.volume import gaussian_prior
from modules.volume import read_volume
from modules.volume import trilinear_sample
from modules.volume import weights_from_logits
from modules.volume import write_volume


logger = logging.getLogger(__name__)

SUPPORT_FLOOR = 1e-8


class DeformError(Exception):
    """Exception raised for errors in posed volumes."""


class Evaluation(NamedTuple):
    """Intermediate quantities of a posed-volume evaluation."""

    samples: torch.Tensor  # (N, K) per-bone weight samples
    weights: torch.Tensor  # (N, K) normalized weights
    warped: torch.Tensor  # (N, 3) canonical points
    mapped: torch.Tensor  # (N,) support above the floor
    mask: torch.Tensor  # (N,)
    rgba: torch.Tensor  # (N, 4)


@dataclass(frozen=True)
class PosedVolumeView:
    """Canonical volume and weights seen through a pose.

    Attributes
    -----------------------
    canonical : VoxelGrid
        Activated RGBα canonical volume.
    weights : VoxelGrid
        K+1 channel motion weights, background last.
    bases : MotionBasisSet
        Target-to-canonical transform of every bone.
    """

    canonical: VoxelGrid
    weights: VoxelGrid
    bases: MotionBasisSet

    def __post_init__(self):
        if self.weights.C != len(self.bases) + 1:
            raise DeformError(
                f"weights have {self.weights.C} channels, "
                f"expected {len(self.bases) + 1}"
            )
        if self.canonical.C != 4:
            raise DeformError("canonical volume must be RGBα")

    @cached_property
    def stacked(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(K, 3, 3) rotations and (K, 3) translations as tensors."""
        A, t = self.bases.stacked()
        return torch.from_numpy(A), torch.from_numpy(t)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Target-space box enclosing the support of the mask volume.

        The weight box mapped through every inverse basis, as an
        axis-aligned (lo, hi) pair.
        """
        corners = self.weights.box.corners()
        pts = np.concatenate([b.inverse().apply(corners) for b in self.bases])
        return pts.min(axis=0), pts.max(axis=0)

    def evaluate(self, x: torch.Tensor) -> Evaluation:
        """Evaluate the posed volume at (N, 3) target points."""
        x = torch.as_tensor(x, dtype=torch.float64).reshape(-1, 3)
        A, t = self.stacked
        K = A.shape[0]

        # (N, K, 3) warped point of every bone, elementwise so that a point
        # does not depend on the batch it is evaluated in
        y = (A[None] * x[:, None, None, :]).sum(dim=-1) + t
        # channel k of the sample taken at the point warped by bone k
        diag = torch.arange(K)
        s = trilinear_sample(self.weights, y)[:, diag, diag]

        total = s.sum(dim=-1)
        mapped = total >= SUPPORT_FLOOR
        safe = torch.where(mapped, total, torch.ones_like(total))
        w = torch.where(
            mapped[:, None], s / safe[:, None], torch.zeros_like(s)
        )

        warped = (w[..., None] * y).sum(dim=1)
        mask = total.clamp(0.0, 1.0)
        color = trilinear_sample(self.canonical, warped)
        rgba = torch.where(
            mapped[:, None], mask[:, None] * color, torch.zeros_like(color)
        )
        return Evaluation(s, w, warped, mapped, mask, rgba)


def _points(x) -> tuple[torch.Tensor, tuple[int, ...]]:
    x = torch.as_tensor(x, dtype=torch.float64)
    return x.reshape(-1, 3), x.shape[:-1]


def normalized_weights(view: PosedVolumeView, x: torch.Tensor) -> torch.Tensor:
    """Normalized per-bone weights at target points.

    Parameters
    -----------------------
    view : PosedVolumeView
        Posed volume.
    x : torch.Tensor
        (..., 3) target-space points.

    Returns
    -----------------------
    torch.Tensor
        (..., K) weights s_i / Σ_j s_j with s_i = w_i(B_i(x)); all zeros where
        the support is below 1e-8.
    """
    pts, lead = _points(x)
    ev = view.evaluate(pts)
    return ev.weights.reshape(*lead, -1)


def warp_point(
    view: PosedVolumeView, x: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Canonical-space image of target points.

    Parameters
    -----------------------
    view : PosedVolumeView
        Posed volume.
    x : torch.Tensor
        (..., 3) target-space points.

    Returns
    -----------------------
    tuple[torch.Tensor, torch.Tensor]
        (..., 3) warped points Σ_i ŵ_i B_i(x) and the (...) boolean `mapped`
        flag; unmapped points have no canonical image and sample as empty.
    """
    pts, lead = _points(x)
    ev = view.evaluate(pts)
    return ev.warped.reshape(*lead, 3), ev.mapped.reshape(lead)


def mask_at(view: PosedVolumeView, x: torch.Tensor) -> torch.Tensor:
    """Mask volume at target points.

    Returns
    -----------------------
    torch.Tensor
        (...) values clamp(Σ_i w_i(B_i(x)), 0, 1), background excluded.
    """
    pts, lead = _points(x)
    return view.evaluate(pts).mask.reshape(lead)


def sample_target(view: PosedVolumeView, x: torch.Tensor) -> torch.Tensor:
    """Posed RGBα at target points.

    Returns
    -----------------------
    torch.Tensor
        (..., 4) values M(x) · V^c(T(x)), zero where the warp is unmapped.
    """
    pts, lead = _points(x)
    return view.evaluate(pts).rgba.reshape(*lead, 4)


@dataclass(frozen=True)
class CharacterModel:
    """Skeleton, canonical pose, canonical volume and weights.

    Attributes
    -----------------------
    skeleton : Skeleton
        Kinematic tree.
    canonical_pose : Pose
        Pose in which the volumes are defined.
    canonical : VoxelGrid
        Activated RGBα canonical volume.
    weights : VoxelGrid
        K+1 channel motion weights.

    Methods
    -----------------------
    pose()
        Posed view for a target pose.
    from_logits()
        Model built from raw canonical values and weight offsets.
    """

    skeleton: Skeleton
    canonical_pose: Pose
    canonical: VoxelGrid
    weights: VoxelGrid

    def pose(self, target: Pose) -> PosedVolumeView:
        """Posed view for a target pose.

        Raises
        -----------------------
        KinematicsError
            If the pose does not fit the skeleton.
        """
        bases = motion_bases(self.skeleton, self.canonical_pose, target)
        return PosedVolumeView(
            canonical=self.canonical, weights=self.weights, bases=bases
        )

    @classmethod
    def from_logits(
        cls,
        skeleton: Skeleton,
        canonical_pose: Pose,
        raw_canonical: VoxelGrid,
        delta_w: VoxelGrid,
        prior: VoxelGrid,
    ) -> "CharacterModel":
        """Model built from raw canonical values and weight offsets.

        Parameters
        -----------------------
        skeleton : Skeleton
            Kinematic tree.
        canonical_pose : Pose
            Canonical pose.
        raw_canonical : VoxelGrid
            Pre-softplus RGBα values.
        delta_w : VoxelGrid
            Weight offsets ΔW.
        prior : VoxelGrid
            Gaussian prior W_G on the weight grid.

        Returns
        -----------------------
        CharacterModel
            Model with activated volumes.
        """
        return cls(
            skeleton=skeleton,
            canonical_pose=canonical_pose,
            canonical=activate_canonical(raw_canonical),
            weights=weights_from_logits(
                WeightLogits(grid=delta_w, prior=prior)
            ),
        )


def write_header(
    out_dir: str | Path, kind: str, skeleton: Skeleton, canonical_pose: Pose
):
    """Write skeleton.yaml and model.yaml of a checkpoint directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "skeleton.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(
            skeleton.to_config().model_dump(mode="json", exclude_none=True),
            f,
            sort_keys=False,
        )
    header = ModelConfig(kind=kind, canonical=canonical_pose.to_record())
    with open(out_dir / "model.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(header.model_dump(mode="json"), f, sort_keys=False)


def save_model(model: CharacterModel, out_dir: str | Path):
    """Write a model as an explicit checkpoint directory.

    Parameters
    -----------------------
    model : CharacterModel
        Model to write.
    out_dir : str | Path
        Checkpoint directory, created if missing.
    """
    out_dir = Path(out_dir)
    write_header(out_dir, "explicit", model.skeleton, model.canonical_pose)
    write_volume(model.canonical, out_dir / "canonical.vol")
    write_volume(model.weights, out_dir / "weights.vol")
    logger.info("model written to %s", out_dir)


def load_model(ckpt_dir: str | Path) -> CharacterModel:
    """Read a model from a checkpoint directory of either kind.

    Fitted checkpoints are activated on load, with the weight prior rebuilt
    from the skeleton on the stored weight grid.

    Parameters
    -----------------------
    ckpt_dir : str | Path
        Checkpoint directory.

    Returns
    -----------------------
    CharacterModel
        The model.

    Raises
    -----------------------
    FileNotFoundError
        If a checkpoint file is missing.
    DeformError
        If model.yaml is malformed.
    """
    ckpt_dir = Path(ckpt_dir)
    skeleton = Skeleton.from_config(
        read_skeleton_config(ckpt_dir / "skeleton.yaml")
    )

    path = ckpt_dir / "model.yaml"
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = ModelConfig.model_validate(yaml.safe_load(f))
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{path} not found") from err
    except (yaml.YAMLError, ValidationError) as err:
        raise DeformError(f"{path} :: invalid model header") from err

    canonical_pose = Pose.from_record(header.canonical)
    canonical_pose.check(skeleton)

    if header.kind == "explicit":
        return CharacterModel(
            skeleton=skeleton,
            canonical_pose=canonical_pose,
            canonical=read_volume(ckpt_dir / "canonical.vol"),
            weights=read_volume(ckpt_dir / "weights.vol", background=True),
        )

    raw = read_volume(ckpt_dir / "raw_canonical.vol")
    delta = read_volume(ckpt_dir / "delta_w.vol", background=True)
    prior = gaussian_prior(skeleton, canonical_pose, delta.box)
    return CharacterModel.from_logits(
        skeleton, canonical_pose, raw, delta, prior
    )
