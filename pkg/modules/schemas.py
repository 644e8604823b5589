"""Types for configuration files, manifests and annotations.

Classes
-----------------------
FigureConfig
    Appearance of the procedural capsule figure.
SkeletonConfig
    Skeleton definition file.
GridConfig
    Resolution of the canonical and weight grids.
SynthConfig
    Parameters of synthetic dataset generation.
FitConfig
    Parameters of the optimization loop.
RenderConfig
    Parameters of the render subcommand.
FilterConfig
    Thresholds and keypoint schema of the frame filter.
RunConfig
    Fully resolved configuration of a CLI invocation.
PoseRecord
    Serialized body pose.
CameraRecord
    Serialized pinhole camera.
ModelConfig
    Header of a model checkpoint directory.
FrameRecord
    Manifest entry for a single frame.
AnnotationRecord
    Estimator outputs attached to an in-the-wild frame.
AnnotatedFrame
    Entry of an annotation manifest, consumed by the filter.
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

import math
from typing import Literal
from typing import Optional

from pydantic import BaseModel
from pydantic import Field
from pydantic import model_validator


Vec3 = tuple[float, float, float]
Dims = tuple[int, int, int]


class FigureConfig(BaseModel):
    """Appearance of the procedural capsule figure.

    Attributes
    -----------------------
    radius : list[float]
        Capsule radius per bone, world units.
    color : list[Vec3]
        Base RGB color per bone, in [0, 1].
    alpha : float
        Opacity inside the capsules. Default is 1.
    """

    radius: list[float] = Field(description="Capsule radius per bone.")
    color: list[Vec3] = Field(description="Base RGB color per bone.")
    alpha: float = Field(
        default=1.0, ge=0.0, le=1.0, description="Opacity inside capsules."
    )

    @model_validator(mode="after")
    def _check_ranges(self):
        if any(r <= 0.0 for r in self.radius):
            raise ValueError("capsule radii must be positive")
        for c in self.color:
            if any(v < 0.0 or v > 1.0 for v in c):
                raise ValueError("figure colors must lie in [0, 1]")
        return self


class SkeletonConfig(BaseModel):
    """Skeleton definition file.

    Bone `k` is the segment from joint `k` to its parent; the root bone is
    anchored at the root joint.

    Attributes
    -----------------------
    bones : Optional[int]
        Declared bone count K, cross-checked against the arrays. Default is
        `None` (inferred).
    parents : list[int]
        Parent index per joint, -1 for the root.
    offsets : list[Vec3]
        Joint center in parent-local space (world units); the root offset is
        the root position.
    sigma : list[float]
        Radial sigma of the Gaussian prior, per bone.
    figure : Optional[FigureConfig]
        Capsule figure used for synthetic data. Default is `None`.
    """

    bones: Optional[int] = Field(
        default=None, description="Declared bone count K."
    )
    parents: list[int] = Field(description="Parent index per joint.")
    offsets: list[Vec3] = Field(description="Rest offsets per joint.")
    sigma: list[float] = Field(description="Radial prior sigma per bone.")
    figure: Optional[FigureConfig] = Field(
        default=None, description="Capsule figure for synthetic data."
    )

    @model_validator(mode="after")
    def _check_tree(self):
        K = len(self.parents)
        if K < 1:
            raise ValueError("skeleton needs at least one bone")
        if self.bones is not None and self.bones != K:
            raise ValueError(f"declared {self.bones} bones, found {K}")
        if len(self.offsets) != K or len(self.sigma) != K:
            raise ValueError("parents, offsets and sigma lengths differ")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for k, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < k:
                raise ValueError(f"joint {k} :: parent {p} not in [0, {k})")
        if any(s <= 0.0 for s in self.sigma):
            raise ValueError("prior sigmas must be positive")
        if not all(math.isfinite(v) for o in self.offsets for v in o):
            raise ValueError("offsets must be finite")
        if self.figure is not None and (
            len(self.figure.radius) != K or len(self.figure.color) != K
        ):
            raise ValueError("figure radius/color lengths differ from K")
        return self


class GridConfig(BaseModel):
    """Resolution of the canonical and weight grids.

    Attributes
    -----------------------
    canonical : Dims
        Canonical RGBα grid dims (nx, ny, nz). Default is 24³.
    weights : Dims
        Weight grid dims (nx, ny, nz). Default is 16³.
    """

    canonical: Dims = Field(
        default=(24, 24, 24), description="Canonical grid dims."
    )
    weights: Dims = Field(
        default=(16, 16, 16), description="Weight grid dims."
    )

    @classmethod
    def preset(cls, name: str) -> "GridConfig":
        """Named preset, "desk" (24³/16³) or "paper" (128³/64³)."""
        if name == "paper":
            return cls(canonical=(128, 128, 128), weights=(64, 64, 64))
        if name == "desk":
            return cls()
        raise ValueError(f"unknown grid preset {name}")

    @model_validator(mode="after")
    def _check_dims(self):
        if min(self.canonical) < 2 or min(self.weights) < 2:
            raise ValueError("grid dims must be at least 2 per axis")
        return self


class SynthConfig(BaseModel):
    """Parameters of synthetic dataset generation.

    Attributes
    -----------------------
    poses : int
        Number of sampled poses. Default is 100.
    max_angle : float
        Per-component bound of the sampled axis-angle vectors. Default is 0.6.
    cameras : int
        Number of cameras on the sphere. Default is 144.
    train_radius : float
        Radius of the training camera sphere. Default is 2.25.
    test_radius : float
        Radius of the held-out camera sphere. Default is 1.5.
    holdout_poses : float
        Fraction of held-out poses. Default is 0.1.
    holdout_cameras : float
        Fraction of held-out cameras. Default is 0.1.
    image_size : int
        Width and height of the rendered images. Default is 32.
    focal_scale : float
        Focal length as a fraction of the image width. Default is 0.8.
    """

    poses: int = Field(default=100, ge=1, description="Number of poses.")
    max_angle: float = Field(
        default=0.6, gt=0.0, lt=math.pi, description="Angle bound."
    )
    cameras: int = Field(default=144, ge=1, description="Number of cameras.")
    train_radius: float = Field(
        default=2.25, gt=0.0, description="Training camera radius."
    )
    test_radius: float = Field(
        default=1.5, gt=0.0, description="Held-out camera radius."
    )
    holdout_poses: float = Field(
        default=0.1, ge=0.0, lt=1.0, description="Held-out pose fraction."
    )
    holdout_cameras: float = Field(
        default=0.1, ge=0.0, lt=1.0, description="Held-out camera fraction."
    )
    image_size: int = Field(default=32, ge=1, description="Image size.")
    focal_scale: float = Field(
        default=0.8, gt=0.0, description="Focal length over image width."
    )


class FitConfig(BaseModel):
    """Parameters of the optimization loop.

    Attributes
    -----------------------
    iterations : int
        Number of Adam steps. Default is 5000.
    batch_size : int
        Frames per step. Default is 2.
    lr : float
        Adam learning rate. Default is 1e-4.
    beta1, beta2, eps : float
        Adam hyperparameters. Defaults are 0.9, 0.999, 1e-8.
    loss : Literal["l2", "l2+l1"]
        Loss kind. Default is "l2+l1".
    l1_weight : float
        Weight of the foreground L1 term. Default is 0.1.
    seed : int
        Seed of frame order and random backgrounds. Default is 0.
    eval_every : int
        Evaluation cadence in iterations, 0 disables. Default is 500.
    step : Optional[float]
        Ray-marching step (world units). Default is `None` (half a voxel).
    step_ref : Optional[float]
        Reference step of the opacity scaling. Default is `None` (one voxel).
    workers : int
        Parallel frame workers within a batch. Default is 1.
    """

    iterations: int = Field(default=5000, ge=0, description="Adam steps.")
    batch_size: int = Field(default=2, ge=1, description="Frames per step.")
    lr: float = Field(default=1e-4, gt=0.0, description="Learning rate.")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0, description="Adam β1.")
    beta2: float = Field(
        default=0.999, ge=0.0, lt=1.0, description="Adam β2."
    )
    eps: float = Field(default=1e-8, gt=0.0, description="Adam ε.")
    loss: Literal["l2", "l2+l1"] = Field(
        default="l2+l1", description="Loss kind."
    )
    l1_weight: float = Field(
        default=0.1, ge=0.0, description="Foreground L1 weight."
    )
    seed: int = Field(default=0, description="Seed.")
    eval_every: int = Field(default=500, ge=0, description="Eval cadence.")
    step: Optional[float] = Field(
        default=None, gt=0.0, description="Ray-marching step."
    )
    step_ref: Optional[float] = Field(
        default=None, gt=0.0, description="Reference opacity step."
    )
    workers: int = Field(default=1, ge=1, description="Frame workers.")


class RenderConfig(BaseModel):
    """Parameters of the render subcommand.

    Attributes
    -----------------------
    mode : Literal["single", "retarget", "turntable"]
        Render mode. Default is "single".
    poses : Optional[str]
        Pose sequence file (one `PoseRecord` per line). `None` renders the
        canonical pose. Default is `None`.
    camera : Optional[str]
        Camera of the single and retarget modes, a YAML `CameraRecord` file
        or a manifest (.jsonl). `None` uses the first turntable camera.
        Default is `None`.
    frame : int
        Frame of the camera manifest, whose pose is also rendered when no
        pose file is given. Default is 0.
    frames : int
        Turntable camera count. Default is 36.
    radius : float
        Camera distance from the subject. Default is 2.25.
    elevation : float
        Camera elevation in degrees. Default is 0.
    image_size : int
        Width and height of the output images. Default is 64.
    focal_scale : float
        Focal length as a fraction of the image width. Default is 0.8.
    rgba : bool
        Write the alpha channel. Default is `False`.
    """

    mode: Literal["single", "retarget", "turntable"] = Field(
        default="single", description="Render mode."
    )
    poses: Optional[str] = Field(
        default=None, description="Pose sequence file."
    )
    camera: Optional[str] = Field(
        default=None, description="Camera record file or manifest."
    )
    frame: int = Field(default=0, description="Frame of the camera manifest.")
    frames: int = Field(default=36, ge=1, description="Turntable cameras.")
    radius: float = Field(default=2.25, gt=0.0, description="Camera radius.")
    elevation: float = Field(default=0.0, description="Elevation, degrees.")
    image_size: int = Field(default=64, ge=1, description="Image size.")
    focal_scale: float = Field(
        default=0.8, gt=0.0, description="Focal length over image width."
    )
    rgba: bool = Field(default=False, description="Write alpha channel.")


class FilterConfig(BaseModel):
    """Thresholds and keypoint schema of the frame filter.

    Default keypoint indices follow the BODY_25 layout.

    Attributes
    -----------------------
    tolerance : float
        Max mean 2D/3D keypoint distance over the bbox diagonal. Default is
        0.05.
    confidence : float
        Keypoint confidence floor (inclusive). Default is 0.3.
    coverage : float
        Min silhouette coverage. Default is 0.95.
    wrists : tuple[int, int]
        Indices of the wrists. Default is (4, 7).
    ankles : tuple[int, int]
        Indices of the ankles. Default is (11, 14).
    crop_size : int
        Side of the normalized crop. Default is 512.
    subject_size : int
        Longer bbox side after normalization. Default is 400.
    """

    tolerance: float = Field(
        default=0.05, gt=0.0, description="Keypoint consistency tolerance."
    )
    confidence: float = Field(
        default=0.3, ge=0.0, le=1.0, description="Confidence floor."
    )
    coverage: float = Field(
        default=0.95, ge=0.0, le=1.0, description="Coverage threshold."
    )
    wrists: tuple[int, int] = Field(default=(4, 7), description="Wrists.")
    ankles: tuple[int, int] = Field(default=(11, 14), description="Ankles.")
    crop_size: int = Field(default=512, ge=1, description="Crop side.")
    subject_size: int = Field(default=400, ge=1, description="Subject side.")


class RunConfig(BaseModel):
    """Fully resolved configuration of a CLI invocation.

    Attributes
    -----------------------
    command : str
        Subcommand name.
    skeleton : Optional[str]
        Skeleton config path.
    dataset : Optional[str]
        Manifest path (fit, eval) or annotation manifest path (filter).
    checkpoint : Optional[str]
        Checkpoint directory (eval, render).
    canonical : Optional[str]
        Canonical rest joints (fit), the canonical_joints.yaml written by the
        filter command. `None` uses the skeleton rest joints.
    out : str
        Output directory.
    seed : int
        Seed of every random choice.
    split : Literal["train", "test"]
        Split evaluated by the eval command.
    grid, synth, fit, render, filter
        Subcommand sections.
    """

    command: str = Field(description="Subcommand name.")
    skeleton: Optional[str] = Field(default=None, description="Skeleton path.")
    dataset: Optional[str] = Field(default=None, description="Manifest path.")
    checkpoint: Optional[str] = Field(
        default=None, description="Checkpoint directory."
    )
    canonical: Optional[str] = Field(
        default=None, description="Canonical joints file."
    )
    out: str = Field(default="out", description="Output directory.")
    seed: int = Field(default=0, description="Seed.")
    split: Literal["train", "test"] = Field(
        default="test", description="Split evaluated by the eval command."
    )
    grid: GridConfig = Field(default_factory=GridConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)


class PoseRecord(BaseModel):
    """Serialized body pose.

    Attributes
    -----------------------
    angles : list[float]
        3K axis-angle components, joint-major.
    joints : list[float]
        3K world-space rest joint coordinates, joint-major.
    """

    angles: list[float] = Field(description="3K axis-angle values.")
    joints: list[float] = Field(description="3K rest joint coordinates.")

    @model_validator(mode="after")
    def _check_lengths(self):
        if len(self.angles) % 3 or len(self.angles) != len(self.joints):
            raise ValueError("angles and joints must both hold 3K values")
        return self


class CameraRecord(BaseModel):
    """Serialized pinhole camera.

    Attributes
    -----------------------
    rotation : list[float]
        Row-major 3x3 world-to-camera rotation.
    translation : list[float]
        World-to-camera translation.
    intrinsics : list[float]
        fx, fy, cx, cy in pixels.
    size : list[int]
        Width, height in pixels.
    """

    rotation: list[float] = Field(
        min_length=9, max_length=9, description="Rotation, row-major."
    )
    translation: list[float] = Field(
        min_length=3, max_length=3, description="Translation."
    )
    intrinsics: list[float] = Field(
        min_length=4, max_length=4, description="fx, fy, cx, cy."
    )
    size: list[int] = Field(
        min_length=2, max_length=2, description="Width, height."
    )


class ModelConfig(BaseModel):
    """Header of a model checkpoint directory.

    Attributes
    -----------------------
    kind : Literal["fitted", "explicit"]
        "fitted" checkpoints store raw canonical values and weight offsets,
        "explicit" ones store the activated canonical volume and the weights.
    canonical : PoseRecord
        Canonical pose of the model.
    """

    kind: Literal["fitted", "explicit"] = Field(description="Checkpoint kind.")
    canonical: PoseRecord = Field(description="Canonical pose.")


class FrameRecord(BaseModel):
    """Manifest entry for a single frame.

    Attributes
    -----------------------
    frame : int
        Frame index.
    image : str
        Image path, relative to the manifest directory.
    mask : str
        Mask path, relative to the manifest directory.
    pose : PoseRecord
        Pose of the frame.
    camera : CameraRecord
        Camera of the frame.
    split : Literal["train", "test"]
        Split tag.
    """

    frame: int = Field(description="Frame index.")
    image: str = Field(description="Image path.")
    mask: str = Field(description="Mask path.")
    pose: PoseRecord = Field(description="Pose.")
    camera: CameraRecord = Field(description="Camera.")
    split: Literal["train", "test"] = Field(description="Split tag.")


class AnnotationRecord(BaseModel):
    """Estimator outputs attached to an in-the-wild frame.

    Attributes
    -----------------------
    keypoints : list[Vec3]
        2D keypoints as (x, y, confidence).
    projected : list[tuple[float, float]]
        Projected 3D keypoints, index-aligned with `keypoints`.
    bbox : tuple[float, float, float, float]
        Subject bounding box (x0, y0, x1, y1) in pixels.
    person_mask : str
        Person segmentation mask path.
    silhouette : str
        Body-model silhouette path.
    image : Optional[str]
        Frame image path, cropped by the filter command. Default is `None`.
    camera : Optional[CameraRecord]
        Estimated camera. Default is `None`.
    joints : Optional[list[Vec3]]
        Estimated rest joints. Default is `None`.
    """

    keypoints: list[Vec3] = Field(description="2D keypoints.")
    projected: list[tuple[float, float]] = Field(
        description="Projected 3D keypoints."
    )
    bbox: tuple[float, float, float, float] = Field(description="Bbox.")
    person_mask: str = Field(description="Person mask path.")
    silhouette: str = Field(description="Silhouette path.")
    image: Optional[str] = Field(default=None, description="Image path.")
    camera: Optional[CameraRecord] = Field(
        default=None, description="Estimated camera."
    )
    joints: Optional[list[Vec3]] = Field(
        default=None, description="Estimated rest joints."
    )

    @model_validator(mode="after")
    def _check_alignment(self):
        if len(self.keypoints) != len(self.projected):
            raise ValueError("keypoint lists are not index-aligned")
        return self


class AnnotatedFrame(BaseModel):
    """Entry of an annotation manifest, consumed by the filter.

    Attributes
    -----------------------
    frame : str
        Frame identifier.
    annotation : str
        Annotation file path, relative to the manifest directory.
    """

    frame: str = Field(description="Frame identifier.")
    annotation: str = Field(description="Annotation file path.")
