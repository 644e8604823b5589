"""Skeleton, body poses and per-bone motion bases.

Bone `k` is the segment from joint `k` to its parent and is driven by the
kinematic-chain transform of joint `k`; the root bone is anchored at the root
joint and has zero length.

Classes
-----------------------
KinematicsError
    Exception raised for errors in skeletons and poses.
Skeleton
    Kinematic tree with rest offsets and prior sigmas.
Pose
    Body pose, rest joints plus axis-angle rotations.
RigidTransform
    Rotation plus translation, x -> A x + t.
MotionBasisSet
    Per-bone rigid transforms from target to canonical space.

Functions
-----------------------
read_skeleton_config()
    Parse and validate a skeleton YAML file.
hat()
    Skew-symmetric matrix of a 3-vector.
rodrigues()
    Rotation matrix of an axis-angle vector.
world_transform()
    Kinematic-chain transform of a joint.
relative_transform()
    Transform from target to canonical pose of a bone.
motion_bases()
    Motion bases of every bone.
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

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from modules.schemas import PoseRecord
from modules.schemas import SkeletonConfig


class KinematicsError(Exception):
    """Exception raised for errors in skeletons and poses."""


def read_skeleton_config(path: str | Path) -> SkeletonConfig:
    """Parse and validate a skeleton YAML file.

    Parameters
    -----------------------
    path : str | Path
        Path of the skeleton file.

    Returns
    -----------------------
    SkeletonConfig
        The validated document.

    Raises
    -----------------------
    FileNotFoundError
        If the file does not exist.
    KinematicsError
        If the document is malformed or violates the tree invariants.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{path} not found") from err
    except yaml.YAMLError as err:
        raise KinematicsError(f"{path} :: invalid YAML") from err

    try:
        return SkeletonConfig.model_validate(doc)
    except ValidationError as err:
        first = err.errors()[0]["msg"]
        raise KinematicsError(
            f"{path} :: invalid skeleton :: {first}"
        ) from err


@dataclass(frozen=True)
class Skeleton:
    """Kinematic tree with rest offsets and prior sigmas.

    Attributes
    -----------------------
    parents : tuple[int, ...]
        Parent index per joint, -1 for the root; `parents[k] < k`.
    offsets : np.ndarray
        (K, 3) joint centers in parent-local space.
    sigma : np.ndarray
        (K,) radial sigmas of the Gaussian prior.
    """

    parents: tuple[int, ...]
    offsets: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_config(cls, cfg: SkeletonConfig) -> "Skeleton":
        """Build a skeleton from a validated config."""
        return cls(
            parents=tuple(cfg.parents),
            offsets=np.asarray(cfg.offsets, dtype=np.float64),
            sigma=np.asarray(cfg.sigma, dtype=np.float64),
        )

    def to_config(self) -> SkeletonConfig:
        """Return the config document describing this skeleton."""
        return SkeletonConfig(
            bones=self.K,
            parents=list(self.parents),
            offsets=[tuple(float(v) for v in o) for o in self.offsets],
            sigma=[float(s) for s in self.sigma],
        )

    @property
    def K(self) -> int:
        """Number of bones (equal to the number of joints)."""
        return len(self.parents)

    def chain(self, k: int) -> list[int]:
        """Return the joint indices from the root to `k`, both included.

        Raises
        -----------------------
        KinematicsError
            If `k` is not a valid joint index.
        """
        if not 0 <= k < self.K:
            raise KinematicsError(f"bone index {k} out of range [0, {self.K})")
        out = [k]
        while self.parents[out[-1]] >= 0:
            out.append(self.parents[out[-1]])
        return out[::-1]

    def rest_joints(self) -> np.ndarray:
        """World-space joint positions of the zero-rotation pose."""
        J = np.zeros((self.K, 3))
        for k, p in enumerate(self.parents):
            J[k] = self.offsets[k] if p < 0 else J[p] + self.offsets[k]
        return J

    def bone_segments(
        self, joints: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return the (K, 3) start and end points of every bone.

        The start is the parent joint, the end joint `k` itself; the root
        bone degenerates to the root joint.
        """
        joints = np.asarray(joints, dtype=np.float64)
        start = np.array(
            [
                joints[p] if p >= 0 else joints[k]
                for k, p in enumerate(self.parents)
            ]
        )
        return start, joints.copy()


@dataclass(frozen=True)
class Pose:
    """Body pose, rest joints plus axis-angle rotations.

    Attributes
    -----------------------
    joints : np.ndarray
        (K, 3) world-space rest joint positions; the root entry carries the
        global translation of the subject.
    angles : np.ndarray
        (K, 3) axis-angle rotations, radians times unit axis.
    """

    joints: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        angles = np.asarray(self.angles, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3:
            raise KinematicsError(f"joints must be (K, 3), got {joints.shape}")
        if angles.shape != joints.shape:
            raise KinematicsError(
                f"angles {angles.shape} and joints {joints.shape} differ"
            )
        if not (np.isfinite(joints).all() and np.isfinite(angles).all()):
            raise KinematicsError("pose entries must be finite")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "angles", angles)

    @property
    def K(self) -> int:
        """Number of joints."""
        return self.joints.shape[0]

    @classmethod
    def canonical(cls, skel: Skeleton) -> "Pose":
        """T-pose: zero angles with the skeleton rest joints."""
        return cls(joints=skel.rest_joints(), angles=np.zeros((skel.K, 3)))

    @classmethod
    def from_record(cls, record: PoseRecord) -> "Pose":
        """Build a pose from a manifest record."""
        return cls(
            joints=np.reshape(record.joints, (-1, 3)),
            angles=np.reshape(record.angles, (-1, 3)),
        )

    def to_record(self) -> PoseRecord:
        """Return the manifest record of this pose."""
        return PoseRecord(
            angles=[float(v) for v in self.angles.ravel()],
            joints=[float(v) for v in self.joints.ravel()],
        )

    def check(self, skel: Skeleton):
        """Raise `KinematicsError` if the pose does not fit `skel`."""
        if self.K != skel.K:
            raise KinematicsError(
                f"pose has {3 * self.K} angle values, expected {3 * skel.K}"
            )


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation, x -> A x + t.

    Attributes
    -----------------------
    A : np.ndarray
        (3, 3) rotation matrix.
    t : np.ndarray
        (3,) translation.
    """

    A: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(A=np.eye(3), t=np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix."""
        return cls(A=np.array(M[:3, :3]), t=np.array(M[:3, 3]))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.A
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "RigidTransform":
        return RigidTransform(A=self.A.T, t=-self.A.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return `self ∘ other`, applying `other` first."""
        return RigidTransform(A=self.A @ other.A, t=self.A @ other.t + self.t)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply to (..., 3) points."""
        return np.asarray(x, dtype=np.float64) @ self.A.T + self.t


@dataclass(frozen=True)
class MotionBasisSet:
    """Per-bone rigid transforms from target to canonical space.

    Attributes
    -----------------------
    bases : tuple[RigidTransform, ...]
        One transform per bone, index-aligned with the skeleton.
    """

    bases: tuple[RigidTransform, ...]

    def __len__(self) -> int:
        return len(self.bases)

    def __getitem__(self, k: int) -> RigidTransform:
        return self.bases[k]

    def __iter__(self):
        return iter(self.bases)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (K, 3, 3) rotations and (K, 3) translations."""
        return (
            np.stack([b.A for b in self.bases]),
            np.stack([b.t for b in self.bases]),
        )


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix W with W v = omega x v."""
    x, y, z = omega
    return np.array(
        [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=np.float64
    )


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector.

    Parameters
    -----------------------
    omega : np.ndarray
        Axis-angle 3-vector, radians times unit axis.

    Returns
    -----------------------
    np.ndarray
        (3, 3) rotation matrix exp(hat(omega)).
    """
    omega = np.asarray(omega, dtype=np.float64)
    th = float(np.linalg.norm(omega))
    W = hat(omega)
    # second-order series below the threshold
    if th < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    A = np.sin(th) / th
    B = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + A * W + B * (W @ W)


def _local_offsets(skel: Skeleton, pose: Pose) -> np.ndarray:
    # root offset is the root position, the others are parent-relative
    off = pose.joints.copy()
    for k, p in enumerate(skel.parents):
        if p >= 0:
            off[k] = pose.joints[k] - pose.joints[p]
    return off


def world_transform(skel: Skeleton, pose: Pose, k: int) -> RigidTransform:
    """Kinematic-chain transform of a joint.

    Parameters
    -----------------------
    skel : Skeleton
        Kinematic tree.
    pose : Pose
        Pose evaluated.
    k : int
        Joint (bone) index.

    Returns
    -----------------------
    RigidTransform
        Ordered product over the root-to-`k` chain of [R(omega_i) | j_i].

    Raises
    -----------------------
    KinematicsError
        If `k` is out of range or the pose does not fit the skeleton.
    """
    pose.check(skel)
    chain = skel.chain(k)
    offsets = _local_offsets(skel, pose)

    G = np.eye(4)
    for i in chain:
        L = np.eye(4)
        L[:3, :3] = rodrigues(pose.angles[i])
        L[:3, 3] = offsets[i]
        G = G @ L
    return RigidTransform.from_matrix(G)


def relative_transform(
    skel: Skeleton, canonical: Pose, target: Pose, k: int
) -> RigidTransform:
    """Transform carrying bone `k` from the target to the canonical pose.

    Returns
    -----------------------
    RigidTransform
        G_k(canonical) · G_k(target)⁻¹.
    """
    Gc = world_transform(skel, canonical, k)
    Gt = world_transform(skel, target, k)
    return Gc.compose(Gt.inverse())


def motion_bases(
    skel: Skeleton, canonical: Pose, target: Pose
) -> MotionBasisSet:
    """Motion bases of every bone.

    `bases[k](x) = A_k x + t_k` maps target-pose points of bone `k` to
    canonical-pose points.
    """
    return MotionBasisSet(
        bases=tuple(
            relative_transform(skel, canonical, target, k)
            for k in range(skel.K)
        )
    )
