"""Dense voxel grids, trilinear sampling, motion-weight parameterization.

Grid values are float64 tensors of shape (nz, ny, nx, C): x varies fastest,
then y, then z, with channels interleaved per voxel. Voxels are grid nodes;
node (0, 0, 0) sits on the min corner of the box, node (nx-1, ny-1, nz-1) on
the max corner.

Classes
-----------------------
VolumeError
    Exception raised for errors in voxel grids.
VolumeFormatError
    Exception raised for malformed volume files.
GridBox
    World-space box and node counts of a grid.
VoxelGrid
    Grid values plus their box and out-of-grid value.
WeightLogits
    Weight offsets over a Gaussian prior.

Functions
-----------------------
trilinear_sample()
    Trilinear blend of the 8 nodes around each query point.
bounding_box()
    Default box enclosing the canonical skeleton.
bone_gaussians()
    Unnormalized ellipsoidal Gaussian of each bone.
gaussian_prior()
    Normalized bone prior with a background channel.
weights_from_logits()
    Softmax motion weights from offsets and prior.
activate_canonical()
    Non-negative RGBα from raw canonical values.
read_volume()
    Read a grid from a volume file.
write_volume()
    Write a grid to a volume file.
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

import struct
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from modules.kinematics import Pose
from modules.kinematics import Skeleton


MAGIC = b"VOLR"
VERSION = 1
# magic, version, nx, ny, nz, C, box corners
HEADER = struct.Struct("<4sI4I6d")
MAX_VALUES = 2**31 - 1
PRIOR_FLOOR = 1e-6


class VolumeError(Exception):
    """Exception raised for errors in voxel grids."""


class VolumeFormatError(VolumeError):
    """Exception raised for malformed volume files."""


@dataclass(frozen=True)
class GridBox:
    """World-space box and node counts of a grid.

    Attributes
    -----------------------
    lo : np.ndarray
        Min corner.
    hi : np.ndarray
        Max corner, greater than `lo` on every axis.
    dims : tuple[int, int, int]
        Node counts (nx, ny, nz), at least 2 per axis.
    """

    lo: np.ndarray
    hi: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        dims = tuple(int(n) for n in self.dims)
        if not (hi > lo).all():
            raise VolumeError("box max corner must exceed min corner")
        if len(dims) != 3 or min(dims) < 2:
            raise VolumeError(f"grid dims {dims} must be at least 2 per axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "dims", dims)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Tensor shape (nz, ny, nx) of the grid nodes."""
        return self.dims[::-1]

    @property
    def voxel_size(self) -> np.ndarray:
        """Node spacing per axis."""
        return (self.hi - self.lo) / (np.array(self.dims) - 1)

    def with_dims(self, dims: tuple[int, int, int]) -> "GridBox":
        """Same box, different node counts."""
        return GridBox(lo=self.lo, hi=self.hi, dims=dims)

    def corners(self) -> np.ndarray:
        """(8, 3) world corners of the box."""
        idx = np.array(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        )
        return np.where(idx == 0, self.lo, self.hi)

    def centers(self) -> torch.Tensor:
        """(nz, ny, nx, 3) world coordinates of every node."""
        axes = [
            torch.linspace(
                float(self.lo[a]), float(self.hi[a]), self.dims[a],
                dtype=torch.float64,
            )
            for a in range(3)
        ]
        z, y, x = torch.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return torch.stack([x, y, z], dim=-1)


@dataclass(frozen=True)
class VoxelGrid:
    """Grid values plus their box and out-of-grid value.

    Attributes
    -----------------------
    box : GridBox
        World mapping.
    values : torch.Tensor
        (nz, ny, nx, C) float64 values.
    background : bool
        If `True` points outside the box sample as the one-hot of the last
        channel, otherwise as zeros. Default is `False`.
    """

    box: GridBox
    values: torch.Tensor
    background: bool = field(default=False)

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float64)
        if values.ndim != 4 or tuple(values.shape[:3]) != self.box.shape:
            raise VolumeError(
                f"values {tuple(values.shape)} do not match grid "
                f"{self.box.shape}"
            )
        if not torch.isfinite(values).all():
            raise VolumeError("voxel values must be finite")
        object.__setattr__(self, "values", values)

    @property
    def C(self) -> int:
        """Number of channels."""
        return self.values.shape[-1]

    def out_value(self) -> torch.Tensor:
        """Value returned for points outside the box."""
        out = torch.zeros(self.C, dtype=torch.float64)
        if self.background:
            out[-1] = 1.0
        return out

    def replace(self, values: torch.Tensor) -> "VoxelGrid":
        """Same box and out-of-grid value, new values."""
        return VoxelGrid(
            box=self.box, values=values, background=self.background
        )


@dataclass(frozen=True)
class WeightLogits:
    """Weight offsets over a Gaussian prior.

    Attributes
    -----------------------
    grid : VoxelGrid
        K+1 channel offsets ΔW.
    prior : VoxelGrid
        K+1 channel prior W_G, positive and summing to 1 per voxel.
    """

    grid: VoxelGrid
    prior: VoxelGrid

    def __post_init__(self):
        if (
            self.grid.box.shape != self.prior.box.shape
            or self.grid.C != self.prior.C
        ):
            raise VolumeError("weight offsets and prior differ in shape")


def trilinear_sample(grid: VoxelGrid, x: torch.Tensor) -> torch.Tensor:
    """Trilinear blend of the 8 nodes around each query point.

    Parameters
    -----------------------
    grid : VoxelGrid
        Grid sampled.
    x : torch.Tensor
        (..., 3) world points.

    Returns
    -----------------------
    torch.Tensor
        (..., C) samples; points outside the box get `grid.out_value()`.
        Differentiable with respect to `grid.values`.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    lead = x.shape[:-1]
    x = x.reshape(-1, 3)

    box = grid.box
    lo = torch.as_tensor(box.lo)
    hi = torch.as_tensor(box.hi)
    n = torch.tensor(box.dims, dtype=torch.float64)

    u = (x - lo) / (hi - lo) * (n - 1)
    inside = ((u >= 0) & (u <= n - 1)).all(dim=-1)

    i0 = torch.minimum(torch.floor(u).clamp(min=0), n - 2)
    f = (u - i0).clamp(0.0, 1.0)
    i0 = i0.long()
    ix, iy, iz = i0.unbind(-1)
    fx, fy, fz = f.unbind(-1)

    V = grid.values
    out = torch.zeros(x.shape[0], grid.C, dtype=torch.float64)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                corner = V[iz + dz, iy + dy, ix + dx]
                out = out + (wx * wy * wz)[:, None] * corner

    out = torch.where(inside[:, None], out, grid.out_value())
    return out.reshape(*lead, grid.C)


def bounding_box(
    skel: Skeleton, canonical: Pose, dims: tuple[int, int, int]
) -> GridBox:
    """Default box enclosing the canonical skeleton.

    The bounding box of the canonical joints dilated by three times the
    largest radial sigma.
    """
    margin = 3.0 * float(np.max(skel.sigma))
    lo = canonical.joints.min(axis=0) - margin
    hi = canonical.joints.max(axis=0) + margin
    return GridBox(lo=lo, hi=hi, dims=dims)


def bone_gaussians(
    skel: Skeleton, canonical: Pose, x: torch.Tensor
) -> torch.Tensor:
    """Unnormalized ellipsoidal Gaussian of each bone.

    Each Gaussian is centered at the bone midpoint, with axial sigma equal to
    half the bone length and radial sigma from the skeleton. Zero-length
    bones get an isotropic Gaussian of the radial sigma.

    Parameters
    -----------------------
    skel : Skeleton
        Skeleton with the radial sigmas.
    canonical : Pose
        Pose in which the bones are placed.
    x : torch.Tensor
        (..., 3) world points.

    Returns
    -----------------------
    torch.Tensor
        (..., K) Gaussian values in (0, 1].
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    start, end = skel.bone_segments(canonical.joints)

    channels = []
    for k in range(skel.K):
        a = torch.as_tensor(start[k])
        b = torch.as_tensor(end[k])
        sr = float(skel.sigma[k])
        d = x - 0.5 * (a + b)
        length = float(torch.linalg.norm(b - a))
        dist2 = (d * d).sum(dim=-1)
        if length < 1e-12:
            channels.append(torch.exp(-dist2 / (2.0 * sr**2)))
            continue
        axial = d @ ((b - a) / length)
        radial2 = (dist2 - axial**2).clamp(min=0.0)
        sa = 0.5 * length
        channels.append(
            torch.exp(-(axial**2 / (2.0 * sa**2) + radial2 / (2.0 * sr**2)))
        )
    return torch.stack(channels, dim=-1)


def gaussian_prior(
    skel: Skeleton,
    canonical: Pose,
    box: GridBox,
    dims: tuple[int, int, int] | None = None,
) -> VoxelGrid:
    """Normalized bone prior with a background channel.

    Parameters
    -----------------------
    skel : Skeleton
        Skeleton with the radial sigmas.
    canonical : Pose
        Canonical pose.
    box : GridBox
        Box of the prior grid.
    dims : tuple[int, int, int] | None
        Node counts overriding `box.dims`. Default is `None`.

    Returns
    -----------------------
    VoxelGrid
        K+1 channels summing to 1 per voxel; the background channel is
        max(1e-6, 1 - Σ bones) before normalization.
    """
    if dims is not None:
        box = box.with_dims(dims)
    bones = bone_gaussians(skel, canonical, box.centers())
    bg = (1.0 - bones.sum(dim=-1, keepdim=True)).clamp(min=PRIOR_FLOOR)
    values = torch.cat([bones, bg], dim=-1)
    values = values / values.sum(dim=-1, keepdim=True)
    return VoxelGrid(box=box, values=values, background=True)


def weights_from_logits(wl: WeightLogits) -> VoxelGrid:
    """Softmax motion weights from offsets and prior.

    Returns
    -----------------------
    VoxelGrid
        softmax(ΔW + log W_G) over the K+1 channels, background last.
    """
    logits = wl.grid.values + torch.log(wl.prior.values)
    # softmax subtracts the per-voxel max
    values = torch.softmax(logits, dim=-1)
    return VoxelGrid(box=wl.grid.box, values=values, background=True)


def activate_canonical(raw: VoxelGrid) -> VoxelGrid:
    """Non-negative RGBα from raw canonical values.

    Softplus on every channel, α further clamped to 1.
    """
    if raw.C != 4:
        raise VolumeError(f"canonical grid needs 4 channels, got {raw.C}")
    v = F.softplus(raw.values)
    values = torch.cat([v[..., :3], v[..., 3:].clamp(max=1.0)], dim=-1)
    return VoxelGrid(box=raw.box, values=values)


def write_volume(grid: VoxelGrid, path: str | Path):
    """Write a grid to a volume file.

    Values are stored as little-endian float32.

    Parameters
    -----------------------
    grid : VoxelGrid
        Grid to write.
    path : str | Path
        Destination file.
    """
    nx, ny, nz = grid.box.dims
    header = HEADER.pack(
        MAGIC, VERSION, nx, ny, nz, grid.C, *grid.box.lo, *grid.box.hi
    )
    payload = grid.values.detach().cpu().numpy().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path: str | Path, background: bool = False) -> VoxelGrid:
    """Read a grid from a volume file.

    Parameters
    -----------------------
    path : str | Path
        Source file.
    background : bool
        Out-of-grid convention of the returned grid. Default is `False`.

    Returns
    -----------------------
    VoxelGrid
        The grid, values upcast to float64.

    Raises
    -----------------------
    FileNotFoundError
        If the file does not exist.
    VolumeFormatError
        On bad magic, unsupported version, dimension overflow or truncated
        payload.
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{path} not found") from err

    if data[:4] != MAGIC:
        raise VolumeFormatError(f"{path} :: bad magic")
    if len(data) < HEADER.size:
        raise VolumeFormatError(f"{path} :: truncated header")

    _, version, nx, ny, nz, C, *corners = HEADER.unpack_from(data)
    if version != VERSION:
        raise VolumeFormatError(f"{path} :: unsupported version {version}")

    count = nx * ny * nz * C
    if count > MAX_VALUES or C == 0:
        raise VolumeFormatError(f"{path} :: dimension overflow")
    payload = len(data) - HEADER.size
    if payload < 4 * count:
        raise VolumeFormatError(f"{path} :: truncated payload")
    if payload > 4 * count:
        raise VolumeFormatError(f"{path} :: trailing data")

    values = np.frombuffer(data, dtype="<f4", count=count, offset=HEADER.size)
    try:
        box = GridBox(lo=corners[:3], hi=corners[3:], dims=(nx, ny, nz))
        return VoxelGrid(
            box=box,
            values=torch.from_numpy(
                values.astype(np.float64).reshape(nz, ny, nx, C)
            ),
            background=background,
        )
    except VolumeError as err:
        raise VolumeFormatError(f"{path} :: {err}") from err
