"""Pinhole cameras, ray marching and background compositing.

Cameras follow the +z forward, y down convention: a pixel (px, py) looks
along ((px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1) in camera space. Images
are (height, width, channels) tensors; colors are premultiplied by alpha.

Classes
-----------------------
RenderError
    Exception raised for errors in cameras and images.
Camera
    Pinhole camera with a world-to-camera extrinsic.
Ray
    Clipped ray through a pixel.
MarchResult
    Color, alpha and sample count of marched rays.
RenderedImage
    Premultiplied color and alpha of a render.

Functions
-----------------------
orbit_cameras()
    Cameras on a circle around a target.
generate_ray()
    Ray through the center of a pixel.
generate_rays()
    Rays through every pixel of a camera.
composite_step()
    One front-to-back compositing update.
accumulate()
    Composite a sequence of samples along one ray.
march_rays()
    March a batch of rays through a posed volume.
march_ray()
    March a single ray through a posed volume.
default_steps()
    Marching step and opacity reference step of a grid.
render_image()
    Render a posed volume from a camera.
composite()
    Composite a render over a background.
write_png()
    Write an 8-bit RGB or RGBA PNG.
write_mask()
    Write a binary mask as an 8-bit PNG.
read_png()
    Read an 8-bit PNG as float color and alpha.
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
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from PIL import Image

from modules.deform import PosedVolumeView
from modules.kinematics import RigidTransform
from modules.schemas import CameraRecord
from modules.volume import GridBox


EARLY_STOP = 1.0 - 1e-4
CHUNK_ROWS = 8


class RenderError(Exception):
    """Exception raised for errors in cameras and images."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera extrinsic.

    Attributes
    -----------------------
    extrinsic : RigidTransform
        World-to-camera transform.
    fx, fy : float
        Focal lengths in pixels.
    cx, cy : float
        Principal point in pixels.
    width, height : int
        Image size in pixels.
    """

    extrinsic: RigidTransform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise RenderError("image size must be at least 1x1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world space."""
        return -self.extrinsic.A.T @ self.extrinsic.t

    @classmethod
    def look_at(
        cls,
        eye: np.ndarray,
        target: np.ndarray,
        width: int,
        height: int,
        up: np.ndarray = (0.0, 0.0, 1.0),
        focal_scale: float = 0.8,
    ) -> "Camera":
        """Camera at `eye` looking at `target`.

        The up vector is nudged to +y when it is parallel to the viewing
        direction. Focal lengths are `focal_scale * width`, the principal
        point is the image center.
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if np.linalg.norm(np.cross(forward, up)) < 1e-8:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)

        R = np.stack([right, down, forward])
        f = focal_scale * width
        return cls(
            extrinsic=RigidTransform(A=R, t=-R @ eye),
            fx=f,
            fy=f,
            cx=0.5 * width,
            cy=0.5 * height,
            width=width,
            height=height,
        )

    @classmethod
    def from_record(cls, record: CameraRecord) -> "Camera":
        fx, fy, cx, cy = record.intrinsics
        return cls(
            extrinsic=RigidTransform(
                A=np.reshape(record.rotation, (3, 3)),
                t=np.asarray(record.translation, dtype=np.float64),
            ),
            fx=fx,
            fy=fy,
            cx=cx,
            cy=cy,
            width=record.size[0],
            height=record.size[1],
        )

    def to_record(self) -> CameraRecord:
        return CameraRecord(
            rotation=[float(v) for v in self.extrinsic.A.ravel()],
            translation=[float(v) for v in self.extrinsic.t],
            intrinsics=[self.fx, self.fy, self.cx, self.cy],
            size=[self.width, self.height],
        )


@dataclass(frozen=True)
class Ray:
    """Clipped ray through a pixel.

    Attributes
    -----------------------
    origin : np.ndarray
        World origin (the camera center).
    direction : np.ndarray
        Unit world direction.
    near, far : float
        Parameter interval inside the volume box.
    hit : bool
        `False` if the ray misses the box; such rays are not marched.
    """

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    hit: bool


class MarchResult(NamedTuple):
    """Color, alpha and sample count of marched rays."""

    rgb: torch.Tensor
    alpha: torch.Tensor
    samples: torch.Tensor


@dataclass(frozen=True)
class RenderedImage:
    """Premultiplied color and alpha of a render.

    Attributes
    -----------------------
    rgb : torch.Tensor
        (height, width, 3) premultiplied color.
    alpha : torch.Tensor
        (height, width) accumulated opacity.
    """

    rgb: torch.Tensor
    alpha: torch.Tensor


def orbit_cameras(
    n: int,
    radius: float,
    elevation: float,
    width: int,
    height: int,
    target: np.ndarray = (0.0, 0.0, 0.0),
    focal_scale: float = 0.8,
) -> list[Camera]:
    """Cameras on a circle around a target.

    Parameters
    -----------------------
    n : int
        Number of cameras, evenly spaced in azimuth starting at +x.
    radius : float
        Distance from the target.
    elevation : float
        Elevation above the xy plane, degrees.
    width, height : int
        Image size.
    target : np.ndarray
        Point looked at. Default is the origin.
    focal_scale : float
        Focal length over image width. Default is 0.8.

    Returns
    -----------------------
    list[Camera]
        The cameras, up vector +z.
    """
    target = np.asarray(target, dtype=np.float64)
    el = math.radians(elevation)
    cams = []
    for i in range(n):
        phi = 2.0 * math.pi * i / n
        eye = target + radius * np.array(
            [
                math.cos(el) * math.cos(phi),
                math.cos(el) * math.sin(phi),
                math.sin(el),
            ]
        )
        cams.append(
            Camera.look_at(eye, target, width, height, focal_scale=focal_scale)
        )
    return cams


def _clip(
    origins: np.ndarray,
    dirs: np.ndarray,
    bounds: tuple[np.ndarray, np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    # fmin/fmax skip the NaN of rays parallel to a slab face
    t_enter = np.fmax.reduce(np.fmin(t1, t2), axis=-1)
    t_exit = np.fmin.reduce(np.fmax(t1, t2), axis=-1)
    near = np.maximum(t_enter, 0.0)
    hit = t_exit > near
    return near, np.where(hit, t_exit, near), hit


def _directions(cam: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    d = np.stack(
        [
            (px + 0.5 - cam.cx) / cam.fx,
            (py + 0.5 - cam.cy) / cam.fy,
            np.ones_like(px, dtype=np.float64),
        ],
        axis=-1,
    )
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ cam.extrinsic.A


def generate_ray(
    cam: Camera, px: float, py: float, bounds: tuple[np.ndarray, np.ndarray]
) -> Ray:
    """Ray through the center of a pixel.

    Parameters
    -----------------------
    cam : Camera
        Camera.
    px, py : float
        Pixel coordinates, 0 <= px < width, 0 <= py < height.
    bounds : tuple[np.ndarray, np.ndarray]
        (lo, hi) world box the ray is clipped to.

    Returns
    -----------------------
    Ray
        The clipped ray.
    """
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise RenderError(f"pixel ({px}, {py}) outside the image")
    d = _directions(
        cam,
        np.array([px], dtype=np.float64),
        np.array([py], dtype=np.float64),
    )
    o = cam.center[None]
    near, far, hit = _clip(o, d, bounds)
    return Ray(
        origin=cam.center,
        direction=d[0],
        near=float(near[0]),
        far=float(far[0]),
        hit=bool(hit[0]),
    )


def generate_rays(
    cam: Camera,
    bounds: tuple[np.ndarray, np.ndarray],
    rows: range | None = None,
) -> tuple[torch.Tensor, ...]:
    """Rays through every pixel of a camera, row-major.

    Parameters
    -----------------------
    cam : Camera
        Camera.
    bounds : tuple[np.ndarray, np.ndarray]
        (lo, hi) world box the rays are clipped to.
    rows : range | None
        Image rows to generate. Default is `None` (all rows).

    Returns
    -----------------------
    tuple[torch.Tensor, ...]
        Origins (N, 3), directions (N, 3), near (N,), far (N,), hit (N,).
    """
    rows = range(cam.height) if rows is None else rows
    py, px = np.meshgrid(
        np.arange(rows.start, rows.stop, dtype=np.float64),
        np.arange(cam.width, dtype=np.float64),
        indexing="ij",
    )
    d = _directions(cam, px.ravel(), py.ravel())
    o = np.broadcast_to(cam.center, d.shape)
    near, far, hit = _clip(o, d, bounds)
    return tuple(
        torch.from_numpy(np.ascontiguousarray(a))
        for a in (o, d, near, far, hit)
    )


def composite_step(
    C: torch.Tensor, A: torch.Tensor, a: torch.Tensor, rgb: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """One front-to-back compositing update.

    Returns
    -----------------------
    tuple[torch.Tensor, torch.Tensor]
        C + (1 - A) a rgb and A + (1 - A) a.
    """
    w = (1.0 - A) * a
    return C + w[..., None] * rgb, A + w


def accumulate(
    rgb: torch.Tensor, opacity: torch.Tensor, early_stop: bool = True
) -> MarchResult:
    """Composite a sequence of samples along one ray.

    Parameters
    -----------------------
    rgb : torch.Tensor
        (M, 3) sample colors, front first.
    opacity : torch.Tensor
        (M,) sample opacities in [0, 1].
    early_stop : bool
        Stop once the accumulated alpha reaches 1 - 1e-4. Default is `True`.

    Returns
    -----------------------
    MarchResult
        Color (3,), alpha () and the number of composited samples.
    """
    C = torch.zeros(3, dtype=torch.float64)
    A = torch.zeros((), dtype=torch.float64)
    n = 0
    for m in range(opacity.shape[0]):
        if early_stop and A >= EARLY_STOP:
            break
        C, A = composite_step(C, A, opacity[m], rgb[m])
        n += 1
    return MarchResult(C, A, torch.tensor(n))


def march_rays(
    view: PosedVolumeView,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: torch.Tensor,
    far: torch.Tensor,
    hit: torch.Tensor,
    step: float,
    step_ref: float,
    differentiable: bool = False,
) -> MarchResult:
    """March a batch of rays through a posed volume.

    Samples sit at near + (m + 0.5) step; a sample of alpha s.α has opacity
    clamp(s.α step / step_ref, 0, 1). Rays stop past their far bound and,
    unless `differentiable`, once their alpha reaches 1 - 1e-4.

    Parameters
    -----------------------
    view : PosedVolumeView
        Posed volume.
    origins, dirs : torch.Tensor
        (N, 3) ray origins and unit directions.
    near, far : torch.Tensor
        (N,) parameter bounds.
    hit : torch.Tensor
        (N,) flag of rays intersecting the box.
    step : float
        Marching step, world units.
    step_ref : float
        Reference step of the opacity scaling.
    differentiable : bool
        Disable early stopping. Default is `False`.

    Returns
    -----------------------
    MarchResult
        Color (N, 3), alpha (N,) and samples marched per ray (N,).
    """
    if step <= 0:
        raise RenderError("marching step must be positive")
    N = origins.shape[0]
    C = torch.zeros(N, 3, dtype=torch.float64)
    A = torch.zeros(N, dtype=torch.float64)
    count = torch.zeros(N, dtype=torch.long)
    if N == 0 or not bool(hit.any()):
        return MarchResult(C, A, count)

    span = float((far - near)[hit].max())
    for m in range(max(int(math.ceil(span / step)), 0) + 1):
        t = near + (m + 0.5) * step
        active = hit & (t <= far)
        if not differentiable:
            active &= A.detach() < EARLY_STOP
        idx = active.nonzero().squeeze(1)
        # t grows with m, stopped or exhausted rays stay inactive
        if idx.numel() == 0:
            break

        pts = origins[idx] + t[idx, None] * dirs[idx]
        s = view.evaluate(pts).rgba
        a = (s[:, 3] * (step / step_ref)).clamp(0.0, 1.0)
        Ci, Ai = composite_step(C[idx], A[idx], a, s[:, :3])
        C = C.index_copy(0, idx, Ci)
        A = A.index_copy(0, idx, Ai)
        count[idx] += 1
    return MarchResult(C, A, count)


def march_ray(
    view: PosedVolumeView,
    ray: Ray,
    step: float,
    step_ref: float | None = None,
    differentiable: bool = False,
) -> MarchResult:
    """March a single ray through a posed volume.

    `step_ref` defaults to one canonical voxel edge. Returns the color (3,),
    the alpha and the number of samples marched; rays flagged as missing the
    box are not marched.
    """
    if step_ref is None:
        step_ref = default_steps(view.canonical.box)[1]
    res = march_rays(
        view,
        torch.as_tensor(ray.origin, dtype=torch.float64)[None],
        torch.as_tensor(ray.direction, dtype=torch.float64)[None],
        torch.tensor([ray.near], dtype=torch.float64),
        torch.tensor([ray.far], dtype=torch.float64),
        torch.tensor([ray.hit]),
        step,
        step_ref,
        differentiable,
    )
    return MarchResult(res.rgb[0], res.alpha[0], res.samples[0])


def default_steps(box: GridBox) -> tuple[float, float]:
    """Half and one canonical voxel edge: (step, step_ref)."""
    edge = float(np.min(box.voxel_size))
    return 0.5 * edge, edge


def render_image(
    view: PosedVolumeView,
    cam: Camera,
    step: float | None = None,
    step_ref: float | None = None,
    differentiable: bool = False,
    workers: int = 1,
) -> RenderedImage:
    """Render a posed volume from a camera.

    The image is marched in fixed blocks of rows, so the result does not
    depend on the number of workers.

    Parameters
    -----------------------
    view : PosedVolumeView
        Posed volume.
    cam : Camera
        Camera.
    step : float | None
        Marching step. Default is `None` (half a canonical voxel).
    step_ref : float | None
        Opacity reference step. Default is `None` (one canonical voxel).
    differentiable : bool
        Disable early stopping. Default is `False`.
    workers : int
        Threads marching row blocks. Default is 1.

    Returns
    -----------------------
    RenderedImage
        The render.
    """
    d_step, d_ref = default_steps(view.canonical.box)
    step = d_step if step is None else step
    step_ref = d_ref if step_ref is None else step_ref
    bounds = view.bounds()

    def block(r0: int) -> MarchResult:
        rows = range(r0, min(r0 + CHUNK_ROWS, cam.height))
        o, d, near, far, hit = generate_rays(cam, bounds, rows)
        return march_rays(
            view, o, d, near, far, hit, step, step_ref, differentiable
        )

    starts = range(0, cam.height, CHUNK_ROWS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block, starts))
    else:
        parts = [block(r0) for r0 in starts]

    rgb = torch.cat([p.rgb for p in parts]).reshape(cam.height, cam.width, 3)
    alpha = torch.cat([p.alpha for p in parts]).reshape(cam.height, cam.width)
    return RenderedImage(rgb=rgb, alpha=alpha)


def composite(img: RenderedImage, bg) -> torch.Tensor:
    """Composite a render over a background.

    Parameters
    -----------------------
    img : RenderedImage
        Premultiplied render.
    bg : array-like
        RGB color (3,) or image (height, width, 3), values in [0, 1].

    Returns
    -----------------------
    torch.Tensor
        (height, width, 3) image I + (1 - α) bg.

    Raises
    -----------------------
    RenderError
        If a background image does not match the render size.
    """
    bg = torch.as_tensor(bg, dtype=torch.float64)
    if bg.ndim == 3 and bg.shape != img.rgb.shape:
        raise RenderError(
            f"background {tuple(bg.shape)} does not match image "
            f"{tuple(img.rgb.shape)}"
        )
    if bg.ndim not in (1, 3):
        raise RenderError("background must be a color or an image")
    return img.rgb + (1.0 - img.alpha)[..., None] * bg


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits."""
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, rgb, alpha=None):
    """Write an 8-bit RGB or RGBA PNG.

    Parameters
    -----------------------
    path : str | Path
        Destination file.
    rgb : array-like
        (height, width, 3) color in [0, 1], clamped on write.
    alpha : array-like | None
        (height, width) alpha written as the A channel. Default is `None`.
    """
    rgb = to_bytes(np.asarray(torch.as_tensor(rgb).detach()))
    if alpha is None:
        Image.fromarray(rgb, mode="RGB").save(path)
        return
    a = to_bytes(np.asarray(torch.as_tensor(alpha).detach()))
    Image.fromarray(np.dstack([rgb, a]), mode="RGBA").save(path)


def write_mask(path: str | Path, mask):
    """Write a binary mask as an 8-bit L PNG (0 / 255)."""
    m = np.asarray(torch.as_tensor(mask).detach()).astype(bool)
    Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(path)


def read_png(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an 8-bit PNG as float color and alpha.

    Returns
    -----------------------
    tuple[np.ndarray, np.ndarray]
        (height, width, 3) color and (height, width) alpha in [0, 1]; alpha
        is 1 for images without an A channel.

    Raises
    -----------------------
    FileNotFoundError
        If the file does not exist.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGBA") if im.mode != "RGBA" else im.copy()
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{path} not found") from err
    data = np.asarray(im, dtype=np.float64) / 255.0
    return data[..., :3], data[..., 3]
