"""Fitting of the canonical volume and weight offsets to posed images.

The free variables are the raw (pre-softplus) canonical RGBα grid and the
weight offsets ΔW. Each step renders a minibatch of frames in differentiable
mode, composites rendering and ground truth over a per-frame random solid
color, and takes an Adam step on the batch-mean gradient.

Classes
-----------------------
FitError
    Exception raised for errors in fitting and evaluation.
DivergenceError
    Exception raised when the loss or the parameters stop being finite.
Frame
    Posed, calibrated image used for fitting or evaluation.
FitParams
    Free variables of the fit.
AdamState
    Moment buffers and hyperparameters of Adam.
FitResult
    Fitted parameters and loss log.
EvalResult
    PSNR and MSE of a model over a set of frames.

Functions
-----------------------
load_frames()
    Read the images of manifest records.
background_color()
    Solid background of a frame at an iteration.
loss_l2()
    Summed squared difference of two images.
loss_l1()
    Summed absolute difference over a foreground mask.
frame_loss()
    Loss of the parameters on one frame.
backward()
    Loss and gradients of the parameters on one frame.
adam_step()
    One Adam update with bias correction.
fit()
    Minibatch Adam over a set of frames.
psnr()
    Peak signal-to-noise ratio of an 8-bit MSE.
evaluate()
    PSNR and MSE of a model over a set of frames.
weight_agreement()
    Fraction of voxels where two weight volumes pick the same bone.
save_checkpoint()
    Write fitted parameters as a checkpoint directory.
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
from dataclasses import field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from rich.progress import Progress

from modules.deform import CharacterModel
from modules.deform import write_header
from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.render import Camera
from modules.render import composite
from modules.render import read_png
from modules.render import render_image
from modules.render import to_bytes
from modules.schemas import FitConfig
from modules.schemas import FrameRecord
from modules.schemas import GridConfig
from modules.volume import VoxelGrid
from modules.volume import bounding_box
from modules.volume import gaussian_prior
from modules.volume import trilinear_sample
from modules.volume import write_volume


logger = logging.getLogger(__name__)

# softplus⁻¹(0.01)
RAW_INIT = math.log(math.expm1(0.01))


class FitError(Exception):
    """Exception raised for errors in fitting and evaluation."""


class DivergenceError(FitError):
    """Exception raised when the loss or the parameters stop being finite.

    Attributes
    -----------------------
    params : FitParams | None
        Last parameters with a finite loss.
    """

    def __init__(self, message: str, params: "FitParams | None" = None):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class Frame:
    """Posed, calibrated image used for fitting or evaluation.

    Attributes
    -----------------------
    name : str
        Identifier used in diagnostics.
    pose : Pose
        Target pose.
    camera : Camera
        Camera.
    rgb : torch.Tensor
        (height, width, 3) color, premultiplied by `alpha`.
    alpha : torch.Tensor
        (height, width) ground-truth alpha.
    mask : torch.Tensor
        (height, width) float foreground mask in {0, 1}.
    """

    name: str
    pose: Pose
    camera: Camera
    rgb: torch.Tensor
    alpha: torch.Tensor
    mask: torch.Tensor

    def truth(self, bg) -> torch.Tensor:
        """Masked ground truth composited over `bg`."""
        bg = torch.as_tensor(bg, dtype=torch.float64)
        m = self.mask[..., None]
        return self.rgb * m + (1.0 - self.alpha[..., None] * m) * bg


def load_frames(records: list[FrameRecord], root: str | Path) -> list[Frame]:
    """Read the images of manifest records.

    Parameters
    -----------------------
    records : list[FrameRecord]
        Manifest records.
    root : str | Path
        Directory the image and mask paths are relative to.

    Returns
    -----------------------
    list[Frame]
        Frames in record order.

    Raises
    -----------------------
    FileNotFoundError
        If an image or mask is missing.
    FitError
        If an image does not match its camera or mask.
    """
    root = Path(root)
    frames = []
    for rec in records:
        camera = Camera.from_record(rec.camera)
        rgb, alpha = read_png(root / rec.image)
        mask, _ = read_png(root / rec.mask)
        if rgb.shape[:2] != (camera.height, camera.width):
            raise FitError(
                f"{root / rec.image} :: image size differs from camera"
            )
        if mask.shape[:2] != rgb.shape[:2]:
            raise FitError(
                f"{root / rec.mask} :: mask size differs from image"
            )
        frames.append(
            Frame(
                name=str(rec.frame),
                pose=Pose.from_record(rec.pose),
                camera=camera,
                rgb=torch.from_numpy(rgb),
                alpha=torch.from_numpy(alpha),
                mask=torch.from_numpy((mask[..., 0] > 0.5).astype(np.float64)),
            )
        )
    return frames


def background_color(seed: int, frame: int, iteration: int) -> np.ndarray:
    """Solid background of a frame at an iteration, uniform in [0, 1]³."""
    return np.random.default_rng([seed, frame, iteration]).uniform(size=3)


@dataclass(frozen=True)
class FitParams:
    """Free variables of the fit.

    Attributes
    -----------------------
    raw_canonical : VoxelGrid
        Pre-softplus RGBα canonical values.
    delta_w : VoxelGrid
        K+1 channel weight offsets ΔW.

    Methods
    -----------------------
    initial()
        Constant canonical volume and zero offsets.
    tensors()
        Parameter tensors in a fixed order.
    with_tensors()
        Parameters with replaced values.
    to_model()
        Activated character model.
    """

    raw_canonical: VoxelGrid
    delta_w: VoxelGrid

    @classmethod
    def initial(
        cls, skel: Skeleton, canonical: Pose, grid: GridConfig
    ) -> "FitParams":
        """Constant canonical volume and zero offsets.

        The canonical values start at softplus⁻¹(0.01) on the default box of
        the canonical skeleton, so the weights start at the Gaussian prior.
        """
        box = bounding_box(skel, canonical, grid.canonical)
        wbox = box.with_dims(grid.weights)
        raw = torch.full((*box.shape, 4), RAW_INIT, dtype=torch.float64)
        delta = torch.zeros((*wbox.shape, skel.K + 1), dtype=torch.float64)
        return cls(
            raw_canonical=VoxelGrid(box=box, values=raw),
            delta_w=VoxelGrid(box=wbox, values=delta, background=True),
        )

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.raw_canonical.values, self.delta_w.values

    def with_tensors(self, values) -> "FitParams":
        raw, delta = values
        return FitParams(
            raw_canonical=self.raw_canonical.replace(raw),
            delta_w=self.delta_w.replace(delta),
        )

    def to_model(
        self, skel: Skeleton, canonical: Pose, prior: VoxelGrid
    ) -> CharacterModel:
        """Activated character model over the weight prior `prior`."""
        return CharacterModel.from_logits(
            skel, canonical, self.raw_canonical, self.delta_w, prior
        )


@dataclass(frozen=True)
class AdamState:
    """Moment buffers and hyperparameters of Adam.

    Attributes
    -----------------------
    m, v : tuple[torch.Tensor, ...]
        First and second moment of every parameter tensor.
    t : int
        Number of steps taken.
    lr, beta1, beta2, eps : float
        Hyperparameters.
    """

    m: tuple[torch.Tensor, ...]
    v: tuple[torch.Tensor, ...]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params, cfg: FitConfig | None = None) -> "AdamState":
        """Zero moments shaped like `params`, hyperparameters from `cfg`."""
        cfg = FitConfig() if cfg is None else cfg
        return cls(
            m=tuple(torch.zeros_like(p) for p in params),
            v=tuple(torch.zeros_like(p) for p in params),
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )


class FitResult(NamedTuple):
    """Fitted parameters and loss log."""

    params: FitParams
    losses: list[float]


class EvalResult(NamedTuple):
    """PSNR (dB) and MSE (8-bit scale) of a model over a set of frames."""

    psnr: float
    mse: float


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise FitError(
            f"images {tuple(a.shape)} and {tuple(b.shape)} differ in shape"
        )


def loss_l2(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Squared difference summed over pixels and channels.

    Raises
    -----------------------
    FitError
        If the images differ in shape.
    """
    _check_shapes(rendered, truth)
    d = rendered - truth
    return (d * d).sum()


def loss_l1(
    rendered: torch.Tensor, truth: torch.Tensor, fg_mask: torch.Tensor
) -> torch.Tensor:
    """Absolute difference summed over the masked pixels and all channels.

    Parameters
    -----------------------
    rendered, truth : torch.Tensor
        (height, width, 3) images.
    fg_mask : torch.Tensor
        (height, width) mask in {0, 1}.

    Returns
    -----------------------
    torch.Tensor
        Scalar loss.

    Raises
    -----------------------
    FitError
        If the images or the mask differ in shape.
    """
    _check_shapes(rendered, truth)
    fg_mask = torch.as_tensor(fg_mask, dtype=torch.float64)
    if fg_mask.shape != rendered.shape[:-1]:
        raise FitError(
            f"mask {tuple(fg_mask.shape)} does not match image "
            f"{tuple(rendered.shape)}"
        )
    return ((rendered - truth).abs() * fg_mask[..., None]).sum()


def frame_loss(
    params: FitParams,
    frame: Frame,
    skel: Skeleton,
    canonical: Pose,
    prior: VoxelGrid,
    cfg: FitConfig,
    bg,
) -> torch.Tensor:
    """Loss of the parameters on one frame.

    The rendering is differentiable with respect to every parameter tensor
    that requires gradients.

    Parameters
    -----------------------
    params : FitParams
        Parameters.
    frame : Frame
        Ground-truth frame.
    skel : Skeleton
        Skeleton.
    canonical : Pose
        Canonical pose.
    prior : VoxelGrid
        Gaussian weight prior on the ΔW grid.
    cfg : FitConfig
        Loss kind, L1 weight and marching steps.
    bg : array-like
        Background color of rendering and ground truth.

    Returns
    -----------------------
    torch.Tensor
        Scalar loss.
    """
    view = params.to_model(skel, canonical, prior).pose(frame.pose)
    img = render_image(
        view, frame.camera, cfg.step, cfg.step_ref, differentiable=True
    )
    rendered = composite(img, bg)
    truth = frame.truth(bg)
    loss = loss_l2(rendered, truth)
    if cfg.loss == "l2+l1":
        loss = loss + cfg.l1_weight * loss_l1(rendered, truth, frame.mask)
    return loss


def backward(
    params: FitParams,
    frame: Frame,
    skel: Skeleton,
    canonical: Pose,
    prior: VoxelGrid,
    cfg: FitConfig,
    bg,
) -> tuple[float, tuple[torch.Tensor, torch.Tensor]]:
    """Loss and gradients of the parameters on one frame.

    Parameters
    -----------------------
    params, frame, skel, canonical, prior, cfg, bg
        As in `frame_loss()`.

    Returns
    -----------------------
    tuple[float, tuple[torch.Tensor, torch.Tensor]]
        The loss and the gradients of (raw canonical, ΔW); samples outside
        the grids contribute nothing.

    Raises
    -----------------------
    DivergenceError
        If the loss is not finite.
    """
    leaves = tuple(
        t.detach().clone().requires_grad_(True) for t in params.tensors()
    )
    loss = frame_loss(
        params.with_tensors(leaves), frame, skel, canonical, prior, cfg, bg
    )
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"frame {frame.name} :: non-finite loss {value}")

    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = tuple(
        torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)
    )
    return value, grads


def adam_step(
    state: AdamState, params, grads
) -> tuple[tuple[torch.Tensor, ...], AdamState]:
    """One Adam update with bias correction.

    Parameters
    -----------------------
    state : AdamState
        Current moments and hyperparameters.
    params : sequence of torch.Tensor
        Parameter tensors.
    grads : sequence of torch.Tensor
        Gradients, shaped like `params`.

    Returns
    -----------------------
    tuple[tuple[torch.Tensor, ...], AdamState]
        Updated parameters and state.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = tuple(b1 * mi + (1.0 - b1) * g for mi, g in zip(state.m, grads))
    v = tuple(b2 * vi + (1.0 - b2) * g * g for vi, g in zip(state.v, grads))
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = tuple(
        p - state.lr * (mi / c1) / (torch.sqrt(vi / c2) + state.eps)
        for p, mi, vi in zip(params, m, v)
    )
    return new, AdamState(
        m=m, v=v, t=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps
    )


@dataclass
class _FitLog:
    path: Path | None
    lines: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def add(self, it: int, loss: float, score: float):
        line = f"{it},{loss:.8g},{score:.6g}"
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def fit(
    frames: list[Frame],
    skel: Skeleton,
    canonical: Pose,
    grid: GridConfig,
    cfg: FitConfig,
    params: FitParams | None = None,
    eval_frames: list[Frame] | None = None,
    log_path: str | Path | None = None,
    show_progress: bool = False,
) -> FitResult:
    """Minibatch Adam over a set of frames.

    Every iteration draws `cfg.batch_size` distinct frames from a generator
    seeded with `cfg.seed`; their gradients are averaged in batch order.

    Parameters
    -----------------------
    frames : list[Frame]
        Training frames.
    skel : Skeleton
        Skeleton.
    canonical : Pose
        Canonical pose.
    grid : GridConfig
        Grid resolutions of the initialization.
    cfg : FitConfig
        Optimization parameters.
    params : FitParams | None
        Starting point. Default is `None` (`FitParams.initial()`).
    eval_frames : list[Frame] | None
        Frames evaluated every `cfg.eval_every` iterations. Default is `None`.
    log_path : str | Path | None
        File receiving the `iter,loss,psnr_eval` lines, truncated first.
        Default is `None`.
    show_progress : bool
        Show a progress bar. Default is `False`.

    Returns
    -----------------------
    FitResult
        Final parameters and the batch loss of every iteration.

    Raises
    -----------------------
    FitError
        If there are no training frames.
    DivergenceError
        If the loss or the parameters stop being finite.
    """
    if not frames:
        raise FitError("no training frames")
    if params is None:
        params = FitParams.initial(skel, canonical, grid)
    prior = gaussian_prior(skel, canonical, params.delta_w.box)
    state = AdamState.create(params.tensors(), cfg)
    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.batch_size, len(frames))
    log = _FitLog(None if log_path is None else Path(log_path))
    losses = []

    logger.info(
        "fitting %d frames, %d iterations, batch %d",
        len(frames),
        cfg.iterations,
        batch_size,
    )

    def run(it: int, i: int):
        bg = background_color(cfg.seed, int(i), it)
        return backward(params, frames[i], skel, canonical, prior, cfg, bg)

    pool = None
    if cfg.workers > 1:
        pool = ThreadPoolExecutor(max_workers=cfg.workers)
    try:
        with Progress(transient=True, disable=not show_progress) as bar:
            task = bar.add_task("fitting", total=cfg.iterations)
            for it in range(1, cfg.iterations + 1):
                batch = rng.choice(len(frames), size=batch_size, replace=False)
                try:
                    if pool is None:
                        parts = [run(it, i) for i in batch]
                    else:
                        parts = list(pool.map(lambda i: run(it, i), batch))
                except DivergenceError as err:
                    raise DivergenceError(
                        f"iteration {it} :: {err}", params
                    ) from err

                loss = sum(p[0] for p in parts) / batch_size
                grads = tuple(
                    sum(p[1][j] for p in parts) / batch_size for j in range(2)
                )
                values, state = adam_step(state, params.tensors(), grads)
                if not all(bool(torch.isfinite(v).all()) for v in values):
                    raise DivergenceError(
                        f"iteration {it} :: non-finite parameters", params
                    )
                params = params.with_tensors(values)
                losses.append(loss)

                score = math.nan
                if eval_frames and cfg.eval_every and it % cfg.eval_every == 0:
                    res = evaluate(
                        params.to_model(skel, canonical, prior),
                        eval_frames,
                        cfg.step,
                        cfg.step_ref,
                    )
                    score = res.psnr
                    logger.info(
                        "iteration %d :: loss %.6g, eval psnr %.2f dB",
                        it,
                        loss,
                        score,
                    )
                log.add(it, loss, score)
                logger.debug("iteration %d :: loss %.6g", it, loss)
                bar.advance(task)
    finally:
        if pool is not None:
            pool.shutdown()

    return FitResult(params=params, losses=losses)


def psnr(mse: float) -> float:
    """Peak signal-to-noise ratio of an 8-bit MSE.

    Returns
    -----------------------
    float
        10 log10(255² / mse) in dB, `math.inf` when mse is 0.

    Raises
    -----------------------
    FitError
        If mse is negative.
    """
    if mse < 0:
        raise FitError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def evaluate(
    model: CharacterModel,
    frames: list[Frame],
    step: float | None = None,
    step_ref: float | None = None,
    workers: int = 1,
) -> EvalResult:
    """PSNR and MSE of a model over a set of frames.

    Renderings and masked ground truths are composited over black and
    quantized to 8 bits; the MSE is averaged over every pixel, channel and
    frame, and the PSNR is taken of the mean.

    Parameters
    -----------------------
    model : CharacterModel
        Model rendered.
    frames : list[Frame]
        Held-out frames.
    step, step_ref : float | None
        Marching steps. Default is `None` (the render defaults).
    workers : int
        Threads per rendering. Default is 1.

    Returns
    -----------------------
    EvalResult
        PSNR and MSE.

    Raises
    -----------------------
    FitError
        If there are no frames.
    """
    if not frames:
        raise FitError("no frames to evaluate")
    black = torch.zeros(3, dtype=torch.float64)
    total = 0.0
    count = 0
    with torch.no_grad():
        for frame in frames:
            img = render_image(
                model.pose(frame.pose), frame.camera, step, step_ref,
                workers=workers,
            )
            rendered = to_bytes(composite(img, black).numpy())
            rendered = rendered.astype(np.float64)
            truth = to_bytes(frame.truth(black).numpy()).astype(np.float64)
            total += float(((rendered - truth) ** 2).sum())
            count += rendered.size
    mse = total / count
    return EvalResult(psnr=psnr(mse), mse=mse)


def weight_agreement(
    weights: VoxelGrid, reference: VoxelGrid, region: torch.Tensor
) -> float:
    """Fraction of voxels where two weight volumes pick the same bone.

    Parameters
    -----------------------
    weights : VoxelGrid
        K+1 channel weights, sampled at the nodes of `reference`.
    reference : VoxelGrid
        K+1 channel reference weights.
    region : torch.Tensor
        Boolean (nz, ny, nx) selection of `reference` nodes.

    Returns
    -----------------------
    float
        Share of selected nodes with equal argmax channel.

    Raises
    -----------------------
    FitError
        If the grids differ in channels or the region is empty.
    """
    if weights.C != reference.C:
        raise FitError(
            f"weights have {weights.C} channels, reference {reference.C}"
        )
    region = torch.as_tensor(region, dtype=torch.bool)
    if not bool(region.any()):
        raise FitError("empty agreement region")
    with torch.no_grad():
        sampled = trilinear_sample(weights, reference.box.centers())
    same = sampled.argmax(dim=-1) == reference.values.argmax(dim=-1)
    return float(same[region].double().mean())


def save_checkpoint(
    params: FitParams, skel: Skeleton, canonical: Pose, out_dir: str | Path
):
    """Write fitted parameters as a checkpoint directory.

    The directory holds raw_canonical.vol and delta_w.vol next to the
    skeleton and model headers, and is read back by `load_model()`.
    """
    out_dir = Path(out_dir)
    write_header(out_dir, "fitted", skel, canonical)
    write_volume(params.raw_canonical, out_dir / "raw_canonical.vol")
    write_volume(params.delta_w, out_dir / "delta_w.vol")
    logger.info("checkpoint written to %s", out_dir)
