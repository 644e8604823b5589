"""CLI command functions.

Every command takes a resolved `RunConfig`, writes its outputs under
`cfg.out` and prints a summary to the console.

Functions
-----------------------
cmd_synth()
    Generate a synthetic dataset of the capsule figure.
cmd_filter()
    Filter an annotation manifest of in-the-wild frames.
cmd_fit()
    Fit a model to a dataset.
cmd_eval()
    Evaluate a checkpoint on a dataset split.
cmd_render()
    Render a checkpoint in a single pose, along a pose sequence or on a
    turntable.
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
from pathlib import Path

import numpy as np
import yaml
from rich.console import Console
from rich.progress import Progress
from rich.table import Table

from modules.deform import CharacterModel
from modules.deform import load_model
from modules.filterpipe import average_rest_joints
from modules.filterpipe import filter_dataset
from modules.filterpipe import write_crops
from modules.filterpipe import write_report
from modules.fit import DivergenceError
from modules.fit import EvalResult
from modules.fit import FitResult
from modules.fit import evaluate
from modules.fit import fit
from modules.fit import load_frames
from modules.fit import save_checkpoint
from modules.fit import weight_agreement
from modules.kinematics import Pose
from modules.kinematics import Skeleton
from modules.kinematics import read_skeleton_config
from modules.manifest import ManifestError
from modules.manifest import ManifestHandler
from modules.manifest import read_poses
from modules.manifest import read_records
from modules.manifest import write_records
from modules.render import Camera
from modules.render import orbit_cameras
from modules.render import render_image
from modules.render import write_png
from modules.schemas import AnnotatedFrame
from modules.schemas import CameraRecord
from modules.schemas import RunConfig
from modules.session import ConfigError
from modules.synthdata import FigureSpec
from modules.synthdata import figure_model
from modules.synthdata import generate_dataset
from modules.synthdata import interior_region
from modules.synthdata import sample_cameras
from modules.synthdata import sample_poses


logger = logging.getLogger(__name__)

console = Console()
# Emphasis formatting - rich
em = "[bold green]"


def _require(cfg: RunConfig, *fields: str):
    for name in fields:
        if getattr(cfg, name) is None:
            raise ConfigError(f"{cfg.command} needs a {name} path")


def _load_manifest(cfg: RunConfig) -> tuple[ManifestHandler, Path]:
    handler = ManifestHandler()
    handler.load(cfg.dataset)
    root = Path(cfg.dataset).parent
    missing = handler.missing(root)
    if missing:
        raise ManifestError(
            f"{cfg.dataset} :: missing files :: {', '.join(missing)}"
        )
    return handler, root


def cmd_synth(cfg: RunConfig) -> ManifestHandler:
    """Generate a synthetic dataset of the capsule figure.

    The dataset (images, masks, manifest.jsonl and the ground-truth figure
    checkpoint) is written to `cfg.out`.

    Raises
    -----------------------
    ConfigError
        If no skeleton file is given.
    """
    _require(cfg, "skeleton")
    spec = FigureSpec.from_config(read_skeleton_config(cfg.skeleton))
    s = cfg.synth

    model = figure_model(spec, cfg.grid.canonical)
    poses = sample_poses(spec.skeleton, s.poses, s.max_angle, cfg.seed)
    cams = sample_cameras(
        s.cameras, s.train_radius, s.image_size, s.image_size, s.focal_scale
    )
    handler = generate_dataset(
        model,
        poses,
        cams,
        cfg.out,
        holdout_poses=s.holdout_poses,
        holdout_cameras=s.holdout_cameras,
        seed=cfg.seed,
        test_radius=s.test_radius,
        workers=cfg.fit.workers,
        show_progress=True,
    )
    counts = handler.summarize()
    console.print(f"{em}frames[/] :: {len(handler.records)}")
    console.print(f"train={counts['train']} test={counts['test']}")
    return handler


def cmd_filter(cfg: RunConfig) -> list[AnnotatedFrame]:
    """Filter an annotation manifest of in-the-wild frames.

    Writes report.csv, the crops of the kept frames, their manifest
    manifest.jsonl and, when annotations carry rest joints,
    canonical_joints.yaml.

    Raises
    -----------------------
    ConfigError
        If no annotation manifest is given.
    """
    _require(cfg, "dataset")
    out = Path(cfg.out)
    root = Path(cfg.dataset).parent
    entries = read_records(cfg.dataset, AnnotatedFrame)

    report = filter_dataset(entries, root, cfg.filter, cfg.fit.workers)
    write_report(out / "report.csv", report)
    kept = write_crops(report, root, out, cfg.filter)
    write_records(out / "manifest.jsonl", kept)

    anns = list(report.annotations.values())
    if any(a.joints for a in anns):
        joints = average_rest_joints(anns)
        with open(out / "canonical_joints.yaml", "w", encoding="utf-8") as f:
            yaml.safe_dump({"joints": joints.tolist()}, f)

    table = Table()
    table.add_column(f"{em}Rule[/]")
    table.add_column(f"{em}Dropped[/]")
    for rule, n in report.drops().items():
        table.add_row(rule, str(n))
    console.print(table)
    console.print(f"kept={len(kept)} dropped={len(entries) - len(kept)}")
    return kept


def _fit_skeleton(cfg: RunConfig, root: Path) -> Skeleton:
    if cfg.skeleton is not None:
        return Skeleton.from_config(read_skeleton_config(cfg.skeleton))
    figure = root / "figure" / "skeleton.yaml"
    if figure.is_file():
        return Skeleton.from_config(read_skeleton_config(figure))
    raise ConfigError(f"{cfg.command} needs a skeleton path")


def _fit_canonical(cfg: RunConfig, skel: Skeleton) -> Pose:
    """Zero-rotation canonical pose, on the averaged rest joints if given."""
    if cfg.canonical is None:
        return Pose.canonical(skel)
    with open(cfg.canonical, "r", encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigError(f"{cfg.canonical} :: invalid YAML") from err
    try:
        joints = np.asarray(doc["joints"], dtype=np.float64)
    except (TypeError, KeyError, ValueError) as err:
        raise ConfigError(f"{cfg.canonical} :: no joints list") from err
    if joints.shape != (skel.K, 3):
        raise ConfigError(
            f"{cfg.canonical} :: joints {joints.shape}, expected {(skel.K, 3)}"
        )
    return Pose(joints=joints, angles=np.zeros_like(joints))


def cmd_fit(cfg: RunConfig) -> FitResult:
    """Fit a model to a dataset.

    The skeleton comes from `cfg.skeleton` or, for synthetic datasets, from
    the figure checkpoint next to the manifest. The canonical pose rests on
    the joints of `cfg.canonical` when given, and is stored in the
    checkpoint header. The checkpoint is written to
    <out>/checkpoint and the loss log to <out>/fit.log; held-out frames are
    evaluated every `cfg.fit.eval_every` iterations.

    Raises
    -----------------------
    ConfigError
        - If no dataset is given.
        - If the dataset has no training frames.
        - If the canonical joints do not fit the skeleton.
    DivergenceError
        If the loss diverges; the last finite parameters are saved first.
    """
    _require(cfg, "dataset")
    out = Path(cfg.out)
    handler, root = _load_manifest(cfg)
    skel = _fit_skeleton(cfg, root)
    canonical = _fit_canonical(cfg, skel)

    train = handler.query("train")
    if not train:
        raise ConfigError(f"{cfg.dataset} :: empty dataset")
    frames = load_frames(train, root)
    test = load_frames(handler.query("test"), root) or None

    try:
        res = fit(
            frames,
            skel,
            canonical,
            cfg.grid,
            cfg.fit,
            eval_frames=test,
            log_path=out / "fit.log",
            show_progress=True,
        )
    except DivergenceError as err:
        if err.params is not None:
            save_checkpoint(err.params, skel, canonical, out / "checkpoint")
        raise
    save_checkpoint(res.params, skel, canonical, out / "checkpoint")

    console.print(f"{em}iterations[/] :: {len(res.losses)}")
    if res.losses:
        console.print(f"{em}final loss[/] :: {res.losses[-1]:.6g}")
    return res


def _agreement(
    model: CharacterModel, truth: CharacterModel, cfg: RunConfig
) -> float:
    """Weight agreement with a ground-truth figure.

    With a figure section in the skeleton the region is the capsule
    interior one voxel deep, otherwise every foreground voxel.
    """
    box = truth.weights.box
    doc = read_skeleton_config(cfg.skeleton) if cfg.skeleton else None
    if doc is not None and doc.figure is not None:
        spec = FigureSpec.from_config(doc)
        margin = float(box.voxel_size.min())
        region = interior_region(spec, truth.canonical_pose, box, margin)
    else:
        region = truth.weights.values[..., -1] < 0.5
    return weight_agreement(model.weights, truth.weights, region)


def cmd_eval(cfg: RunConfig) -> EvalResult:
    """Evaluate a checkpoint on a dataset split.

    Prints PSNR and MSE of `cfg.split` and, when the dataset carries a
    ground-truth figure checkpoint, the weight agreement with it.

    Raises
    -----------------------
    ConfigError
        - If the checkpoint or dataset is missing.
        - If the split is empty.
    """
    _require(cfg, "checkpoint", "dataset")
    model = load_model(cfg.checkpoint)
    handler, root = _load_manifest(cfg)
    records = handler.query(cfg.split)
    if not records:
        raise ConfigError(f"{cfg.dataset} :: empty {cfg.split} split")

    res = evaluate(
        model,
        load_frames(records, root),
        step=cfg.fit.step,
        step_ref=cfg.fit.step_ref,
        workers=cfg.fit.workers,
    )
    table = Table()
    table.add_column(f"{em}Split[/]")
    table.add_column(f"{em}Frames[/]")
    table.add_column(f"{em}PSNR[/]")
    table.add_column(f"{em}MSE[/]")
    table.add_row(
        cfg.split, str(len(records)), f"{res.psnr:.2f}", f"{res.mse:.2f}"
    )
    console.print(table)

    if (root / "figure" / "model.yaml").is_file():
        truth = load_model(root / "figure")
        score = _agreement(model, truth, cfg)
        console.print(f"{em}weight agreement[/] :: {score:.3f}")
    return res


def _render_camera(cfg: RunConfig) -> tuple[Camera, Pose | None]:
    """Camera of the single and retarget modes and the pose of its frame.

    Manifest sources give the camera and pose of `cfg.render.frame`, record
    files only a camera; without a source the first turntable camera is
    used.
    """
    r = cfg.render
    if r.camera is None:
        cam = orbit_cameras(
            1,
            r.radius,
            r.elevation,
            r.image_size,
            r.image_size,
            focal_scale=r.focal_scale,
        )[0]
        return cam, None

    if Path(r.camera).suffix == ".jsonl":
        handler = ManifestHandler()
        handler.load(r.camera)
        found = [x for x in handler.query() if x.frame == r.frame]
        if not found:
            raise ConfigError(f"{r.camera} :: no frame {r.frame}")
        rec = found[0]
        return Camera.from_record(rec.camera), Pose.from_record(rec.pose)

    with open(r.camera, "r", encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as err:
            raise ConfigError(f"{r.camera} :: invalid YAML") from err
    return Camera.from_record(CameraRecord.model_validate(doc)), None


def cmd_render(cfg: RunConfig) -> list[Path]:
    """Render a checkpoint.

    "single" renders one pose from one camera, "retarget" every pose of
    `cfg.render.poses` from that camera and "turntable" the single pose
    from `cfg.render.frames` cameras on a circle. The single pose is the
    first of the pose file, else the pose of the camera manifest frame,
    else the canonical pose. The camera comes from `cfg.render.camera`
    (see `_render_camera`). Images are written to <out>/frames/ with
    zero-padded indices.

    Raises
    -----------------------
    ConfigError
        - If no checkpoint is given.
        - If "retarget" has no pose file.
        - If the camera manifest lacks the requested frame.
    ManifestError
        If a pose does not fit the checkpoint skeleton.
    KinematicsError
        If the camera frame pose does not fit the checkpoint skeleton.
    """
    _require(cfg, "checkpoint")
    r = cfg.render
    model = load_model(cfg.checkpoint)
    cam, frame_pose = _render_camera(cfg)

    if r.poses is not None:
        poses = read_poses(r.poses, model.skeleton.K)
    elif r.mode == "retarget":
        raise ConfigError("retarget needs a poses path")
    elif frame_pose is not None:
        frame_pose.check(model.skeleton)
        poses = [frame_pose]
    else:
        poses = [model.canonical_pose]
    if not poses:
        raise ConfigError(f"{r.poses} :: no poses")

    if r.mode == "turntable":
        cams = orbit_cameras(
            r.frames,
            r.radius,
            r.elevation,
            r.image_size,
            r.image_size,
            focal_scale=r.focal_scale,
        )
        jobs = [(poses[0], c) for c in cams]
    elif r.mode == "retarget":
        jobs = [(pose, cam) for pose in poses]
    else:
        jobs = [(poses[0], cam)]

    frames_dir = Path(cfg.out) / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with Progress(transient=True) as bar:
        task = bar.add_task(r.mode, total=len(jobs))
        for i, (pose, cam) in enumerate(jobs):
            img = render_image(
                model.pose(pose),
                cam,
                step=cfg.fit.step,
                step_ref=cfg.fit.step_ref,
            )
            path = frames_dir / f"{i:05d}.png"
            write_png(path, img.rgb, img.alpha if r.rgba else None)
            paths.append(path)
            bar.advance(task)
    logger.info("%d frames written to %s", len(paths), frames_dir)
    console.print(f"{em}frames[/] :: {len(paths)}")
    return paths
