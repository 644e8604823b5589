"""Filtering and crop normalization of in-the-wild frames.

Frames arrive with precomputed estimator outputs (2D keypoints, projected 3D
keypoints, a person mask and a body-model silhouette). A frame is kept when
the whole body is visible, the 3D pose agrees with the 2D one and the person
mask covers the silhouette. Rules run in that order; the first failing rule
is the drop reason.

Classes
-----------------------
FilterError
    Exception raised for invalid frames and annotations.
CropResult
    Normalized crop of a frame.
FilterReport
    Outcome of filtering a manifest.

Functions
-----------------------
read_annotation()
    Parse and validate an annotation YAML file.
silhouette_coverage()
    Fraction of the silhouette covered by the person mask.
pose_consistency()
    Check that projected 3D keypoints agree with the 2D ones.
full_body_check()
    Check that both wrists and both ankles are detected.
crop_transform()
    Similarity transform centering and scaling a bounding box.
normalize_crop()
    Crop, scale and center the subject of a frame.
filter_frame()
    Run the rules on a single frame.
filter_dataset()
    Filter an annotation manifest.
write_report()
    Write the per-frame report of a filtering run.
average_rest_joints()
    Canonical joints averaged over annotated frames.
write_crops()
    Normalize and write the kept frames.
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

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import NamedTuple
from typing import Optional

import numpy as np
import yaml
from PIL import Image
from pydantic import ValidationError

from modules.render import read_png
from modules.render import write_mask
from modules.render import write_png
from modules.schemas import AnnotatedFrame
from modules.schemas import AnnotationRecord
from modules.schemas import CameraRecord
from modules.schemas import FilterConfig


logger = logging.getLogger(__name__)

RULES = ("full_body", "pose_consistency", "silhouette")


class FilterError(Exception):
    """Exception raised for invalid frames and annotations."""


def read_annotation(path: str | Path) -> AnnotationRecord:
    """Parse and validate an annotation YAML file.

    Raises
    -----------------------
    FileNotFoundError
        If the file does not exist.
    FilterError
        If the document is malformed.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{path} not found") from err
    except yaml.YAMLError as err:
        raise FilterError(f"{path} :: invalid YAML") from err

    try:
        return AnnotationRecord.model_validate(doc)
    except ValidationError as err:
        first = err.errors()[0]["msg"]
        raise FilterError(f"{path} :: invalid annotation :: {first}") from err


def _read_mask(path: str | Path) -> np.ndarray:
    rgb, _ = read_png(path)
    return rgb[..., 0] > 0.5


def silhouette_coverage(person_mask, silhouette) -> float:
    """Fraction of the silhouette covered by the person mask.

    Parameters
    -----------------------
    person_mask, silhouette : array-like
        Boolean masks of equal shape.

    Returns
    -----------------------
    float
        |person_mask ∩ silhouette| / |silhouette|, in [0, 1].

    Raises
    -----------------------
    FilterError
        - If the shapes differ.
        - If the silhouette is empty.
    """
    pm = np.asarray(person_mask, dtype=bool)
    sil = np.asarray(silhouette, dtype=bool)
    if pm.shape != sil.shape:
        raise FilterError(
            f"person mask {pm.shape} and silhouette {sil.shape} differ"
        )
    total = int(np.count_nonzero(sil))
    if total == 0:
        raise FilterError("empty silhouette")
    return int(np.count_nonzero(pm & sil)) / total


def pose_consistency(
    projected,
    keypoints,
    bbox,
    tolerance: float = 0.05,
    confidence: float = 0.3,
) -> bool:
    """Check that projected 3D keypoints agree with the 2D ones.

    The mean pixel distance over keypoints with confidence at least
    `confidence`, divided by the bounding-box diagonal, must not exceed
    `tolerance`.

    Parameters
    -----------------------
    projected : array-like
        (N, 2) projected 3D keypoints.
    keypoints : array-like
        (N, 3) 2D keypoints as (x, y, confidence).
    bbox : array-like
        Subject box (x0, y0, x1, y1).
    tolerance : float
        Max normalized mean distance. Default is 0.05.
    confidence : float
        Confidence floor, inclusive. Default is 0.3.

    Returns
    -----------------------
    bool
        Whether the frame passes.

    Raises
    -----------------------
    FilterError
        - If the keypoint lists are not aligned.
        - If no keypoint is confident.
    """
    proj = np.asarray(projected, dtype=np.float64).reshape(-1, 2)
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    if len(proj) != len(kp):
        raise FilterError(
            f"{len(proj)} projected keypoints, {len(kp)} 2D keypoints"
        )
    sel = kp[:, 2] >= confidence
    if not sel.any():
        raise FilterError("no confident keypoints")
    x0, y0, x1, y1 = bbox
    diag = np.hypot(x1 - x0, y1 - y0)
    dist = np.linalg.norm(proj[sel] - kp[sel, :2], axis=-1)
    return bool(dist.mean() / diag <= tolerance)


def full_body_check(keypoints, cfg: Optional[FilterConfig] = None) -> bool:
    """Check that both wrists and both ankles are detected.

    Keypoints missing from the list count as undetected.
    """
    cfg = cfg or FilterConfig()
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    for i in (*cfg.wrists, *cfg.ankles):
        if i >= len(kp) or kp[i, 2] < cfg.confidence:
            return False
    return True


def crop_transform(
    bbox, crop_size: int = 512, subject_size: int = 400
) -> tuple[float, np.ndarray]:
    """Similarity transform centering and scaling a bounding box.

    Pixel coordinates map as u = s * x + t; the box center goes to the crop
    center and the longer box side to `subject_size` pixels.

    Returns
    -----------------------
    tuple[float, np.ndarray]
        Scale s and (2,) translation t.

    Raises
    -----------------------
    FilterError
        If the box is degenerate.
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    w, h = x1 - x0, y1 - y0
    if not (w > 0.0 and h > 0.0):
        raise FilterError(f"degenerate bbox {tuple(bbox)}")
    s = subject_size / max(w, h)
    center = np.array([0.5 * (x0 + x1), 0.5 * (y0 + y1)])
    return s, 0.5 * crop_size - s * center


class CropResult(NamedTuple):
    """Normalized crop of a frame.

    Attributes
    -----------------------
    image : np.ndarray
        (size, size, 3) color in [0, 1], black outside the source.
    mask : np.ndarray
        (size, size) boolean mask, empty outside the source.
    scale : float
        Scale of the similarity transform.
    shift : np.ndarray
        (2,) translation of the similarity transform.
    camera : Optional[CameraRecord]
        Camera with updated intrinsics, when one was given.
    """

    image: np.ndarray
    mask: np.ndarray
    scale: float
    shift: np.ndarray
    camera: Optional[CameraRecord]


def normalize_crop(
    image,
    mask,
    bbox,
    camera: Optional[CameraRecord] = None,
    crop_size: int = 512,
    subject_size: int = 400,
) -> CropResult:
    """Crop, scale and center the subject of a frame.

    Parameters
    -----------------------
    image : array-like
        (height, width, 3) color in [0, 1].
    mask : array-like
        (height, width) boolean mask.
    bbox : array-like
        Subject box (x0, y0, x1, y1).
    camera : Optional[CameraRecord]
        Camera of the frame. Default is `None`.
    crop_size : int
        Side of the output. Default is 512.
    subject_size : int
        Longer box side in the output. Default is 400.

    Returns
    -----------------------
    CropResult
        The crop, its transform and the updated camera.

    Raises
    -----------------------
    FilterError
        - If the box is degenerate.
        - If image and mask sizes differ.
    """
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if img.shape[:2] != m.shape:
        raise FilterError(f"image {img.shape} and mask {m.shape} differ")
    s, t = crop_transform(bbox, crop_size, subject_size)

    # PIL maps output pixels back to the source
    inverse = (1.0 / s, 0.0, -t[0] / s, 0.0, 1.0 / s, -t[1] / s)
    size = (crop_size, crop_size)
    src = Image.fromarray(
        np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), mode="RGB"
    )
    out = src.transform(
        size, Image.Transform.AFFINE, inverse, Image.Resampling.BILINEAR
    )
    src_mask = Image.fromarray(m.astype(np.uint8) * 255, mode="L")
    out_mask = src_mask.transform(
        size, Image.Transform.AFFINE, inverse, Image.Resampling.NEAREST
    )

    cam = None
    if camera is not None:
        fx, fy, cx, cy = camera.intrinsics
        cam = camera.model_copy(
            update={
                "intrinsics": [
                    s * fx,
                    s * fy,
                    s * cx + float(t[0]),
                    s * cy + float(t[1]),
                ],
                "size": [crop_size, crop_size],
            }
        )
    return CropResult(
        image=np.asarray(out, dtype=np.float64) / 255.0,
        mask=np.asarray(out_mask) > 127,
        scale=s,
        shift=t,
        camera=cam,
    )


def filter_frame(
    annotation: AnnotationRecord, root: str | Path, cfg: FilterConfig
) -> Optional[str]:
    """Run the rules on a single frame.

    Parameters
    -----------------------
    annotation : AnnotationRecord
        Estimator outputs of the frame.
    root : str | Path
        Directory the mask paths are relative to.
    cfg : FilterConfig
        Thresholds and keypoint schema.

    Returns
    -----------------------
    Optional[str]
        Name of the first failing rule, `None` if the frame is kept.

    Raises
    -----------------------
    FilterError
        If the frame is invalid (no confident keypoints, empty silhouette).
    FileNotFoundError
        If a mask is missing.
    """
    if not full_body_check(annotation.keypoints, cfg):
        return "full_body"
    if not pose_consistency(
        annotation.projected,
        annotation.keypoints,
        annotation.bbox,
        cfg.tolerance,
        cfg.confidence,
    ):
        return "pose_consistency"
    root = Path(root)
    cov = silhouette_coverage(
        _read_mask(root / annotation.person_mask),
        _read_mask(root / annotation.silhouette),
    )
    if cov < cfg.coverage:
        return "silhouette"
    return None


@dataclass
class FilterReport:
    """Outcome of filtering a manifest.

    Attributes
    -----------------------
    kept : list[AnnotatedFrame]
        Frames passing every rule, in manifest order.
    lines : list[tuple[str, str, bool]]
        (frame, rule, kept) for every rule evaluated on every frame.
    annotations : dict[str, AnnotationRecord]
        Parsed annotations of the kept frames.
    """

    kept: list[AnnotatedFrame] = field(default_factory=list)
    lines: list[tuple[str, str, bool]] = field(default_factory=list)
    annotations: dict[str, AnnotationRecord] = field(default_factory=dict)

    def drops(self) -> dict[str, int]:
        """Dropped frames per rule, including "invalid" and "missing"."""
        res = {r: 0 for r in (*RULES, "invalid", "missing")}
        for _, rule, kept in self.lines:
            if not kept:
                res[rule] += 1
        return res


def _evaluate(
    entry: AnnotatedFrame, root: Path, cfg: FilterConfig
) -> tuple[Optional[AnnotationRecord], list[tuple[str, str, bool]]]:
    try:
        ann = read_annotation(root / entry.annotation)
        reason = filter_frame(ann, root / Path(entry.annotation).parent, cfg)
    except FileNotFoundError as err:
        logger.debug("frame %s :: %s", entry.frame, err)
        return None, [(entry.frame, "missing", False)]
    except FilterError as err:
        logger.debug("frame %s :: %s", entry.frame, err)
        return None, [(entry.frame, "invalid", False)]

    lines = []
    for rule in RULES:
        lines.append((entry.frame, rule, rule != reason))
        if rule == reason:
            return None, lines
    return ann, lines


def filter_dataset(
    entries: list[AnnotatedFrame],
    root: str | Path,
    cfg: Optional[FilterConfig] = None,
    workers: int = 1,
) -> FilterReport:
    """Filter an annotation manifest.

    Frames whose annotation or masks are missing are dropped with reason
    "missing", frames without confident keypoints or with an empty
    silhouette with reason "invalid". Filtering the kept frames again
    drops nothing.

    Parameters
    -----------------------
    entries : list[AnnotatedFrame]
        Manifest entries.
    root : str | Path
        Directory the annotation paths are relative to.
    cfg : Optional[FilterConfig]
        Thresholds. Default is `None` (defaults).
    workers : int
        Threads checking frames. Default is 1.

    Returns
    -----------------------
    FilterReport
        Kept frames and per-rule outcomes, in manifest order.
    """
    cfg = cfg or FilterConfig()
    root = Path(root)

    def run(entry):
        return _evaluate(entry, root, cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, entries))
    else:
        results = [run(e) for e in entries]

    report = FilterReport()
    for entry, (ann, lines) in zip(entries, results):
        report.lines.extend(lines)
        if ann is not None:
            report.kept.append(entry)
            report.annotations[entry.frame] = ann
    logger.info(
        "%d of %d frames kept, drops: %s",
        len(report.kept),
        len(entries),
        report.drops(),
    )
    return report


def write_report(path: str | Path, report: FilterReport):
    """Write `frame,rule,kept|dropped` CSV lines."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for frame, rule, kept in report.lines:
            writer.writerow([frame, rule, "kept" if kept else "dropped"])


def average_rest_joints(annotations: list[AnnotationRecord]) -> np.ndarray:
    """Canonical joints averaged over annotated frames.

    Frames without estimated joints are skipped.

    Returns
    -----------------------
    np.ndarray
        (J, 3) mean rest joints.

    Raises
    -----------------------
    FilterError
        - If no frame carries joints.
        - If joint counts differ between frames.
    """
    joints = [np.asarray(a.joints) for a in annotations if a.joints]
    if not joints:
        raise FilterError("no annotations carry rest joints")
    counts = {len(j) for j in joints}
    if len(counts) > 1:
        raise FilterError(f"joint counts differ: {sorted(counts)}")
    return np.mean(np.stack(joints), axis=0)


def write_crops(
    report: FilterReport,
    root: str | Path,
    out_dir: str | Path,
    cfg: Optional[FilterConfig] = None,
) -> list[AnnotatedFrame]:
    """Normalize and write the kept frames.

    Frames whose annotation references an image get a crop, a crop mask and
    an annotation with transformed keypoints, box and camera under
    `out_dir`. Other frames are passed through with absolute paths.

    Returns
    -----------------------
    list[AnnotatedFrame]
        Entries of the filtered manifest, relative to `out_dir`.
    """
    cfg = cfg or FilterConfig()
    root = Path(root)
    out_dir = Path(out_dir)
    (out_dir / "crops").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)

    res = []
    for entry in report.kept:
        ann = report.annotations[entry.frame]
        ann_dir = (root / entry.annotation).parent
        if ann.image is None:
            res.append(
                entry.model_copy(
                    update={
                        "annotation": str((root / entry.annotation).resolve())
                    }
                )
            )
            continue

        rgb, _ = read_png(ann_dir / ann.image)
        crop = normalize_crop(
            rgb,
            _read_mask(ann_dir / ann.person_mask),
            ann.bbox,
            ann.camera,
            cfg.crop_size,
            cfg.subject_size,
        )
        s = crop.scale
        tx, ty = float(crop.shift[0]), float(crop.shift[1])
        image = f"crops/{entry.frame}.png"
        mask = f"crops/{entry.frame}_mask.png"
        write_png(out_dir / image, crop.image)
        write_mask(out_dir / mask, crop.mask)
        sil = normalize_crop(
            rgb,
            _read_mask(ann_dir / ann.silhouette),
            ann.bbox,
            crop_size=cfg.crop_size,
            subject_size=cfg.subject_size,
        )
        silhouette = f"crops/{entry.frame}_silhouette.png"
        write_mask(out_dir / silhouette, sil.mask)

        x0, y0, x1, y1 = ann.bbox
        moved = ann.model_copy(
            update={
                "image": f"../{image}",
                "person_mask": f"../{mask}",
                "silhouette": f"../{silhouette}",
                "camera": crop.camera,
                "bbox": (
                    s * x0 + tx,
                    s * y0 + ty,
                    s * x1 + tx,
                    s * y1 + ty,
                ),
                "keypoints": [
                    (s * x + tx, s * y + ty, c)
                    for x, y, c in ann.keypoints
                ],
                "projected": [
                    (s * x + tx, s * y + ty) for x, y in ann.projected
                ],
            }
        )
        name = f"annotations/{entry.frame}.yaml"
        with open(out_dir / name, "w", encoding="utf-8") as f:
            yaml.safe_dump(moved.model_dump(mode="json"), f)
        res.append(AnnotatedFrame(frame=entry.frame, annotation=name))
    logger.info("%d crops written to %s", len(res), out_dir)
    return res
