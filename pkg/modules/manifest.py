"""Class mediating reads, writes and queries of dataset manifests.

Manifests and pose sequences are JSON-lines files, one pydantic record per
line.

Classes
-----------------------
ManifestError
    Exception raised for errors in manifest files.
ManifestHandler
    Class mediating operations on the frames of a dataset.

Functions
-----------------------
read_records()
    Parse a JSON-lines file into records.
write_records()
    Write records to a JSON-lines file.
read_poses()
    Read a pose sequence file.
write_poses()
    Write a pose sequence file.
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

from pathlib import Path
from typing import Optional
from typing import TypeVar

from pydantic import BaseModel
from pydantic import ValidationError

from modules.kinematics import Pose
from modules.schemas import FrameRecord
from modules.schemas import PoseRecord


Record = TypeVar("Record", bound=BaseModel)


class ManifestError(Exception):
    """Exception raised for errors in manifest files."""


def read_records(filename: str | Path, model: type[Record]) -> list[Record]:
    """Parse a JSON-lines file into records.

    Blank lines are skipped.

    Parameters
    -----------------------
    filename : str | Path
        Input file.
    model : type[Record]
        pydantic model of every line.

    Returns
    -----------------------
    list[Record]
        Records in file order.

    Raises
    -----------------------
    FileNotFoundError
        If file not found.
    ManifestError
        If a line does not validate.
    """
    records = []
    try:
        with open(filename, "r", encoding="utf-8") as f:
            for ir, line in enumerate(f):
                if not line.strip():
                    continue
                try:
                    records.append(model.model_validate_json(line))
                except ValidationError as err:
                    raise ManifestError(
                        f"{filename} :: {ir+1} :: invalid record"
                    ) from err
    except FileNotFoundError as err:
        raise FileNotFoundError(f"{filename} not found") from err
    return records


def write_records(filename: str | Path, records: list[BaseModel]):
    """Write records to a JSON-lines file, one per line."""
    with open(filename, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.model_dump_json() + "\n")


class ManifestHandler:
    """Class mediating operations on the frames of a dataset.

    Attributes
    -----------------------
    records : list[FrameRecord]
        Frames, in insertion order.

    Methods
    -----------------------
    __init__()
        Initialize class instance.
    add()
        Add a frame.
    query()
        Return the frames of a split.
    summarize()
        Count frames per split.
    load()
        Append the contents of a manifest file.
    save()
        Save the frames to a manifest file.
    missing()
        Return referenced files that do not exist.
    """

    def __init__(self, records: Optional[list[FrameRecord]] = None):
        """Initialize class instance.

        Parameters
        -----------------------
        records : Optional[list[FrameRecord]]
            Initial frames. Default is `None` (empty).
        """
        self.records = []
        for rec in records or []:
            self.add(rec)

    def add(self, record: FrameRecord):
        """Add a frame.

        Raises
        -----------------------
        ManifestError
            If a frame with the same index is present.
        """
        if any(r.frame == record.frame for r in self.records):
            raise ManifestError(f"frame {record.frame} already present")
        self.records.append(record)

    def query(self, split: Optional[str] = None) -> list[FrameRecord]:
        """Return the frames of a split.

        Parameters
        -----------------------
        split : Optional[str]
            "train" or "test". Default is `None` (every frame).

        Returns
        -----------------------
        list[FrameRecord]
            Matching frames, ordered by frame index.
        """
        res = [r for r in self.records if split is None or r.split == split]
        return sorted(res, key=lambda r: r.frame)

    def summarize(self) -> dict[str, int]:
        """Count frames per split.

        Returns
        -----------------------
        dict[str, int]
            {split: frame count} for "train" and "test".
        """
        res = {"train": 0, "test": 0}
        for r in self.records:
            res[r.split] += 1
        return res

    def load(self, filename: str | Path):
        """Append the contents of a manifest file.

        Parameters
        -----------------------
        filename : str | Path
            Manifest file, one `FrameRecord` per line.

        Raises
        -----------------------
        FileNotFoundError
            If file not found.
        ManifestError
            - If a line does not validate.
            - If a line repeats a frame index.
        """
        recs = read_records(filename, FrameRecord)
        known = {r.frame for r in self.records}
        for rec in recs:
            if rec.frame in known:
                raise ManifestError(
                    f"{filename} :: duplicate frame {rec.frame}"
                )
            known.add(rec.frame)
        self.records.extend(recs)

    def save(self, filename: str | Path):
        """Save the frames to a manifest file, ordered by frame index."""
        write_records(filename, self.query())

    def missing(self, root: str | Path) -> list[str]:
        """Return image and mask paths under `root` that do not exist."""
        root = Path(root)
        res = []
        for r in self.query():
            for p in (r.image, r.mask):
                if not (root / p).is_file():
                    res.append(p)
        return res


def read_poses(filename: str | Path, bones: int) -> list[Pose]:
    """Read a pose sequence file.

    Parameters
    -----------------------
    filename : str | Path
        Pose file, one `PoseRecord` per line.
    bones : int
        Expected number of bones K.

    Returns
    -----------------------
    list[Pose]
        Poses in file order.

    Raises
    -----------------------
    FileNotFoundError
        If file not found.
    ManifestError
        - If a line does not validate.
        - If a pose does not hold 3K angle values.
    """
    poses = []
    for ir, rec in enumerate(read_records(filename, PoseRecord)):
        if len(rec.angles) != 3 * bones:
            raise ManifestError(
                f"{filename} :: {ir+1} :: pose has {len(rec.angles)} angle "
                f"values, expected {3 * bones}"
            )
        poses.append(Pose.from_record(rec))
    return poses


def write_poses(filename: str | Path, poses: list[Pose]):
    """Write a pose sequence file, one `PoseRecord` per line."""
    write_records(filename, [p.to_record() for p in poses])
