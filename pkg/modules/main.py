"""Main entrypoint.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4
numerical failure.
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


import argparse
import sys
from typing import Any
from typing import Optional

from pydantic import ValidationError

from modules import cli
from modules.deform import DeformError
from modules.filterpipe import FilterError
from modules.fit import DivergenceError
from modules.fit import FitError
from modules.kinematics import KinematicsError
from modules.manifest import ManifestError
from modules.render import RenderError
from modules.schemas import GridConfig
from modules.session import ConfigError
from modules.session import init_session
from modules.session import load_config
from modules.synthdata import SynthError
from modules.volume import VolumeError
from modules.volume import VolumeFormatError


__version__ = "1.0.0"

COMMANDS = {
    "synth": cli.cmd_synth,
    "filter": cli.cmd_filter,
    "fit": cli.cmd_fit,
    "eval": cli.cmd_eval,
    "render": cli.cmd_render,
}

USAGE_ERRORS = (
    ConfigError,
    DeformError,
    ManifestError,
    ValidationError,
    FitError,
    SynthError,
    FilterError,
    KinematicsError,
    RenderError,
    VolumeError,
)


def _dims(text: str) -> tuple[int, int, int]:
    """Parse "n" or "nx,ny,nz" grid dims."""
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"invalid dims {text}") from err
    if len(values) == 1:
        values *= 3
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"invalid dims {text}")
    return tuple(values)


def _grid(text: str) -> dict[str, Any]:
    """Parse a grid preset name or canonical grid dims."""
    if text in ("desk", "paper"):
        return GridConfig.preset(text).model_dump()
    return {"canonical": _dims(text)}


def parse_args(argv: Optional[list[str]] = None) -> argparse.Namespace:
    """Parse the command line."""
    parser = argparse.ArgumentParser(
        prog="volrig",
        description="Posable volumetric character reconstruction.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--skeleton", help="skeleton YAML file")
    parser.add_argument("--dataset", help="manifest file")
    parser.add_argument("--checkpoint", help="checkpoint directory")
    parser.add_argument("--canonical", help="canonical joints file")
    parser.add_argument("--poses", help="pose sequence file")
    parser.add_argument("--camera", help="camera record file or manifest")
    parser.add_argument("--frame", type=int, help="camera manifest frame")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed")
    parser.add_argument("--iters", type=int, help="fit iterations")
    parser.add_argument(
        "--grid", type=_grid, help='"desk", "paper" or canonical dims'
    )
    parser.add_argument("--wgrid", type=_dims, help="weight grid dims")
    parser.add_argument("--step", type=float, help="ray-marching step")
    parser.add_argument(
        "--mode", choices=("single", "retarget", "turntable"), help="render"
    )
    parser.add_argument("--n-frames", type=int, help="turntable cameras")
    parser.add_argument("--split", choices=("train", "test"), help="eval")
    parser.add_argument("--workers", type=int, help="parallel workers")
    parser.add_argument("--verbose", action="store_true", help="debug logs")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    return parser.parse_args(argv)


def overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Nested config overrides from parsed flags."""
    grid = dict(args.grid or {})
    if args.wgrid is not None:
        grid["weights"] = args.wgrid
    return {
        "skeleton": args.skeleton,
        "dataset": args.dataset,
        "checkpoint": args.checkpoint,
        "canonical": args.canonical,
        "out": args.out,
        "seed": args.seed,
        "split": args.split,
        "grid": grid,
        "fit": {
            "iterations": args.iters,
            "step": args.step,
            "seed": args.seed,
            "workers": args.workers,
        },
        "render": {
            "mode": args.mode,
            "frames": args.n_frames,
            "poses": args.poses,
            "camera": args.camera,
            "frame": args.frame,
        },
    }


def _fail(err: Exception, code: int) -> int:
    cli.console.print(str(err), style="red", markup=False, soft_wrap=True)
    return code


def main(argv: Optional[list[str]] = None) -> int:
    """Execute main entrypoint."""
    args = parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, overrides(args))
        init_session(cfg, args.verbose)
        COMMANDS[args.command](cfg)
    except DivergenceError as err:
        return _fail(err, 4)
    except (OSError, VolumeFormatError) as err:
        return _fail(err, 3)
    except USAGE_ERRORS as err:
        return _fail(err, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
