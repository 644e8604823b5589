"""Run session initializer.

Functions
-----------------------
load_config()
    Resolve the configuration of a CLI invocation.
init_session()
    Create the output directory, echo the config and set up logging.
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
from typing import Any
from typing import Optional

import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from modules.schemas import RunConfig


class ConfigError(Exception):
    """Exception raised for invalid run configurations."""


def _merge(base: dict, overrides: dict) -> dict:
    """Recursive update of `base`, skipping `None` overrides."""
    res = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(res.get(key), dict):
            res[key] = _merge(res[key], value)
        elif isinstance(value, dict):
            res[key] = _merge({}, value)
        else:
            res[key] = value
    return res


def load_config(
    command: str,
    config: Optional[str | Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Resolve the configuration of a CLI invocation.

    Values come from the declared defaults, then the `config` file, then
    `overrides`, later sources winning. Referenced input paths must exist.

    Parameters
    -----------------------
    command : str
        Subcommand name.
    config : Optional[str | Path]
        YAML config file. Default is `None`.
    overrides : Optional[dict[str, Any]]
        Nested overrides, `None` values ignored. Default is `None`.

    Returns
    -----------------------
    RunConfig
        The resolved configuration.

    Raises
    -----------------------
    ConfigError
        - If the config file is missing or malformed.
        - If the resolved config does not validate.
        - If a referenced input path does not exist.
    """
    doc = {}
    if config is not None:
        try:
            with open(config, "r", encoding="utf-8") as f:
                doc = yaml.safe_load(f) or {}
        except FileNotFoundError as err:
            raise ConfigError(f"{config} not found") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"{config} :: invalid YAML") from err
        if not isinstance(doc, dict):
            raise ConfigError(f"{config} :: config must be a mapping")

    doc = _merge(doc, overrides or {})
    doc["command"] = command
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as err:
        first = err.errors()[0]
        loc = ".".join(str(v) for v in first["loc"])
        raise ConfigError(
            f"invalid config :: {loc} :: {first['msg']}"
        ) from err

    paths = (
        cfg.skeleton,
        cfg.dataset,
        cfg.checkpoint,
        cfg.canonical,
        cfg.render.poses,
        cfg.render.camera,
    )
    for path in paths:
        if path is not None and not Path(path).exists():
            raise ConfigError(f"{path} not found")
    return cfg


def init_session(
    cfg: RunConfig, verbose: bool = False, console: Optional[Console] = None
) -> Path:
    """Create the output directory, echo the config and set up logging.

    Parameters
    -----------------------
    cfg : RunConfig
        Resolved configuration, written to <out>/config.yaml.
    verbose : bool
        Log at DEBUG instead of INFO. Default is `False`.
    console : Optional[Console]
        Console of the log handler. Default is `None` (stderr).

    Returns
    -----------------------
    Path
        The output directory.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=False)

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            RichHandler(console=console or Console(stderr=True), markup=False)
        ],
        force=True,
    )
    logging.getLogger(__name__).info("session started in %s", out)
    return out
