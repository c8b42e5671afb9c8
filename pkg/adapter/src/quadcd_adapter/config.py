"""Adapter configuration: what to load and where to listen.

The config file is a JSON object; every key maps straight onto an
AdapterConfig field and unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path


class AdapterError(ValueError):
    """Invalid adapter configuration or input data."""


FILL_RULES = ("mean", "black")


@dataclass(frozen=True)
class AdapterConfig:
    """Wiring for one adapter process.

    model:      model identifier ("stub", "stub:<seed>", "tiny-llava",
                "tiny-llava:<seed>", or "hf:<checkpoint>")
    segmenter:  segmenter identifier ("stub" or "sam:<checkpoint>")
    device:     device spec handed to the model loader
    listen:     "stdio" or "tcp:HOST:PORT"
    fill:       fill rule for hidden pixels ("mean" or "black")
    image_root: directory image refs in session requests resolve against
    canvas:     height, width of the blank canvas used when a session
                names no image
    """

    model: str = "stub"
    segmenter: str = "stub"
    device: str = "cpu"
    listen: str = "stdio"
    fill: str = "mean"
    image_root: str = "."
    canvas: tuple[int, int] = (32, 32)

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(self.canvas))
        if not self.model:
            raise AdapterError("model identifier must be non-empty")
        if not self.segmenter:
            raise AdapterError("segmenter identifier must be non-empty")
        if self.fill not in FILL_RULES:
            raise AdapterError(
                f"fill must be one of {', '.join(FILL_RULES)}, got {self.fill!r}"
            )
        parse_listen(self.listen)
        if len(self.canvas) != 2 or any(
            not isinstance(n, int) or n < 1 for n in self.canvas
        ):
            raise AdapterError(f"canvas must be two positive ints, got {self.canvas!r}")


def parse_listen(listen: str) -> tuple[str, tuple[str, int] | None]:
    """Split a listen spec into ("stdio", None) or ("tcp", (host, port))."""
    if listen == "stdio":
        return "stdio", None
    if listen.startswith("tcp:"):
        rest = listen[len("tcp:") :]
        host, sep, port_text = rest.rpartition(":")
        if not sep or not host:
            raise AdapterError(f"listen {listen!r} needs tcp:HOST:PORT")
        try:
            port = int(port_text)
        except ValueError:
            raise AdapterError(f"listen {listen!r} has a non-numeric port") from None
        if not (0 <= port <= 65535):
            raise AdapterError(f"listen port {port} outside 0..65535")
        return "tcp", (host, port)
    raise AdapterError(f"listen must be 'stdio' or 'tcp:HOST:PORT', got {listen!r}")


def load_config(path) -> AdapterConfig:
    """Read an AdapterConfig from a JSON file."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AdapterError(f"cannot read config file {path}: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise AdapterError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise AdapterError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(AdapterConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise AdapterError(f"{path}: unknown config keys {', '.join(unknown)}")
    if "canvas" in data:
        if not isinstance(data["canvas"], list):
            raise AdapterError(f"{path}: canvas must be a two-element list")
        data["canvas"] = tuple(data["canvas"])
    try:
        return AdapterConfig(**data)
    except AdapterError as exc:
        raise AdapterError(f"{path}: {exc}") from None
