"""Complementary visual decoupling over segmentation masks.

Masks are the only currency: no pixel values, no image codecs.  A
segmentation partitions the pixel grid into object masks plus exactly one
background mask; decoupling exposes the top-m objects by area in the dual
mask and everything else (remaining objects plus background) in the
residual mask.  The split is computed once per image and stays fixed for
the whole generation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from quadcd.errors import SegmentationError

Pixel = tuple[int, int]

OBJECT = "object"
BACKGROUND = "background"


@dataclass(frozen=True)
class SegmentMask:
    id: str
    kind: str
    pixels: frozenset[Pixel]

    def __post_init__(self):
        if self.kind not in (OBJECT, BACKGROUND):
            raise SegmentationError(f"mask {self.id!r}: unknown kind {self.kind!r}")
        if not self.pixels:
            raise SegmentationError(f"mask {self.id!r} is empty")
        object.__setattr__(self, "pixels", frozenset(self.pixels))

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class SegmentationSet:
    """A full partition of a width x height pixel grid."""

    width: int
    height: int
    masks: tuple[SegmentMask, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SegmentationError(f"bad image dimensions {self.width}x{self.height}")
        object.__setattr__(self, "masks", tuple(self.masks))
        backgrounds = [m for m in self.masks if m.kind == BACKGROUND]
        if len(backgrounds) != 1:
            raise SegmentationError(
                f"expected exactly one background mask, got {len(backgrounds)}"
            )
        ids = [m.id for m in self.masks]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[0]
            raise SegmentationError(f"duplicate mask id {dup!r}")
        self._validate_partition()

    def _validate_partition(self) -> None:
        seen: dict[Pixel, str] = {}
        for mask in self.masks:
            for px in mask.pixels:
                r, c = px
                if not (0 <= r < self.height and 0 <= c < self.width):
                    raise SegmentationError(
                        f"mask {mask.id!r}: pixel ({r},{c}) outside {self.width}x{self.height}"
                    )
                prev = seen.get(px)
                if prev is not None:
                    raise SegmentationError(
                        f"pixel ({r},{c}) covered by both {prev!r} and {mask.id!r}"
                    )
                seen[px] = mask.id
        expected = self.width * self.height
        if len(seen) != expected:
            for r in range(self.height):
                for c in range(self.width):
                    if (r, c) not in seen:
                        raise SegmentationError(f"pixel ({r},{c}) not covered by any mask")

    @property
    def objects(self) -> list[SegmentMask]:
        return [m for m in self.masks if m.kind == OBJECT]

    @property
    def background(self) -> SegmentMask:
        return next(m for m in self.masks if m.kind == BACKGROUND)

    @property
    def all_pixels(self) -> frozenset[Pixel]:
        return frozenset().union(*(m.pixels for m in self.masks))


@dataclass(frozen=True)
class DecoupledPair:
    """Complementary exposure masks: dual = top-m objects, residual = the rest."""

    dual_mask: frozenset[Pixel]
    residual_mask: frozenset[Pixel]
    m: int

    def __post_init__(self):
        if self.dual_mask & self.residual_mask:
            raise SegmentationError("dual and residual masks overlap")


def rank_segments(seg: SegmentationSet) -> list[SegmentMask]:
    """Object masks by area descending, ties by ascending id; background excluded."""
    objects = seg.objects
    if not objects:
        raise SegmentationError("segmentation has no object masks; decoupling undefined")
    return sorted(objects, key=lambda m: (-m.area, m.id))


def select_top_m(n_objects: int, fraction: float) -> int:
    """m = max(1, round-half-up(fraction * n_objects)), clamped to n_objects."""
    if n_objects < 1:
        raise SegmentationError(f"need at least one object, got {n_objects}")
    if not (0.0 < fraction <= 1.0):
        raise SegmentationError(f"top-m fraction must be in (0, 1], got {fraction}")
    m = math.floor(fraction * n_objects + 0.5)
    return max(1, min(m, n_objects))


def decouple(seg: SegmentationSet, m: int) -> DecoupledPair:
    """Split the grid: top-m ranked objects exposed in dual, complement in residual."""
    ranked = rank_segments(seg)
    if not (1 <= m <= len(ranked)):
        raise SegmentationError(f"m={m} out of range [1, {len(ranked)}]")
    dual: set[Pixel] = set()
    for mask in ranked[:m]:
        dual |= mask.pixels
    residual = seg.all_pixels - dual
    return DecoupledPair(frozenset(dual), frozenset(residual), m)


def dual_object_ids(seg: SegmentationSet, m: int) -> tuple[str, ...]:
    """Ids of the objects the dual mask exposes (rank order)."""
    ranked = rank_segments(seg)
    if not (1 <= m <= len(ranked)):
        raise SegmentationError(f"m={m} out of range [1, {len(ranked)}]")
    return tuple(mask.id for mask in ranked[:m])


def parse_segmentation(text: str, source: str = "<string>") -> SegmentationSet:
    """Parse the segmentation file format.

    Header line: `width height`.  One line per mask after that:
    `id kind count r1,c1 r2,c2 ...` with kind either `object` or
    `background` and count matching the number of coordinates.  Blank
    lines and `#` comments are skipped.
    """
    lines = [
        (n, line.strip())
        for n, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not lines:
        raise SegmentationError(f"{source}: empty segmentation file")
    header_no, header = lines[0]
    parts = header.split()
    if len(parts) != 2:
        raise SegmentationError(f"{source}:{header_no}: header must be `width height`")
    try:
        width, height = int(parts[0]), int(parts[1])
    except ValueError:
        raise SegmentationError(f"{source}:{header_no}: non-integer dimensions") from None
    masks = []
    for line_no, line in lines[1:]:
        fields = line.split()
        if len(fields) < 4:
            raise SegmentationError(
                f"{source}:{line_no}: expected `id kind count r,c ...`"
            )
        mask_id, kind, count_str = fields[0], fields[1], fields[2]
        try:
            count = int(count_str)
        except ValueError:
            raise SegmentationError(f"{source}:{line_no}: bad pixel count {count_str!r}") from None
        coords = fields[3:]
        if len(coords) != count:
            raise SegmentationError(
                f"{source}:{line_no}: mask {mask_id!r} declares {count} pixels, lists {len(coords)}"
            )
        pixels = set()
        for coord in coords:
            try:
                r_str, c_str = coord.split(",")
                pixels.add((int(r_str), int(c_str)))
            except ValueError:
                raise SegmentationError(
                    f"{source}:{line_no}: bad coordinate {coord!r}"
                ) from None
        masks.append(SegmentMask(mask_id, kind, frozenset(pixels)))
    return SegmentationSet(width, height, tuple(masks))


def load_segmentation(path) -> SegmentationSet:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise SegmentationError(f"cannot read segmentation {path}: {exc}") from None
    return parse_segmentation(text, source=str(path))


def format_segmentation(seg: SegmentationSet) -> str:
    """Inverse of parse_segmentation, with sorted coordinates for stable output."""
    out = [f"{seg.width} {seg.height}"]
    for mask in seg.masks:
        coords = " ".join(f"{r},{c}" for r, c in sorted(mask.pixels))
        out.append(f"{mask.id} {mask.kind} {mask.area} {coords}")
    return "\n".join(out) + "\n"
