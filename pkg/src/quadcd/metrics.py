"""Caption-hallucination and binary-QA scorers.

Three scorers share this module: object-hallucination rates over
captions (instance-level and sentence-level ratios), confusion-matrix
scores for yes/no probing, and per-subset accuracy for the four
perception subsets (existence, count, position, color).

Object extraction is lexicon-driven: a loadable table maps surface
forms (plurals, synonyms, multi-word phrases) to canonical classes, and
captions are scanned case-insensitively with longest match winning.
The canonical name itself always counts as a surface form.

Note on naming: the two caption ratios are labeled instance/sentence
descriptively.  Instance-level = hallucinated object mentions over all
mentioned objects; sentence-level = captions containing at least one
hallucinated object over all captions.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from quadcd.errors import MetricsError

MME_SUBSETS = ("existence", "count", "position", "color")

_WORD = re.compile(r"[a-z0-9]+")
_YES_NO = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


def _tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


# ---------------------------------------------------------------------------
# lexicon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicon:
    """Maps tokenized surface forms to canonical object classes."""

    classes: tuple[str, ...]
    surface_map: dict[tuple[str, ...], str]

    @property
    def max_ngram(self) -> int:
        return max(len(k) for k in self.surface_map)

    def __len__(self) -> int:
        return len(self.classes)


def build_lexicon(table: dict[str, tuple[str, ...]]) -> Lexicon:
    if not table:
        raise MetricsError("lexicon is empty")
    surface_map: dict[tuple[str, ...], str] = {}
    classes = []
    for canonical, forms in table.items():
        canon_name = canonical.strip().lower()
        if not canon_name:
            raise MetricsError("lexicon has an empty canonical class name")
        classes.append(canon_name)
        for form in (canon_name, *forms):
            key = tuple(_tokenize(form))
            if not key:
                raise MetricsError(f"lexicon class {canon_name!r} has an empty surface form")
            prior = surface_map.get(key)
            if prior is not None and prior != canon_name:
                raise MetricsError(
                    f"surface form {' '.join(key)!r} maps to both {prior!r} and {canon_name!r}"
                )
            surface_map[key] = canon_name
    if len(set(classes)) != len(classes):
        dupes = sorted({c for c in classes if classes.count(c) > 1})
        raise MetricsError(f"duplicate canonical classes in lexicon: {dupes}")
    return Lexicon(classes=tuple(classes), surface_map=surface_map)


def parse_lexicon(text: str, source: str = "<string>") -> Lexicon:
    """Each line: `canonical<TAB>comma-separated surface forms`.

    Blank lines and `#` comments are skipped; the forms column may be
    empty, in which case only the canonical name matches.
    """
    table: dict[str, tuple[str, ...]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise MetricsError(f"{source}:{line_no}: expected at most two tab-separated columns")
        canonical = parts[0].strip()
        if not canonical:
            raise MetricsError(f"{source}:{line_no}: empty canonical class")
        if canonical.lower() in table:
            raise MetricsError(f"{source}:{line_no}: duplicate class {canonical!r}")
        forms: tuple[str, ...] = ()
        if len(parts) == 2 and parts[1].strip():
            forms = tuple(f.strip() for f in parts[1].split(",") if f.strip())
        table[canonical.lower()] = forms
    if not table:
        raise MetricsError(f"{source}: lexicon file has no entries")
    return build_lexicon(table)


def load_lexicon(path: str) -> Lexicon:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MetricsError(f"cannot read lexicon {path}: {exc}") from None
    return parse_lexicon(text, source=path)


def default_lexicon() -> Lexicon:
    from importlib.resources import files

    text = files("quadcd.data").joinpath("object_lexicon.txt").read_text(encoding="utf-8")
    return parse_lexicon(text, source="object_lexicon.txt")


def extract_objects(caption: str, lexicon: Lexicon) -> frozenset[str]:
    """Canonical classes mentioned in a caption; longest match wins and
    consumes its tokens, each class reported at most once."""
    if not lexicon.surface_map:
        raise MetricsError("lexicon is empty")
    tokens = _tokenize(caption)
    found: set[str] = set()
    max_n = lexicon.max_ngram
    i = 0
    while i < len(tokens):
        matched = 0
        for n in range(min(max_n, len(tokens) - i), 0, -1):
            canonical = lexicon.surface_map.get(tuple(tokens[i : i + n]))
            if canonical is not None:
                found.add(canonical)
                matched = n
                break
        i += matched if matched else 1
    return frozenset(found)


# ---------------------------------------------------------------------------
# caption hallucination scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str
    mentioned_objects: frozenset[str]
    ground_truth_objects: frozenset[str]

    @property
    def hallucinated_objects(self) -> frozenset[str]:
        return self.mentioned_objects - self.ground_truth_objects


@dataclass(frozen=True)
class ChairScores:
    instance: float | None
    sentence: float
    hallucinated_mentions: int
    total_mentions: int
    hallucinated_captions: int
    total_captions: int

    @property
    def instance_undefined(self) -> bool:
        return self.total_mentions == 0


def chair_scores(records: list[CaptionRecord]) -> ChairScores:
    if not records:
        raise MetricsError("no caption records to score")
    total_mentions = sum(len(r.mentioned_objects) for r in records)
    hallucinated_mentions = sum(len(r.hallucinated_objects) for r in records)
    hallucinated_captions = sum(1 for r in records if r.hallucinated_objects)
    instance = hallucinated_mentions / total_mentions if total_mentions else None
    return ChairScores(
        instance=instance,
        sentence=hallucinated_captions / len(records),
        hallucinated_mentions=hallucinated_mentions,
        total_mentions=total_mentions,
        hallucinated_captions=hallucinated_captions,
        total_captions=len(records),
    )


def build_caption_records(
    captions: list[tuple[str, str]],
    annotations: dict[str, frozenset[str]],
    lexicon: Lexicon,
) -> list[CaptionRecord]:
    records = []
    for image_id, caption in captions:
        truth = annotations.get(image_id)
        if truth is None:
            raise MetricsError(f"image {image_id!r} has a caption but no annotation")
        records.append(
            CaptionRecord(
                image_id=image_id,
                caption=caption,
                mentioned_objects=extract_objects(caption, lexicon),
                ground_truth_objects=truth,
            )
        )
    return records


# ---------------------------------------------------------------------------
# binary QA scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinaryQARecord:
    question_id: str
    predicted: str
    label: str
    subset: str
    parse_failed: bool = False

    def __post_init__(self):
        for field_name, value in (("predicted", self.predicted), ("label", self.label)):
            if value not in ("yes", "no"):
                raise MetricsError(
                    f"question {self.question_id!r}: {field_name} must be yes or no, got {value!r}"
                )


def parse_prediction(response: str) -> tuple[str, bool]:
    """First word-boundary yes/no, case-insensitive; neither found is
    scored as "no" and flagged as a parse failure."""
    match = _YES_NO.search(response)
    if match is None:
        return "no", True
    return match.group(1).lower(), False


@dataclass(frozen=True)
class PopeScores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    yes_ratio: float
    tp: int
    fp: int
    fn: int
    tn: int
    parse_failures: int


def pope_scores(records: list[BinaryQARecord]) -> PopeScores:
    """Confusion-matrix scores with "yes" as the positive class.  A zero
    denominator yields 0.0 for precision/recall, and f1 is 0 by
    convention when precision and recall are both 0."""
    if not records:
        raise MetricsError("no QA records to score")
    tp = sum(1 for r in records if r.predicted == "yes" and r.label == "yes")
    fp = sum(1 for r in records if r.predicted == "yes" and r.label == "no")
    fn = sum(1 for r in records if r.predicted == "no" and r.label == "yes")
    tn = sum(1 for r in records if r.predicted == "no" and r.label == "no")
    n = len(records)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PopeScores(
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        yes_ratio=(tp + fp) / n,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        parse_failures=sum(1 for r in records if r.parse_failed),
    )


@dataclass(frozen=True)
class MmeScores:
    subset_accuracy: dict[str, float]
    total: float
    scale: str
    empty_subsets: tuple[str, ...]
    parse_failures: int


def mme_scores(records: list[BinaryQARecord], percent: bool = False) -> MmeScores:
    """Per-subset binary accuracy plus their sum.  Unit scale by default
    (total at most 4.0); percent scale multiplies everything by 100.
    Subsets with no records are excluded from the total and flagged."""
    if not records:
        raise MetricsError("no QA records to score")
    unknown = sorted({r.subset for r in records} - set(MME_SUBSETS))
    if unknown:
        raise MetricsError(f"unknown subset tags {unknown}; expected one of {list(MME_SUBSETS)}")
    factor = 100.0 if percent else 1.0
    subset_accuracy: dict[str, float] = {}
    empty = []
    for subset in MME_SUBSETS:
        group = [r for r in records if r.subset == subset]
        if not group:
            empty.append(subset)
            continue
        correct = sum(1 for r in group if r.predicted == r.label)
        subset_accuracy[subset] = factor * correct / len(group)
    return MmeScores(
        subset_accuracy=subset_accuracy,
        total=sum(subset_accuracy.values()),
        scale="percent" if percent else "unit",
        empty_subsets=tuple(empty),
        parse_failures=sum(1 for r in records if r.parse_failed),
    )


# ---------------------------------------------------------------------------
# input files
# ---------------------------------------------------------------------------


def parse_caption_file(text: str, source: str = "<string>") -> list[tuple[str, str]]:
    """Lines of `image_id<TAB>caption`; an image may appear many times."""
    rows = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.split("\t", 1)
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise MetricsError(f"{source}:{line_no}: expected `image_id<TAB>caption`")
        rows.append((parts[0].strip(), parts[1].strip()))
    if not rows:
        raise MetricsError(f"{source}: no caption rows")
    return rows


def parse_annotation_file(text: str, source: str = "<string>") -> dict[str, frozenset[str]]:
    """Lines of `image_id<TAB>comma-separated canonical objects`."""
    table: dict[str, frozenset[str]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.split("\t", 1)
        if len(parts) != 2 or not parts[0].strip():
            raise MetricsError(f"{source}:{line_no}: expected `image_id<TAB>objects`")
        image_id = parts[0].strip()
        if image_id in table:
            raise MetricsError(f"{source}:{line_no}: duplicate annotation for image {image_id!r}")
        objects = frozenset(o.strip().lower() for o in parts[1].split(",") if o.strip())
        table[image_id] = objects
    if not table:
        raise MetricsError(f"{source}: no annotation rows")
    return table


def parse_qa_file(text: str, source: str = "<string>") -> list[BinaryQARecord]:
    """Lines of `id<TAB>subset<TAB>label<TAB>response text`.  The raw
    response is parsed to yes/no here; failures are flagged on the
    record and surface in every scorer's tally."""
    records = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.split("\t", 3)
        if len(parts) != 4:
            raise MetricsError(f"{source}:{line_no}: expected `id<TAB>subset<TAB>label<TAB>response`")
        qid, subset, label, response = (p.strip() for p in parts)
        if label not in ("yes", "no"):
            raise MetricsError(f"{source}:{line_no}: label must be yes or no, got {label!r}")
        predicted, failed = parse_prediction(response)
        records.append(
            BinaryQARecord(
                question_id=qid,
                predicted=predicted,
                label=label,
                subset=subset.lower(),
                parse_failed=failed,
            )
        )
    if not records:
        raise MetricsError(f"{source}: no QA rows")
    return records


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def chair_report(scores: ChairScores) -> str:
    instance = "undefined (no mentioned objects)" if scores.instance is None else repr(scores.instance)
    return (
        "caption hallucination\n"
        f"  instance ratio: {instance} "
        f"({scores.hallucinated_mentions}/{scores.total_mentions} mentioned objects hallucinated)\n"
        f"  sentence ratio: {scores.sentence!r} "
        f"({scores.hallucinated_captions}/{scores.total_captions} captions with a hallucination)\n"
    )


def pope_report(scores: PopeScores) -> str:
    return (
        "binary probing\n"
        f"  accuracy:  {scores.accuracy!r}\n"
        f"  precision: {scores.precision!r}\n"
        f"  recall:    {scores.recall!r}\n"
        f"  f1:        {scores.f1!r}\n"
        f"  yes ratio: {scores.yes_ratio!r}\n"
        f"  confusion: tp={scores.tp} fp={scores.fp} fn={scores.fn} tn={scores.tn}\n"
        f"  parse failures: {scores.parse_failures}\n"
    )


def mme_report(scores: MmeScores) -> str:
    lines = [f"perception subsets ({scores.scale} scale)"]
    for subset in MME_SUBSETS:
        if subset in scores.subset_accuracy:
            lines.append(f"  {subset}: {scores.subset_accuracy[subset]!r}")
        else:
            lines.append(f"  {subset}: (no records)")
    lines.append(f"  total: {scores.total!r}")
    if scores.empty_subsets:
        lines.append(f"  flagged empty subsets: {', '.join(scores.empty_subsets)}")
    lines.append(f"  parse failures: {scores.parse_failures}")
    return "\n".join(lines) + "\n"


def scores_to_json(scores) -> str:
    if isinstance(scores, ChairScores):
        payload = {
            "metric": "caption-hallucination",
            "instance": scores.instance,
            "sentence": scores.sentence,
            "hallucinated_mentions": scores.hallucinated_mentions,
            "total_mentions": scores.total_mentions,
            "hallucinated_captions": scores.hallucinated_captions,
            "total_captions": scores.total_captions,
        }
    elif isinstance(scores, PopeScores):
        payload = {
            "metric": "binary-probing",
            "accuracy": scores.accuracy,
            "precision": scores.precision,
            "recall": scores.recall,
            "f1": scores.f1,
            "yes_ratio": scores.yes_ratio,
            "tp": scores.tp,
            "fp": scores.fp,
            "fn": scores.fn,
            "tn": scores.tn,
            "parse_failures": scores.parse_failures,
        }
    elif isinstance(scores, MmeScores):
        payload = {
            "metric": "perception-subsets",
            "subset_accuracy": scores.subset_accuracy,
            "total": scores.total,
            "scale": scores.scale,
            "empty_subsets": list(scores.empty_subsets),
            "parse_failures": scores.parse_failures,
        }
    else:
        raise TypeError(f"unknown scores object {type(scores).__name__}")
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
