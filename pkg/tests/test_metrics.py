import json

import numpy as np
import pytest

from conftest import FIXTURES
from quadcd.errors import MetricsError
from quadcd.metrics import (
    BinaryQARecord,
    CaptionRecord,
    build_caption_records,
    build_lexicon,
    chair_report,
    chair_scores,
    default_lexicon,
    extract_objects,
    load_lexicon,
    mme_report,
    mme_scores,
    parse_annotation_file,
    parse_caption_file,
    parse_lexicon,
    parse_prediction,
    parse_qa_file,
    pope_report,
    pope_scores,
    scores_to_json,
)


class TestLexicon:
    def test_build_includes_canonical_as_surface(self):
        lex = build_lexicon({"dog": ("puppy",)})
        assert extract_objects("a dog runs", lex) == {"dog"}
        assert extract_objects("a puppy runs", lex) == {"dog"}

    def test_cross_class_conflict_rejected(self):
        with pytest.raises(MetricsError, match="maps to both"):
            build_lexicon({"dog": ("hound",), "wolf": ("hound",)})

    def test_empty_surface_form_rejected(self):
        with pytest.raises(MetricsError, match="empty surface form"):
            build_lexicon({"dog": ("",)})

    def test_parse_format(self):
        lex = parse_lexicon("# comment\ndog\tpuppy, hound\ncat\n")
        assert set(lex.classes) == {"dog", "cat"}
        assert extract_objects("the hound", lex) == {"dog"}

    def test_parse_duplicate_class(self):
        with pytest.raises(MetricsError, match=":3: duplicate class"):
            parse_lexicon("dog\tpuppy\ncat\ndog\n")

    def test_parse_too_many_columns(self):
        with pytest.raises(MetricsError, match=":1:"):
            parse_lexicon("dog\tpuppy\textra\n")

    def test_load_missing(self, tmp_path):
        with pytest.raises(MetricsError, match="cannot read lexicon"):
            load_lexicon(str(tmp_path / "absent.txt"))

    def test_default_lexicon_shape(self):
        lex = default_lexicon()
        assert len(lex) == 80
        assert "person" in lex.classes
        assert "hair drier" in lex.classes


class TestExtraction:
    def lex(self):
        return build_lexicon(
            {
                "hot dog": ("hotdog",),
                "dog": ("puppy",),
                "dining table": ("table",),
                "person": ("people", "man"),
            }
        )

    def test_longest_match_wins(self):
        assert extract_objects("a hot dog on a plate", self.lex()) == {"hot dog"}

    def test_consumed_tokens_do_not_rematch(self):
        # "hot dog" consumes "dog"; the later bare "dog" still matches
        found = extract_objects("a hot dog and a dog", self.lex())
        assert found == {"hot dog", "dog"}

    def test_case_and_punctuation(self):
        assert extract_objects("A PERSON, at the Dining-Table!", self.lex()) == {
            "person",
            "dining table",
        }

    def test_each_class_once(self):
        found = extract_objects("a man and people and a person", self.lex())
        assert found == {"person"}

    def test_no_match(self):
        assert extract_objects("empty scene", self.lex()) == frozenset()

    def test_default_lexicon_alias(self):
        lex = default_lexicon()
        assert extract_objects("two men holding a phone", lex) == {
            "person",
            "cell phone",
        }


def record(image_id, mentioned, truth):
    return CaptionRecord(
        image_id=image_id,
        caption="",
        mentioned_objects=frozenset(mentioned),
        ground_truth_objects=frozenset(truth),
    )


class TestChair:
    def test_hand_example(self):
        records = [
            record("a", {"dog", "cat"}, {"dog"}),
            record("b", {"dog"}, {"dog"}),
        ]
        scores = chair_scores(records)
        assert scores.instance == pytest.approx(1 / 3)
        assert scores.sentence == pytest.approx(1 / 2)
        assert scores.hallucinated_mentions == 1
        assert scores.total_mentions == 3

    def test_no_mentions_instance_undefined(self):
        scores = chair_scores([record("a", set(), {"dog"})])
        assert scores.instance is None
        assert scores.instance_undefined
        assert scores.sentence == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(90)
        objects = ["dog", "cat", "car", "tree", "boat"]
        records = []
        for i in range(30):
            mentioned = {o for o in objects if rng.random() < 0.5}
            truth = {o for o in objects if rng.random() < 0.5}
            records.append(record(f"img{i}", mentioned, truth))
        base = chair_scores(records)
        for _ in range(10):
            shuffled = list(records)
            rng.shuffle(shuffled)
            assert chair_scores(shuffled) == base

    def test_empty_rejected(self):
        with pytest.raises(MetricsError, match="no caption records"):
            chair_scores([])

    def test_fixture_values(self):
        captions = parse_caption_file((FIXTURES / "captions.tsv").read_text())
        annotations = parse_annotation_file((FIXTURES / "annotations.tsv").read_text())
        records = build_caption_records(captions, annotations, default_lexicon())
        scores = chair_scores(records)
        assert scores.instance == pytest.approx(2 / 6)
        assert scores.sentence == pytest.approx(2 / 3)

    def test_missing_annotation(self):
        with pytest.raises(MetricsError, match="no annotation"):
            build_caption_records(
                [("imgX", "a dog")], {"imgY": frozenset()}, default_lexicon()
            )


class TestParsePrediction:
    def test_plain(self):
        assert parse_prediction("Yes") == ("yes", False)
        assert parse_prediction("no") == ("no", False)

    def test_first_match_wins(self):
        assert parse_prediction("No, but maybe yes") == ("no", False)

    def test_word_boundary(self):
        # "yesterday" must not read as yes
        assert parse_prediction("yesterday it rained") == ("no", True)

    def test_embedded(self):
        assert parse_prediction("I think the answer is YES.") == ("yes", False)

    def test_unparseable_flagged(self):
        pred, failed = parse_prediction("absolutely")
        assert pred == "no"
        assert failed


def qa(qid, predicted, label, subset="random", failed=False):
    return BinaryQARecord(
        question_id=qid, predicted=predicted, label=label,
        subset=subset, parse_failed=failed,
    )


class TestPope:
    def test_hand_confusion(self):
        records = [
            qa("1", "yes", "yes"), qa("2", "yes", "yes"),
            qa("3", "yes", "no"), qa("4", "no", "yes"),
            qa("5", "no", "no"), qa("6", "no", "no"),
        ]
        scores = pope_scores(records)
        assert (scores.tp, scores.fp, scores.fn, scores.tn) == (2, 1, 1, 2)
        assert scores.accuracy == pytest.approx(4 / 6)
        assert scores.precision == pytest.approx(2 / 3)
        assert scores.recall == pytest.approx(2 / 3)
        assert scores.f1 == pytest.approx(2 / 3)
        assert scores.yes_ratio == pytest.approx(3 / 6)

    def test_zero_denominators(self):
        scores = pope_scores([qa("1", "no", "no")])
        assert scores.precision == 0.0
        assert scores.recall == 0.0
        assert scores.f1 == 0.0
        assert scores.accuracy == 1.0

    def test_record_validation(self):
        with pytest.raises(MetricsError, match="must be yes or no"):
            qa("1", "maybe", "yes")

    def test_fixture(self):
        records = parse_qa_file((FIXTURES / "qa_pope.tsv").read_text())
        scores = pope_scores(records)
        assert (scores.tp, scores.fp, scores.fn, scores.tn) == (2, 1, 1, 2)
        assert scores.accuracy == pytest.approx(2 / 3)


class TestMme:
    def records(self, correct=(9, 8, 7, 6), per=10):
        out = []
        subsets = ("existence", "count", "position", "color")
        for subset, k in zip(subsets, correct):
            for i in range(per):
                label = "yes" if i % 2 == 0 else "no"
                pred = label if i < k else ("no" if label == "yes" else "yes")
                out.append(qa(f"{subset}{i}", pred, label, subset))
        return out

    def test_hand_example(self):
        scores = mme_scores(self.records())
        assert scores.subset_accuracy == {
            "existence": 0.9, "count": 0.8, "position": 0.7, "color": 0.6,
        }
        assert scores.total == pytest.approx(3.0)
        assert scores.scale == "unit"
        assert scores.empty_subsets == ()

    def test_percent_scale(self):
        scores = mme_scores(self.records(), percent=True)
        assert scores.subset_accuracy["existence"] == pytest.approx(90.0)
        assert scores.total == pytest.approx(300.0)
        assert scores.scale == "percent"

    def test_unknown_subset(self):
        with pytest.raises(MetricsError, match="unknown subset tags"):
            mme_scores([qa("1", "yes", "yes", subset="ocr")])

    def test_empty_subset_flagged(self):
        records = [r for r in self.records() if r.subset != "color"]
        scores = mme_scores(records)
        assert scores.empty_subsets == ("color",)
        assert "color" not in scores.subset_accuracy
        assert scores.total == pytest.approx(0.9 + 0.8 + 0.7)

    def test_fixture(self):
        records = parse_qa_file((FIXTURES / "qa_mme.tsv").read_text())
        scores = mme_scores(records)
        assert abs(scores.total - 3.0) < 1e-9


class TestFileParsers:
    def test_caption_requires_two_columns(self):
        with pytest.raises(MetricsError, match=":2: expected"):
            parse_caption_file("img1\tok caption\nimg2 no tab\n")

    def test_caption_keeps_tabs_in_text(self):
        rows = parse_caption_file("img1\ta caption\twith a tab\n")
        assert rows == [("img1", "a caption\twith a tab")]

    def test_annotation_duplicate_image(self):
        with pytest.raises(MetricsError, match=":2: duplicate annotation"):
            parse_annotation_file("img1\tdog\nimg1\tcat\n")

    def test_annotation_allows_empty_object_list(self):
        table = parse_annotation_file("img1\t\n")
        assert table == {"img1": frozenset()}

    def test_qa_field_count(self):
        with pytest.raises(MetricsError, match=":1: expected"):
            parse_qa_file("q1\texistence\tyes\n")

    def test_qa_label_checked(self):
        with pytest.raises(MetricsError, match=":1: label"):
            parse_qa_file("q1\texistence\tmaybe\tyes\n")

    def test_qa_response_may_hold_tabs(self):
        records = parse_qa_file("q1\texistence\tyes\tYes,\tit is\n")
        assert records[0].predicted == "yes"

    def test_comments_and_blanks_skipped(self):
        rows = parse_caption_file("# header\n\nimg1\tcaption\n")
        assert len(rows) == 1


class TestReports:
    def test_chair_report_mentions_counts(self):
        scores = chair_scores([record("a", {"dog", "cat"}, {"dog"})])
        text = chair_report(scores)
        assert "1/2 mentioned objects hallucinated" in text
        assert "1/1 captions" in text

    def test_chair_report_undefined_instance(self):
        scores = chair_scores([record("a", set(), set())])
        assert "undefined" in chair_report(scores)

    def test_pope_report_confusion_line(self):
        text = pope_report(pope_scores([qa("1", "yes", "yes")]))
        assert "tp=1 fp=0 fn=0 tn=0" in text

    def test_mme_report_flags_empty(self):
        scores = mme_scores([qa("1", "yes", "yes", "existence")])
        text = mme_report(scores)
        assert "color: (no records)" in text
        assert "flagged empty subsets" in text

    def test_json_round_trip(self):
        scores = pope_scores([qa("1", "yes", "yes"), qa("2", "no", "no")])
        payload = json.loads(scores_to_json(scores))
        assert payload["metric"] == "binary-probing"
        assert payload["accuracy"] == 1.0
        chair = json.loads(scores_to_json(chair_scores([record("a", set(), set())])))
        assert chair["instance"] is None
        mme = json.loads(scores_to_json(mme_scores([qa("1", "yes", "yes", "existence")])))
        assert mme["empty_subsets"] == ["count", "position", "color"]

    def test_json_unknown_type(self):
        with pytest.raises(TypeError):
            scores_to_json(object())
