"""Prompt construction, completion validation and triplet normalization."""

import pytest

from tripletground.parsing import (
    FORMAT_REMINDER,
    EmptyCaptionError,
    EmptySubjectError,
    FormatError,
    PromptTemplate,
    ReplayMissError,
    ReplayStore,
    build_prompt,
    compose_predicate_phrase,
    fill_degenerate,
    load_template,
    parse_caption,
    parse_completion,
)
from tripletground.core import TextTriplet


@pytest.fixture
def template():
    return PromptTemplate(
        general_instruction="Decompose captions into triplets.",
        supporting_details="One per line: (subject | predicate | object).",
        icl_examples=(("the cat on the mat", "(cat | on | mat)"),),
        task_instruction_prefix="Caption: ",
    )


class TestBuildPrompt:
    def test_four_parts_in_order(self, template):
        prompt = build_prompt(template, "the cat on the laptop")
        positions = [
            prompt.index(template.general_instruction),
            prompt.index(template.supporting_details),
            prompt.index("the cat on the mat"),
            prompt.index("Caption: the cat on the laptop"),
        ]
        assert positions == sorted(positions)

    def test_deterministic(self, template):
        assert build_prompt(template, "x y z") == build_prompt(template, "x y z")

    def test_caption_is_suffix_and_unique(self, template):
        caption = "two dogs running"
        prompt = build_prompt(template, caption)
        assert prompt.endswith(caption)
        assert prompt.count(caption) == 1

    def test_empty_caption(self, template):
        with pytest.raises(EmptyCaptionError):
            build_prompt(template, "")

    def test_template_requires_examples(self):
        with pytest.raises(ValueError):
            PromptTemplate("a", "b", (), "d")


class TestParseCompletion:
    def test_single_line(self):
        assert parse_completion("(cat | sitting on | laptop)") == [
            ("cat", "sitting on", "laptop")
        ]

    def test_empty_predicate_and_object(self):
        assert parse_completion("(red apple | | )") == [("red apple", "", "")]

    def test_multiple_lines_and_blanks(self):
        raw = "(a | near | b)\n\n(c | | )\n"
        assert parse_completion(raw) == [("a", "near", "b"), ("c", "", "")]

    def test_no_parsable_line(self):
        with pytest.raises(FormatError):
            parse_completion("no triplets here")

    def test_mixed_validity_is_all_or_nothing(self):
        with pytest.raises(FormatError) as err:
            parse_completion("(a | b | c)\nbroken line")
        assert err.value.line_number == 2

    def test_empty_subject_rejected(self):
        with pytest.raises(FormatError):
            parse_completion("( | on | mat)")


class TestFillDegenerate:
    def test_fill_both(self):
        filled, slots = fill_degenerate(("red apple", "", ""))
        assert filled == ("red apple", "red apple", "red apple")
        assert slots == frozenset({"predicate", "object"})

    def test_fill_object_only(self):
        filled, slots = fill_degenerate(("person", "walking", ""))
        assert filled == ("person", "walking", "person")
        assert slots == frozenset({"object"})

    def test_noop(self):
        filled, slots = fill_degenerate(("cat", "on", "mat"))
        assert filled == ("cat", "on", "mat")
        assert slots == frozenset()

    def test_empty_subject(self):
        with pytest.raises(EmptySubjectError):
            fill_degenerate(("", "on", "mat"))


class TestComposePredicatePhrase:
    def test_full_sentence(self):
        t = TextTriplet(0, 1, "vase", "on top of", "table")
        assert compose_predicate_phrase(t, "full-sentence") == "vase on top of table"

    def test_person_template(self):
        t = TextTriplet(0, 1, "[NAME-1]", "looking at", "[NAME-2]")
        assert compose_predicate_phrase(t, "person-template") == "a person looking at a person"

    def test_identical_unfilled_strings_concatenate(self):
        t = TextTriplet(0, 0, "cat", "cat", "cat")
        assert compose_predicate_phrase(t, "full-sentence") == "cat cat cat"

    def test_fully_degenerate_keeps_subject(self):
        t = TextTriplet(
            0, 0, "red apple", "red apple", "red apple",
            filled_slots=frozenset({"predicate", "object"}),
        )
        assert compose_predicate_phrase(t, "full-sentence") == "red apple"

    def test_filled_object_composes_subject_predicate(self):
        t = TextTriplet(0, 0, "person", "walking", "person", filled_slots=frozenset({"object"}))
        assert compose_predicate_phrase(t, "full-sentence") == "person walking"


class TestParseCaption:
    def test_two_entities_one_triplet(self, template):
        store = ReplayStore({"the cat sitting on the laptop": "(cat | sitting on | laptop)"})
        parsed = parse_caption("the cat sitting on the laptop", store, template)
        assert [e.surface for e in parsed.entities] == ["cat", "laptop"]
        assert len(parsed.triplets) == 1
        t = parsed.triplets[0]
        assert (t.subject_id, t.object_id) == (0, 1)
        assert t.predicate_phrase == "cat sitting on laptop"

    def test_degenerate_caption(self, template):
        store = ReplayStore({"red apple": "(red apple | | )"})
        parsed = parse_caption("red apple", store, template)
        assert len(parsed.entities) == 1
        t = parsed.triplets[0]
        assert t.filled_slots == frozenset({"predicate", "object"})
        assert t.subject_id == t.object_id == 0
        assert t.is_self_referential

    def test_replay_miss(self, template):
        with pytest.raises(ReplayMissError):
            parse_caption("unknown caption", ReplayStore({}), template)

    def test_entity_id_stability(self, template):
        store = ReplayStore(
            {"man holding cup near dog": "(man | holding | cup)\n(man | near | dog)"}
        )
        parsed = parse_caption("man holding cup near dog", store, template)
        assert parsed.triplets[0].subject_id == parsed.triplets[1].subject_id
        assert len(parsed.entities) == 3

    def test_replay_determinism(self, template):
        store = ReplayStore({"a b": "(a | near | b)"})
        first = parse_caption("a b", store, template)
        second = parse_caption("a b", store, template)
        assert first == second

    def test_all_slots_non_empty_after_parse(self, template):
        store = ReplayStore({"person walking": "(person | walking | )"})
        parsed = parse_caption("person walking", store, template)
        for t in parsed.triplets:
            assert t.subject_text and t.predicate_text and t.object_text

    def test_verbatim_flag(self, template):
        store = ReplayStore({"rt bottom chair": "(right bottom chair | | )"})
        parsed = parse_caption("rt bottom chair", store, template)
        assert parsed.entities[0].verbatim is False

    def test_format_error_triggers_one_retry(self, template):
        calls = []

        class FlakyLlm:
            def complete(self, prompt, caption):
                calls.append(prompt)
                if len(calls) == 1:
                    return "garbage"
                return "(cat | on | mat)"

        parsed = parse_caption("the cat on the mat", FlakyLlm(), template)
        assert len(calls) == 2
        assert FORMAT_REMINDER in calls[1]
        assert len(parsed.triplets) == 1

    def test_persistent_format_error_raises(self, template):
        class BadLlm:
            def complete(self, prompt, caption):
                return "still garbage"

        with pytest.raises(FormatError):
            parse_caption("anything", BadLlm(), template)


class TestReplayStore:
    def test_from_jsonl(self, tmp_path):
        path = tmp_path / "fixtures.jsonl"
        path.write_text(
            '{"caption": "red apple", "completion": "(red apple | | )"}\n'
            '{"caption": "a b", "completion": "(a | near | b)"}\n'
        )
        store = ReplayStore.from_jsonl(str(path))
        assert len(store) == 2
        assert "red apple" in store
        assert store.complete("ignored prompt", "a b") == "(a | near | b)"


class TestLoadTemplate:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "template.txt"
        path.write_text(
            "[general-instruction]\nDo the thing.\n"
            "[supporting-details]\nFormat: (s | p | o).\n"
            "[examples]\nCaption: a on b\n(a | on | b)\n\nCaption: c\n(c | | )\n"
            "[task-instruction]\nCaption:\n"
        )
        template = load_template(str(path))
        assert template.general_instruction == "Do the thing."
        assert len(template.icl_examples) == 2
        assert template.icl_examples[1] == ("c", "(c | | )")
        prompt = build_prompt(template, "dog under table")
        assert prompt.endswith("Caption: dog under table")

    def test_missing_section(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("[general-instruction]\nonly this\n")
        with pytest.raises(ValueError):
            load_template(str(path))

    def test_shipped_templates_load(self):
        from importlib import resources

        for name in ("prompt_rec.txt", "prompt_links.txt"):
            with resources.as_file(
                resources.files("tripletground.data").joinpath(name)
            ) as path:
                template = load_template(str(path))
            assert len(template.icl_examples) >= 1
