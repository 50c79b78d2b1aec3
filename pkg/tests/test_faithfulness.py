import json

import httpx
import pytest

from selfcross.errors import EmptyInputError, EndpointAuthError, PromptFormatError
from selfcross.faithfulness import (
    EndpointConfig,
    PromptCase,
    VQATranscript,
    build_question_prompt,
    compute_scores,
    load_prompt_set,
    parse_answers,
    score_batch,
    seed_prompt_path,
)

CAT_DOG = PromptCase(prompt="a cat and a dog", class_a="cat", class_b="dog")


class TestQuestionPrompt:
    def test_existence_question_substituted(self):
        text = build_question_prompt(CAT_DOG)
        assert "Is there cat appearing in this image?" in text
        assert "Is there dog appearing in this image?" in text

    def test_mixture_question_has_sphinx_example(self):
        text = build_question_prompt(CAT_DOG)
        assert "mixture of cat and dog" in text
        assert "Sphinx resembles a mixture of a person and a lion" in text

    def test_five_numbered_questions_for_two_classes(self):
        text = build_question_prompt(CAT_DOG)
        for number in range(1, 6):
            assert f"\n{number}. " in text
        assert "\n6. " not in text
        assert 'The prompt is "a cat and a dog"' in text

    def test_identical_classes_still_well_formed(self):
        text = build_question_prompt(PromptCase(prompt="a cat and a cat", class_a="cat", class_b="cat"))
        assert text.count("Is there cat appearing") == 2

    def test_three_classes_extend_protocol(self):
        case = PromptCase(
            prompt="a beagle and a collie and a husky",
            class_a="beagle",
            class_b="collie",
            class_c="husky",
        )
        text = build_question_prompt(case)
        for number in range(1, 8):
            assert f"\n{number}. " in text
        assert "mixture of beagle and collie and husky" in text

    def test_relation_question_appended(self):
        text = build_question_prompt(CAT_DOG, relation_question="Is the cat left of the dog?")
        assert "\n6. Is the cat left of the dog?" in text


class TestParseAnswers:
    def test_inline_fixture(self):
        raw = "1. looks feline True 2. clean shape True 3. canine present True 4. extra leg False 5. no blend False"
        t = parse_answers(raw)
        assert t.answers == (True, True, True, False, False)

    def test_empty_string_unparseable(self):
        assert parse_answers("").unparseable

    def test_mixed_case_tokens(self):
        raw = "1. true 2. FALSE 3. True 4. tRuE 5. false"
        assert parse_answers(raw).answers == (True, False, True, True, False)

    def test_last_verdict_wins_within_answer(self):
        raw = "1. could be True but on reflection False 2. True 3. True 4. True 5. False"
        assert parse_answers(raw).answers == (False, True, True, True, False)

    def test_missing_question_marks_unparseable(self):
        raw = "1. True 2. True 3. True 4. False"
        assert parse_answers(raw).unparseable

    def test_answer_without_verdict_marks_unparseable(self):
        raw = "1. True 2. hard to say 3. True 4. True 5. False"
        assert parse_answers(raw).unparseable

    def test_multiline_with_reasoning(self):
        raw = (
            "1. The image clearly shows a cat.\nTrue\n"
            "2. Shape is regular.\nTrue\n"
            "3. There is also a dog.\nTrue\n"
            "4. The dog has five legs.\nFalse\n"
            "5. The subjects are separate.\nFalse\n"
        )
        assert parse_answers(raw).answers == (True, True, True, False, False)

    def test_relation_parsing(self):
        raw = "1. True 2. True 3. True 4. True 5. False 6. True"
        t = parse_answers(raw, has_relation=True)
        assert t.answers == (True, True, True, True, False)
        assert t.relation is True

    def test_restated_list_uses_final_answers(self):
        raw = (
            "Plan: 1. check cat 2. check artifacts 3. check dog 4. artifacts 5. blending\n"
            "Answers: 1. True 2. True 3. False 4. False 5. False"
        )
        assert parse_answers(raw).answers == (True, True, False, False, False)


def transcript(answers, case_id="cat_dog", image_id="img", relation=None):
    return VQATranscript(case_id=case_id, image_id=image_id, answers=answers, relation=relation)


class TestComputeScores:
    def test_forced_single_all_good(self):
        report = compute_scores([transcript((True, True, True, True, False))])
        assert (report.ext_pct, report.rec_pct, report.wom_pct) == (100.0, 100.0, 100.0)

    def test_forced_single_unrecognizable_mixture(self):
        report = compute_scores([transcript((True, False, True, True, True))])
        assert (report.ext_pct, report.rec_pct, report.wom_pct) == (100.0, 0.0, 0.0)

    def test_hand_counted_75_percent(self):
        batch = [
            transcript((True, True, True, True, False)),
            transcript((True, False, True, True, False)),
            transcript((True, True, True, False, True)),
            transcript((False, True, True, True, False)),
        ]
        report = compute_scores(batch)
        assert report.ext_pct == 75.0

    def test_permutation_invariant(self):
        batch = [
            transcript((True, True, True, True, False)),
            transcript((False, True, False, True, True)),
            transcript((True, False, True, False, False)),
        ]
        forward = compute_scores(batch)
        backward = compute_scores(list(reversed(batch)))
        assert (forward.ext_pct, forward.rec_pct, forward.wom_pct) == (
            backward.ext_pct,
            backward.rec_pct,
            backward.wom_pct,
        )

    def test_mixture_score_independent_of_other_answers(self):
        low = [transcript((False, False, False, False, False))] * 4
        high = [transcript((True, True, True, True, False))] * 4
        assert compute_scores(low).wom_pct == compute_scores(high).wom_pct == 100.0

    def test_unparseable_excluded_from_denominator(self):
        batch = [
            transcript((True, True, True, True, False)),
            transcript(None),
        ]
        report = compute_scores(batch)
        assert report.total == 2 and report.parseable == 1 and report.unparseable == 1
        assert report.ext_pct == 100.0

    def test_zero_parseable_raises(self):
        with pytest.raises(EmptyInputError):
            compute_scores([transcript(None), transcript(None)])

    def test_three_subject_answers(self):
        # Third subject exists but is unrecognizable; no mixture.
        report = compute_scores(
            [transcript((True, True, True, True, True, False, False), case_id="b_c_h")]
        )
        assert report.ext_pct == 100.0
        assert report.rec_pct == 0.0
        assert report.wom_pct == 100.0
        assert report.notes

    def test_existence_dominates_joint_existence_recognizability(self):
        import random

        rand = random.Random(7)
        batch = [
            transcript(tuple(rand.random() < 0.6 for _ in range(5))) for _ in range(50)
        ]
        report = compute_scores(batch)
        both = sum(1 for t in batch if all(t.answers[0:4])) / len(batch) * 100.0
        assert report.ext_pct >= both

    def test_relation_reported_only_when_present(self):
        without = compute_scores([transcript((True, True, True, True, False))])
        assert without.rel_pct is None
        with_rel = compute_scores(
            [transcript((True, True, True, True, False), relation=True)]
        )
        assert with_rel.rel_pct == 100.0


class TestLoadPromptSet:
    def test_format_line(self, tmp_path):
        path = tmp_path / "prompts.txt"
        path.write_text("a cat and a dog | 2,6\n", encoding="utf-8")
        cases = load_prompt_set(path)
        assert cases[0].class_a == "cat" and cases[0].class_b == "dog"
        assert cases[0].subject_indices == (2, 6)

    def test_empty_file_raises(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("# only comments\n", encoding="utf-8")
        with pytest.raises(EmptyInputError):
            load_prompt_set(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a cat and a dog | 1,4\nnot a case\n", encoding="utf-8")
        with pytest.raises(PromptFormatError) as excinfo:
            load_prompt_set(path)
        assert excinfo.value.line_number == 2

    def test_bad_indices_report_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("a cat and a dog | one,two\n", encoding="utf-8")
        with pytest.raises(PromptFormatError) as excinfo:
            load_prompt_set(path)
        assert excinfo.value.line_number == 1

    def test_seed_file_ships_figure_prompts(self):
        cases = load_prompt_set(seed_prompt_path())
        assert len(cases) >= 7
        prompts = {c.prompt for c in cases}
        assert "a rose and a carnation" in prompts
        assert "a hummingbird and a kingfisher" in prompts
        assert "a bear riding an elephant with a rabbit" in prompts
        three = [c for c in cases if c.class_c is not None]
        assert any(c.classes == ("beagle", "collie", "husky") for c in three)
        assert any(c.classes == ("bear", "elephant", "rabbit") for c in three)

    def test_non_template_prompt_uses_indices(self, tmp_path):
        path = tmp_path / "prompts.txt"
        path.write_text("a bear riding an elephant with a rabbit | 1,4,7\n", encoding="utf-8")
        case = load_prompt_set(path)[0]
        assert case.classes == ("bear", "elephant", "rabbit")


GOOD_RAW = "1. True 2. True 3. True 4. True 5. False"


def write_fixture(directory, case_id, image_id, raw):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{case_id}__{image_id}.json").write_text(
        json.dumps({"case_id": case_id, "image_id": image_id, "raw": raw}),
        encoding="utf-8",
    )


class TestScoreBatch:
    def test_offline_fixtures_match_compute_scores(self, tmp_path):
        fixtures = tmp_path / "fixtures"
        write_fixture(fixtures, "cat_dog", "s1", GOOD_RAW)
        write_fixture(fixtures, "cat_dog", "s2", "1. True 2. False 3. True 4. True 5. True")
        report = score_batch(tmp_path, [CAT_DOG], offline_fixtures=fixtures)
        expected = compute_scores(
            [
                parse_answers(GOOD_RAW, case_id="cat_dog", image_id="s1"),
                parse_answers(
                    "1. True 2. False 3. True 4. True 5. True", case_id="cat_dog", image_id="s2"
                ),
            ]
        )
        assert report.ext_pct == expected.ext_pct
        assert report.rec_pct == expected.rec_pct
        assert report.wom_pct == expected.wom_pct

    def test_offline_is_deterministic(self, tmp_path):
        fixtures = tmp_path / "fixtures"
        write_fixture(fixtures, "cat_dog", "s1", GOOD_RAW)
        first = score_batch(tmp_path, [CAT_DOG], offline_fixtures=fixtures)
        second = score_batch(tmp_path, [CAT_DOG], offline_fixtures=fixtures)
        assert first == second

    def _endpoint_setup(self, tmp_path, monkeypatch, handler):
        monkeypatch.setenv("SELFCROSS_VLM_API_KEY", "test-key")
        images = tmp_path / "images"
        images.mkdir()
        (images / "cat_dog_1.png").write_bytes(b"\x89PNG fake")
        endpoint = EndpointConfig(
            url="https://vlm.example/v1/chat/completions",
            model="test-vlm",
            max_retries=1,
            requests_per_second=1000.0,
        )
        return images, endpoint, httpx.MockTransport(handler)

    def test_endpoint_roundtrip_persists_before_parsing(self, tmp_path, monkeypatch):
        def handler(request):
            assert request.headers["Authorization"] == "Bearer test-key"
            body = json.loads(request.content)
            assert body["model"] == "test-vlm"
            assert "Is there cat appearing" in body["messages"][0]["content"][0]["text"]
            return httpx.Response(
                200, json={"choices": [{"message": {"content": GOOD_RAW}}]}
            )

        images, endpoint, transport = self._endpoint_setup(tmp_path, monkeypatch, handler)
        transcripts = tmp_path / "transcripts"
        report = score_batch(
            images, [CAT_DOG], endpoint=endpoint, transcript_dir=transcripts, transport=transport
        )
        assert report.ext_pct == 100.0
        saved = list(transcripts.glob("*.json"))
        assert len(saved) == 1
        assert json.loads(saved[0].read_text())["raw"] == GOOD_RAW

    def test_malformed_reply_counts_unparseable_and_continues(self, tmp_path, monkeypatch):
        import base64

        bad_image_marker = base64.b64encode(b"gibberish source").decode("ascii")

        def handler(request):
            body = json.loads(request.content)
            url = body["messages"][0]["content"][1]["image_url"]["url"]
            if bad_image_marker in url:
                return httpx.Response(
                    200, json={"choices": [{"message": {"content": "no verdicts here"}}]}
                )
            return httpx.Response(200, json={"choices": [{"message": {"content": GOOD_RAW}}]})

        images, endpoint, transport = self._endpoint_setup(tmp_path, monkeypatch, handler)
        (images / "cat_dog_2.png").write_bytes(b"gibberish source")
        report = score_batch(
            images,
            [CAT_DOG],
            endpoint=endpoint,
            transcript_dir=tmp_path / "transcripts",
            transport=transport,
        )
        assert report.total == 2
        assert report.unparseable == 1
        assert report.parseable == 1

    def test_auth_failure_aborts(self, tmp_path, monkeypatch):
        def handler(request):
            return httpx.Response(401, json={"error": "bad key"})

        images, endpoint, transport = self._endpoint_setup(tmp_path, monkeypatch, handler)
        with pytest.raises(EndpointAuthError):
            score_batch(
                images,
                [CAT_DOG],
                endpoint=endpoint,
                transcript_dir=tmp_path / "transcripts",
                transport=transport,
            )

    def test_total_retry_exhaustion_is_empty_input(self, tmp_path, monkeypatch):
        images, endpoint, transport = self._endpoint_setup(
            tmp_path, monkeypatch, lambda request: httpx.Response(503)
        )
        with pytest.raises(EmptyInputError):
            # Every request fails; nothing parseable remains, which surfaces
            # as an empty-input error rather than a crash mid-run.
            score_batch(
                images,
                [CAT_DOG],
                endpoint=endpoint,
                transcript_dir=tmp_path / "transcripts",
                transport=transport,
            )

    def test_partial_failure_reports_coverage_note(self, tmp_path, monkeypatch):
        import base64

        doomed_marker = base64.b64encode(b"always fails").decode("ascii")

        def handler(request):
            body = json.loads(request.content)
            url = body["messages"][0]["content"][1]["image_url"]["url"]
            if doomed_marker in url:
                return httpx.Response(503)
            return httpx.Response(200, json={"choices": [{"message": {"content": GOOD_RAW}}]})

        images, endpoint, transport = self._endpoint_setup(tmp_path, monkeypatch, handler)
        (images / "cat_dog_2.png").write_bytes(b"always fails")
        report = score_batch(
            images,
            [CAT_DOG],
            endpoint=endpoint,
            transcript_dir=tmp_path / "transcripts",
            transport=transport,
        )
        assert report.parseable == 1
        assert any("coverage" in note for note in report.notes)

    def test_missing_key_is_auth_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv("SELFCROSS_VLM_API_KEY", raising=False)
        endpoint = EndpointConfig(url="https://vlm.example", model="m")
        with pytest.raises(EndpointAuthError):
            score_batch(tmp_path, [CAT_DOG], endpoint=endpoint)
