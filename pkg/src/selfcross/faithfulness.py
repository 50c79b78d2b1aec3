"""Faithfulness scoring of generated images by visual question answering.

A vision-language endpoint answers a fixed battery of True/False questions
per image: existence and recognizability of each subject class, plus whether
the content mixes the classes. Aggregates report the percentage of images
where all subjects exist (Ext), all are recognizable (Rec), and no mixture
appears (w/o M); a relation question can be supplied for spatial prompt sets
(Rel). Raw endpoint output is always persisted before parsing.
"""

from __future__ import annotations

import base64
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import httpx

from .errors import EmptyInputError, EndpointAuthError, PromptFormatError

__all__ = [
    "PromptCase",
    "VQATranscript",
    "ScoreReport",
    "CaseScores",
    "EndpointConfig",
    "build_question_prompt",
    "parse_answers",
    "compute_scores",
    "score_batch",
    "load_prompt_set",
    "seed_prompt_path",
]

_RECOGNIZABLE = (
    "Is the generated {cls} recognizable and regular (without artifacts) in terms of "
    "its shape and semantic structure only? For example, answer False if a two-leg "
    "animal has three or more legs, or a two-eye animal has four eyes, or a two-ear "
    "animal has one or three ears. Ignore style, object size in comparison to its "
    "surroundings. Give a True/False answer after reasoning."
)
_EXISTS = "Is there {cls} appearing in this image? Give a True/False answer after reasoning."
_MIXTURE = (
    "Is the generated content a mixture of {classes}? An example of mixture is that "
    "Sphinx resembles a mixture of a person and a lion. Give a True/False answer "
    "after reasoning."
)
_HEADER = (
    "You are now an expert to check the faithfulness of the synthesized images. "
    'The prompt is "{prompt}". Based on the image description below, reason and '
    "answer the following questions:"
)


@dataclass(frozen=True)
class PromptCase:
    """One evaluation prompt with its subject classes and token indices."""

    prompt: str
    class_a: str
    class_b: str
    class_c: str | None = None
    subject_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.class_a or not self.class_b:
            raise PromptFormatError(f"case needs at least two classes: {self.prompt!r}")

    @property
    def classes(self) -> tuple[str, ...]:
        if self.class_c is None:
            return (self.class_a, self.class_b)
        return (self.class_a, self.class_b, self.class_c)

    @property
    def ident(self) -> str:
        return "_".join(c.replace(" ", "-") for c in self.classes)

    @property
    def question_count(self) -> int:
        return 2 * len(self.classes) + 1


@dataclass(frozen=True)
class VQATranscript:
    """Parsed True/False answers for one (case, image) pair.

    ``answers`` is None when the raw text could not be matched to the
    expected question count; such transcripts count as unparseable.
    """

    case_id: str
    image_id: str
    answers: tuple[bool, ...] | None
    relation: bool | None = None
    raw: str = ""

    @property
    def unparseable(self) -> bool:
        return self.answers is None


@dataclass(frozen=True)
class CaseScores:
    case_id: str
    images: int
    ext_pct: float
    rec_pct: float
    wom_pct: float
    rel_pct: float | None = None


@dataclass(frozen=True)
class ScoreReport:
    """Aggregated percentages over all parseable transcripts."""

    ext_pct: float
    rec_pct: float
    wom_pct: float
    rel_pct: float | None
    total: int
    parseable: int
    unparseable: int
    per_case: tuple[CaseScores, ...] = ()
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        for value in (self.ext_pct, self.rec_pct, self.wom_pct):
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"percentage {value} outside [0, 100]")
        if self.parseable != self.total - self.unparseable:
            raise ValueError("parseable/unparseable counts do not add up")


def build_question_prompt(case: PromptCase, relation_question: str | None = None) -> str:
    """The full question battery for one case, numbered, classes substituted.

    Two-class cases produce the canonical five questions; extra classes add
    an existence and a recognizability question each, keeping one mixture
    question that lists every class. ``relation_question`` is appended as a
    final numbered question when given.
    """
    questions: list[str] = []
    for cls in case.classes:
        questions.append(_EXISTS.format(cls=cls))
        questions.append(_RECOGNIZABLE.format(cls=cls))
    questions.append(_MIXTURE.format(classes=" and ".join(case.classes)))
    if relation_question:
        questions.append(relation_question)
    lines = [_HEADER.format(prompt=case.prompt)]
    lines += [f"{i}. {q}" for i, q in enumerate(questions, start=1)]
    return "\n".join(lines)


_MARKER = re.compile(r"(?:^|\n|\s)(\d{1,2})[.):]")
_VERDICT = re.compile(r"\b(true|false)\b", re.IGNORECASE)


def parse_answers(
    raw: str,
    expected_questions: int = 5,
    has_relation: bool = False,
    case_id: str = "",
    image_id: str = "",
) -> VQATranscript:
    """Extract one True/False verdict per numbered answer.

    The last True/False token inside each numbered segment wins (models
    reason before answering). If any expected question number is missing or
    carries no verdict, the transcript is marked unparseable rather than
    raising.
    """
    wanted = expected_questions + (1 if has_relation else 0)
    segments: dict[int, str] = {}
    markers = list(_MARKER.finditer(raw))
    for pos, match in enumerate(markers):
        number = int(match.group(1))
        end = markers[pos + 1].start() if pos + 1 < len(markers) else len(raw)
        # A repeated number means the model restated the list; keep the last.
        segments[number] = raw[match.end() : end]

    verdicts: list[bool] = []
    for number in range(1, wanted + 1):
        segment = segments.get(number)
        if segment is None:
            return VQATranscript(case_id, image_id, None, raw=raw)
        tokens = _VERDICT.findall(segment)
        if not tokens:
            return VQATranscript(case_id, image_id, None, raw=raw)
        verdicts.append(tokens[-1].lower() == "true")

    relation = verdicts.pop() if has_relation else None
    return VQATranscript(case_id, image_id, tuple(verdicts), relation=relation, raw=raw)


def _split_answers(answers: tuple[bool, ...]) -> tuple[list[bool], list[bool], bool]:
    if len(answers) < 3 or len(answers) % 2 == 0:
        raise EmptyInputError(
            f"transcript carries {len(answers)} answers; expected an odd count >= 3"
        )
    existence = list(answers[0:-1:2])
    recognizability = list(answers[1:-1:2])
    mixture = answers[-1]
    return existence, recognizability, mixture


def compute_scores(transcripts: Sequence[VQATranscript]) -> ScoreReport:
    """Aggregate Ext / Rec / w/o M (and Rel, when present) percentages.

    Ext counts transcripts whose existence answers are all True, Rec those
    whose recognizability answers are all True, and w/o M those whose
    mixture answer is False. Permutation-invariant over transcripts.
    """
    parseable = [t for t in transcripts if t.answers is not None]
    if not parseable:
        raise EmptyInputError("no parseable transcripts to score")

    def tally(batch: Sequence[VQATranscript]) -> tuple[float, float, float, float | None, int]:
        ext = rec = wom = 0
        rel_true = rel_seen = 0
        for t in batch:
            existence, recognizability, mixture = _split_answers(t.answers)
            ext += all(existence)
            rec += all(recognizability)
            wom += not mixture
            if t.relation is not None:
                rel_seen += 1
                rel_true += t.relation
        n = len(batch)
        rel_pct = 100.0 * rel_true / rel_seen if rel_seen else None
        return 100.0 * ext / n, 100.0 * rec / n, 100.0 * wom / n, rel_pct, n

    ext_pct, rec_pct, wom_pct, rel_pct, n = tally(parseable)

    per_case: list[CaseScores] = []
    for case_id in sorted({t.case_id for t in parseable}):
        batch = [t for t in parseable if t.case_id == case_id]
        c_ext, c_rec, c_wom, c_rel, c_n = tally(batch)
        per_case.append(CaseScores(case_id, c_n, c_ext, c_rec, c_wom, c_rel))

    notes = []
    if any(len(t.answers) > 5 for t in parseable):
        notes.append("multi-subject protocol extension in effect (more than five questions)")
    return ScoreReport(
        ext_pct=ext_pct,
        rec_pct=rec_pct,
        wom_pct=wom_pct,
        rel_pct=rel_pct,
        total=len(transcripts),
        parseable=n,
        unparseable=len(transcripts) - n,
        per_case=tuple(per_case),
        notes=tuple(notes),
    )


@dataclass(frozen=True)
class EndpointConfig:
    """Chat-completions-style VLM endpoint with image attachments."""

    url: str
    model: str
    api_key_env: str = "SELFCROSS_VLM_API_KEY"
    max_retries: int = 5
    timeout: float = 60.0
    max_in_flight: int = 4
    requests_per_second: float = 2.0

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env, "")
        if not key:
            raise EndpointAuthError(
                f"no API key in environment variable {self.api_key_env}"
            )
        return key


class _TokenBucket:
    def __init__(self, rate: float):
        self.rate = rate
        self.allowance = rate
        self.last = time.monotonic()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = time.monotonic()
                self.allowance = min(self.rate, self.allowance + (now - self.last) * self.rate)
                self.last = now
                if self.allowance >= 1.0:
                    self.allowance -= 1.0
                    return
                wait = (1.0 - self.allowance) / self.rate
            time.sleep(wait)


def _ask_endpoint(
    client: httpx.Client,
    endpoint: EndpointConfig,
    question_prompt: str,
    image_bytes: bytes,
    bucket: _TokenBucket,
) -> str:
    payload = {
        "model": endpoint.model,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": question_prompt},
                    {
                        "type": "image_url",
                        "image_url": {
                            "url": "data:image/png;base64,"
                            + base64.b64encode(image_bytes).decode("ascii")
                        },
                    },
                ],
            }
        ],
    }
    delay = 0.5
    for attempt in range(endpoint.max_retries + 1):
        bucket.acquire()
        try:
            response = client.post(endpoint.url, json=payload, timeout=endpoint.timeout)
        except httpx.HTTPError:
            if attempt == endpoint.max_retries:
                raise
            time.sleep(delay)
            delay *= 2
            continue
        if response.status_code in (401, 403):
            raise EndpointAuthError(f"endpoint rejected credentials ({response.status_code})")
        if response.status_code >= 500 or response.status_code == 429:
            if attempt == endpoint.max_retries:
                response.raise_for_status()
            time.sleep(delay)
            delay *= 2
            continue
        response.raise_for_status()
        body = response.json()
        return body["choices"][0]["message"]["content"]
    raise httpx.HTTPError("retries exhausted")  # pragma: no cover


def _persist_transcript(directory: Path, case_id: str, image_id: str, raw: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{case_id}__{image_id}.json"
    path.write_text(
        json.dumps({"case_id": case_id, "image_id": image_id, "raw": raw}, indent=2),
        encoding="utf-8",
    )
    return path


def _load_fixture_transcripts(
    fixtures: Path, cases: Sequence[PromptCase], relation_question: str | None
) -> list[VQATranscript]:
    by_ident = {c.ident: c for c in cases}
    transcripts = []
    for path in sorted(fixtures.glob("*.json")):
        doc = json.loads(path.read_text(encoding="utf-8"))
        case = by_ident.get(doc.get("case_id", ""))
        expected = case.question_count if case else 5
        transcripts.append(
            parse_answers(
                doc.get("raw", ""),
                expected_questions=expected,
                has_relation=relation_question is not None,
                case_id=doc.get("case_id", ""),
                image_id=doc.get("image_id", ""),
            )
        )
    return transcripts


def _case_images(images_dir: Path, case: PromptCase) -> list[Path]:
    out: list[Path] = []
    for ext in ("*.png", "*.jpg", "*.jpeg"):
        out.extend(images_dir.glob(f"{case.ident}*{ext.lstrip('*')}"))
    return sorted(out)


def score_batch(
    images_dir: Path | str,
    cases: Sequence[PromptCase],
    endpoint: EndpointConfig | None = None,
    offline_fixtures: Path | str | None = None,
    transcript_dir: Path | str = "transcripts",
    relation_question: str | None = None,
    transport: httpx.BaseTransport | None = None,
) -> ScoreReport:
    """Score a directory of generated images against their prompt cases.

    Online mode sends each image with the question battery to the endpoint,
    persisting every raw reply to ``transcript_dir`` before any parsing;
    exhausted retries mark the image failed and scoring continues, while an
    authentication failure aborts immediately. Offline mode skips the network
    and aggregates previously persisted transcripts from
    ``offline_fixtures``.
    """
    if offline_fixtures is not None:
        transcripts = _load_fixture_transcripts(Path(offline_fixtures), cases, relation_question)
        if not transcripts:
            raise EmptyInputError(f"no transcript fixtures under {offline_fixtures}")
        return compute_scores(transcripts)

    if endpoint is None:
        raise EmptyInputError("need either an endpoint or offline fixtures")
    images_dir = Path(images_dir)
    transcript_dir = Path(transcript_dir)
    headers = {"Authorization": f"Bearer {endpoint.api_key()}"}
    bucket = _TokenBucket(endpoint.requests_per_second)
    transcripts: list[VQATranscript] = []
    failures: list[str] = []
    lock = threading.Lock()

    with httpx.Client(headers=headers, transport=transport) as client:

        def worker(case: PromptCase, image_path: Path) -> None:
            question = build_question_prompt(case, relation_question)
            try:
                raw = _ask_endpoint(client, endpoint, question, image_path.read_bytes(), bucket)
            except EndpointAuthError:
                raise
            except httpx.HTTPError as exc:
                with lock:
                    failures.append(f"{case.ident}/{image_path.name}: {exc}")
                return
            _persist_transcript(transcript_dir, case.ident, image_path.stem, raw)
            transcript = parse_answers(
                raw,
                expected_questions=case.question_count,
                has_relation=relation_question is not None,
                case_id=case.ident,
                image_id=image_path.stem,
            )
            with lock:
                transcripts.append(transcript)

        with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
            futures = [
                pool.submit(worker, case, image)
                for case in cases
                for image in _case_images(images_dir, case)
            ]
            for future in futures:
                future.result()

    report = compute_scores(transcripts)
    if failures:
        note = f"{len(failures)} request(s) failed after retries; coverage is partial"
        report = ScoreReport(
            ext_pct=report.ext_pct,
            rec_pct=report.rec_pct,
            wom_pct=report.wom_pct,
            rel_pct=report.rel_pct,
            total=report.total,
            parseable=report.parseable,
            unparseable=report.unparseable,
            per_case=report.per_case,
            notes=report.notes + (note,),
        )
    return report


_CLASS_PATTERN = re.compile(
    r"\ban?\s+(\w+)\s+and\s+an?\s+(\w+)(?:\s+and\s+an?\s+(\w+))?\b", re.IGNORECASE
)


def _classes_for(prompt: str, indices: tuple[int, ...], line_number: int) -> tuple[str, ...]:
    match = _CLASS_PATTERN.search(prompt)
    if match:
        return tuple(g for g in match.groups() if g)
    words = prompt.split()
    try:
        return tuple(words[i] for i in indices)
    except IndexError:
        raise PromptFormatError(
            f"cannot infer subject classes from {prompt!r} with indices {indices}",
            line_number,
        ) from None


def load_prompt_set(path: Path | str) -> list[PromptCase]:
    """Parse a prompt-set file: one `prompt | idx,idx[,idx]` case per line.

    Blank lines and lines starting with '#' are skipped. Classes come from
    the "a X and a Y (and a Z)" pattern when the prompt matches it, else
    from the whitespace tokens at the given 0-based indices.
    """
    cases: list[PromptCase] = []
    text = Path(path).read_text(encoding="utf-8")
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = [p.strip() for p in stripped.split("|")]
        if len(parts) != 2 or not parts[0]:
            raise PromptFormatError(
                f"expected 'prompt | indices', got {stripped!r}", line_number
            )
        try:
            indices = tuple(int(tok) for tok in parts[1].split(",") if tok.strip())
        except ValueError:
            raise PromptFormatError(
                f"bad subject indices {parts[1]!r}", line_number
            ) from None
        if not indices:
            raise PromptFormatError("no subject indices given", line_number)
        classes = _classes_for(parts[0], indices, line_number)
        if len(classes) < 2:
            raise PromptFormatError(
                f"need at least two subject classes, found {classes}", line_number
            )
        cases.append(
            PromptCase(
                prompt=parts[0],
                class_a=classes[0],
                class_b=classes[1],
                class_c=classes[2] if len(classes) > 2 else None,
                subject_indices=indices,
            )
        )
    if not cases:
        raise EmptyInputError(f"prompt set {path} contains no cases")
    return cases


def seed_prompt_path() -> Path:
    """Path of the bundled similar-subject seed prompts."""
    return Path(__file__).parent / "data" / "ssd_prompts.txt"
