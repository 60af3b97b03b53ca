"""Answer scoring: ROUGE-L textual overlap and the judge-backed semantic score.

Both score types share one dispatch surface. ROUGE-L is reported on a 0-100
percent scale; judge scores are integers on a 0-10 scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from .cases import Partition

ROUGE_L = "rouge_l"
JUDGE = "judge"
SCORE_KINDS = (ROUGE_L, JUDGE)

# CJK ranges tokenized per character: Han (unified + ext A + compatibility +
# supplementary planes), Hiragana, Katakana.
_CJK_RANGES = (
    (0x3040, 0x309F),
    (0x30A0, 0x30FF),
    (0x31F0, 0x31FF),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2FA1F),
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str) -> list[str]:
    """Split text into score tokens.

    Han/Hiragana/Katakana characters become single-character tokens; maximal
    runs of other letters/digits become lowercased word tokens; everything
    else separates.
    """
    tokens: list[str] = []
    word: list[str] = []

    def flush() -> None:
        if word:
            tokens.append("".join(word).lower())
            word.clear()

    for ch in text:
        if _is_cjk(ch):
            flush()
            tokens.append(ch)
        elif ch.isalnum():
            word.append(ch)
        else:
            flush()
    flush()
    return tokens


def lcs_length(a: list[str], b: list[str]) -> int:
    """Length of the longest common subsequence of two token lists."""
    if not a or not b:
        return 0
    # Single rolling row keeps memory at O(min side).
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 on a 0-100 scale.

    F1 = 2PR/(P+R) with P = LCS/|candidate tokens| and R = LCS/|reference
    tokens|; 0.0 when either side tokenizes to nothing or there is no overlap.
    """
    c = tokenize(candidate)
    r = tokenize(reference)
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    precision = lcs / len(c)
    recall = lcs / len(r)
    return 100.0 * 2.0 * precision * recall / (precision + recall)


class ScoringError(Exception):
    """A score could not be obtained for an item (judge failure etc.)."""


@dataclass(frozen=True)
class ScoreValue:
    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind == ROUGE_L:
            if not 0.0 <= self.value <= 100.0:
                raise ValueError(f"rouge_l value {self.value} outside [0, 100]")
        elif self.kind == JUDGE:
            if self.value != int(self.value) or not 0 <= self.value <= 10:
                raise ValueError(f"judge value {self.value} not an integer in 0..10")
        else:
            raise ValueError(f"unknown score kind '{self.kind}'")


@dataclass(frozen=True)
class JudgeRequest:
    """Inputs forwarded to the judge for one semantic comparison."""

    language: Partition
    question: str
    reference_answer: str
    candidate_answer: str


class JudgeBackend(Protocol):
    def score(self, request: JudgeRequest) -> tuple[int, str]:
        """Return (score 0-10, reason). Raises ScoringError on failure."""
        ...  # pragma: no cover


class StubJudge:
    """Deterministic offline judge used by tests and synthetic runs.

    Exact matches (after whitespace trim) score 10; anything else maps the
    ROUGE-L overlap onto the 0-10 scale.
    """

    def score(self, request: JudgeRequest) -> tuple[int, str]:
        if not request.candidate_answer.strip():
            return 0, "empty candidate"
        if request.candidate_answer.strip() == request.reference_answer.strip():
            return 10, "exact match"
        overlap = rouge_l(request.candidate_answer, request.reference_answer)
        value = min(10, max(0, round(overlap / 10.0)))
        return value, "overlap heuristic"


class Scorer:
    """Dispatches a comparison to the requested score kinds.

    For locality-style comparisons the reference passed in is the cached
    base-model output, not a benchmark answer; the scorer does not care.
    """

    def __init__(self, kinds: tuple[str, ...], judge: JudgeBackend | None = None):
        for kind in kinds:
            if kind not in SCORE_KINDS:
                raise ValueError(f"unknown score kind '{kind}'")
        if JUDGE in kinds and judge is None:
            raise ValueError("judge scoring requested but no judge configured")
        self.kinds = tuple(kinds)
        self._judge = judge

    def score(
        self,
        kind: str,
        candidate: str,
        reference: str,
        *,
        language: Partition,
        question: str,
    ) -> ScoreValue:
        if kind == ROUGE_L:
            return ScoreValue(ROUGE_L, rouge_l(candidate, reference))
        if kind == JUDGE:
            if not candidate.strip():
                return ScoreValue(JUDGE, 0)
            assert self._judge is not None
            value, _reason = self._judge.score(
                JudgeRequest(
                    language=language,
                    question=question,
                    reference_answer=reference,
                    candidate_answer=candidate,
                )
            )
            return ScoreValue(JUDGE, value)
        raise ValueError(f"unknown score kind '{kind}'")
