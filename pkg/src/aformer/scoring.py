"""Token-level error-rate scoring: minimal-edit alignment with explicit
substitution/insertion/deletion counts, plus evaluation of a trained model
over a test set."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import Tokenizer, cmvn
from .model import AformerModel, decode_utterance


class ScoreError(ValueError):
    """Invalid scoring input (empty reference, mismatched files)."""


def edit_distance_align(ref: list, hyp: list) -> tuple[int, int, int]:
    """Minimal-edit alignment counts (substitutions, insertions, deletions).

    Insertions are extra hypothesis tokens, deletions are missed reference
    tokens. When several alignments reach the minimum, the backtrace prefers
    substitution over insertion over deletion.
    """
    if len(ref) == 0:
        raise ScoreError("reference must be nonempty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = d[i, j - 1] + 1
            dele = d[i - 1, j] + 1
            d[i, j] = min(sub, ins, dele)
    s_count = i_count = d_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] and ref[i - 1] == hyp[j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            s_count += 1
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            i_count += 1
            j -= 1
        else:
            d_count += 1
            i -= 1
    return s_count, i_count, d_count


@dataclass
class ScoreReport:
    name: str
    n_utts: int
    ref_tokens: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def error_rate(self) -> float:
        return self.edits / self.ref_tokens if self.ref_tokens else 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_utts": self.n_utts,
            "ref_tokens": self.ref_tokens,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "edits": self.edits,
            "error_rate": self.error_rate,
        }


def score_pairs(refs: list[list], hyps: list[list], name: str = "test") -> ScoreReport:
    """Micro-averaged error rate over (reference, hypothesis) token-sequence
    pairs: total edits / total reference tokens."""
    if len(refs) != len(hyps):
        raise ScoreError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    s = i = d = ref_tokens = 0
    for ref, hyp in zip(refs, hyps):
        ds, di, dd = edit_distance_align(ref, hyp)
        s, i, d = s + ds, i + di, d + dd
        ref_tokens += len(ref)
    return ScoreReport(name=name, n_utts=len(refs), ref_tokens=ref_tokens,
                       substitutions=s, insertions=i, deletions=d)


SPACE_MARK = "<sp>"


def to_symbols(text: str) -> list[str]:
    """Character tokens as whitespace-safe symbols (space -> <sp>)."""
    return [SPACE_MARK if c == " " else c for c in text]


def from_symbols(symbols: list[str]) -> str:
    return "".join(" " if s == SPACE_MARK else s for s in symbols)


def evaluate_model(model: AformerModel, records, tokenizer: Tokenizer,
                   beam: int = 4, ctc_weight: float | None = None,
                   name: str = "test") -> ScoreReport:
    """Decode every record (CMVN-normalized) and score characters against the
    reference transcription."""
    refs, hyps = [], []
    with nm.no_grad():
        for rec in records:
            feats = cmvn(rec.features)
            result = decode_utterance(model, feats, beam=beam, ctc_weight=ctc_weight)
            hyp_text = tokenizer.detokenize(result.tokens) if result.tokens else ""
            refs.append(to_symbols(rec.tokens))
            hyps.append(to_symbols(hyp_text))
    return score_pairs(refs, hyps, name=name)
