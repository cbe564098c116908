"""Similarity algebra over directed match counts.

``m(a, b)`` is the number of accepted matches from ``a`` into ``b``; it is
not symmetric because the ratio test looks at ``b``'s neighbourhood only.
``M(a, b)`` averages both directions, and a class score ``S`` sums ``M``
over the members of the class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

from .sift import DEFAULT_RULE, KeypointSet, MatchRule, match_count


def symmetric_similarity(m_ab: int, m_ba: int) -> float:
    """Mean of the two directed match counts."""
    if m_ab < 0 or m_ba < 0:
        raise ValueError("match counts must be non-negative")
    return (m_ab + m_ba) / 2


@dataclass(frozen=True)
class MatchReport:
    id_a: Hashable
    id_b: Hashable
    m_ab: int
    m_ba: int

    @property
    def M(self) -> float:
        return symmetric_similarity(self.m_ab, self.m_ba)

    def swapped(self) -> "MatchReport":
        return MatchReport(self.id_b, self.id_a, self.m_ba, self.m_ab)


def compare(a: KeypointSet, b: KeypointSet, rule: MatchRule = DEFAULT_RULE) -> MatchReport:
    """Run both directed matchings between two keypoint sets."""
    return MatchReport(a.image_id, b.image_id, match_count(a, b, rule), match_count(b, a, rule))


@dataclass(frozen=True)
class ClassScore:
    class_id: Hashable
    n: int
    S: float

    def normalized(self) -> float:
        """S divided by class size; 0 for an empty class. Not used by default."""
        return self.S / self.n if self.n else 0.0


def class_score(class_id: Hashable, similarities: Iterable[float]) -> ClassScore:
    """Sum precomputed ``M`` values of the members of one class."""
    values = list(similarities)
    return ClassScore(class_id, len(values), float(sum(values)))


def class_similarity(query: KeypointSet, class_members: Sequence[KeypointSet],
                     rule: MatchRule = DEFAULT_RULE, class_id: Hashable = None) -> ClassScore:
    """``S(query, class)``: sum of ``M`` over every member, both directions matched."""
    return class_score(class_id, (compare(query, member, rule).M for member in class_members))


def assign_class(scores: Mapping[Hashable, float] | Iterable[ClassScore],
                 normalized: bool = False) -> Hashable | None:
    """Class with the largest score, or None when every score is zero.

    Ties go to the lowest class id so the outcome is reproducible.
    """
    if isinstance(scores, Mapping):
        table = {k: float(v) for k, v in scores.items()}
    else:
        table = {c.class_id: (c.normalized() if normalized else c.S) for c in scores}
    if not table:
        raise ValueError("assign_class needs at least one class")
    best = max(table.values())
    if best <= 0:
        return None
    return min((k for k, v in table.items() if v == best), key=_sort_key)


def _sort_key(class_id: Hashable) -> tuple:
    # mixed int/str ids still order deterministically
    return (0, class_id, "") if isinstance(class_id, (int, float)) else (1, 0, str(class_id))
