"""Overlap resolution for linked mentions.

Overlapping mentions linked to different concepts all survive; overlapping
mentions of the same concept collapse to one survivor chosen by the policy
bound to the extraction strategy. Overlap groups are the connected components
of the pairwise-overlap relation, so chains of partially overlapping spans
resolve deterministically.
"""

from __future__ import annotations

from .extraction import RULE_BASED, SEGMENT_BASED
from .linking import DIRECT_RETRIEVAL, LinkedMention

HIGHEST_SCORE = "highest_score"
LONGEST_SPAN = "longest_span"

_POLICY_BY_STRATEGY = {RULE_BASED: HIGHEST_SCORE, SEGMENT_BASED: LONGEST_SPAN}


def policy_for_strategy(strategy: str) -> str:
    try:
        return _POLICY_BY_STRATEGY[strategy]
    except KeyError:
        raise ValueError(f"unknown extraction strategy {strategy!r}") from None


def _overlaps(a: LinkedMention, b: LinkedMention) -> bool:
    # positive-length intersection; touching endpoints do not overlap
    return max(a.span.start, b.span.start) < min(a.span.end, b.span.end)


def _rank_highest_score(m: LinkedMention) -> tuple:
    # direct-retrieval cosine outranks any llm tier; span length, then the
    # earlier start, break remaining ties
    if m.provenance == DIRECT_RETRIEVAL:
        primary, score = 1, float(m.score)
    else:
        primary, score = 0, 0.0
    return (primary, score, m.span.end - m.span.start, -m.span.start)


def _rank_longest_span(m: LinkedMention) -> tuple:
    return (m.span.end - m.span.start, -m.span.start)


def resolve_overlaps(mentions: list[LinkedMention], policy: str) -> list[LinkedMention]:
    """One survivor per same-concept overlap component; all else untouched."""
    if policy == HIGHEST_SCORE:
        rank = _rank_highest_score
    elif policy == LONGEST_SPAN:
        rank = _rank_longest_span
    else:
        raise ValueError(f"unknown resolution policy {policy!r}")

    survivors: list[LinkedMention] = []
    by_concept: dict[str, list[LinkedMention]] = {}
    for m in mentions:
        by_concept.setdefault(m.concept_id, []).append(m)

    for group in by_concept.values():
        group.sort(key=lambda m: (m.span.start, m.span.end))
        component: list[LinkedMention] = []
        reach = -1
        for m in group:
            if component and m.span.start >= reach:
                survivors.append(max(component, key=rank))
                component = []
            component.append(m)
            reach = max(reach, m.span.end)
        if component:
            survivors.append(max(component, key=rank))

    # same-(start,end) same-concept survivors cannot coexist, so adding the
    # concept makes this a total order and resolution output reproducible
    survivors.sort(key=lambda m: (m.span.start, m.span.end, m.concept_id))
    return survivors
