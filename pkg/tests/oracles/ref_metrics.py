"""Brute-force R-precision with exact fractions."""

from fractions import Fraction


def ref_page_of(pid):
    return pid[: pid.rindex("::")]


def ref_r_precision(ranked_passages, gold, level):
    gold = set(gold)
    R = len(gold)
    if level == "page":
        items = []
        for pid in ranked_passages:
            page = ref_page_of(pid)
            if page not in items:
                items.append(page)
    else:
        items = list(ranked_passages)
    hits = 0
    for i in range(min(R, len(items))):
        if items[i] in gold:
            hits += 1
    return Fraction(hits, R)
