"""Slow, obviously-correct reimplementations used as test oracles.

Plain Python loops over lists on purpose: nothing here shares code with the
package under test.
"""

import math


def ranked(values, descending):
    idx = range(len(values))
    return sorted(idx, key=lambda i: (-values[i], i) if descending else (values[i], i))


def ace_oracle(S, z, K):
    """S: list of per-example score lists. Returns (good, bad, ambiguous) as flat indices."""
    N = len(S[0])
    top = [set(ranked(row, True)[:z]) for row in S]
    bottom = [set(ranked(row, False)[:z]) for row in S]
    ace = []
    ambiguous = set()
    for i in range(N):
        hit_top = any(i in t for t in top)
        hit_bottom = any(i in b for b in bottom)
        if hit_top and hit_bottom:
            ambiguous.add(i)
            ace.append(0.0)
            continue
        total = 0.0
        for j, row in enumerate(S):
            if i in top[j] or i in bottom[j]:
                total += row[i]
        ace.append(total)
    good = [i for i in ranked(ace, True) if ace[i] > 0][:K]
    bad = [i for i in ranked(ace, False) if ace[i] < 0][:K]
    return good, bad, ambiguous


def kn_oracle(S, z, K):
    N = len(S[0])
    top = [set(ranked(row, True)[:z]) for row in S]
    count = [sum(i in t for t in top) for i in range(N)]
    summed = [sum(row[i] for row in S) for i in range(N)]
    order = sorted(range(N), key=lambda i: (-count[i], -summed[i], i))
    return [i for i in order if count[i] > 0][:K]


def softmax_prob(logits, c):
    m = max(logits)
    e = [math.exp(x - m) for x in logits]
    return e[c] / sum(e)
