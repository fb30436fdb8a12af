"""Independent brute-force reference implementations for the matcher.

Everything here is deliberately written as plain Python loops over the
defining formulas — no numpy matrix ops, no code shared with the engine —
so matcher tests compare two genuinely independent computations.
"""

import math


def dot(a, b):
    return math.fsum(x * y for x, y in zip(list(a), list(b)))


def brute_similarity(texts, visuals):
    """Slot-cosine sums via explicit loops."""
    return [
        [
            dot(t.subject, v.subject)
            + dot(t.predicate, v.predicate)
            + dot(t.object, v.object)
            for v in visuals
        ]
        for t in texts
    ]


def brute_argmax(values):
    best, best_value = 0, values[0]
    for i, value in enumerate(values):
        if value > best_value:
            best, best_value = i, value
    return best


def brute_indicator(S, allowed, direction="text-to-image"):
    """Per-row (or per-column) one-hot argmax with full-mask fallback."""
    rows, cols = len(S), len(S[0])
    B = [[0] * cols for _ in range(rows)]
    if direction == "text-to-image":
        for i in range(rows):
            if any(allowed[i]):
                masked = [S[i][j] if allowed[i][j] else -math.inf for j in range(cols)]
            else:
                masked = S[i]
            B[i][brute_argmax(masked)] = 1
    else:
        for j in range(cols):
            column_allowed = [allowed[i][j] for i in range(rows)]
            if any(column_allowed):
                masked = [S[i][j] if allowed[i][j] else -math.inf for i in range(rows)]
            else:
                masked = [S[i][j] for i in range(rows)]
            B[brute_argmax(masked)][j] = 1
    return B


def brute_instance_scores(S, B, text_triplets, visual_triplets, M, N):
    """Double sum over subject-role and object-role matches."""
    R = [[0.0] * N for _ in range(M)]
    for i in range(M):
        for k in range(N):
            subject_term = 0.0
            object_term = 0.0
            for r, tt in enumerate(text_triplets):
                for c, vt in enumerate(visual_triplets):
                    if B[r][c] == 0:
                        continue
                    if tt.subject_id == i and vt.subject_box == k:
                        subject_term += S[r][c]
                    if tt.object_id == i and vt.object_box == k:
                        object_term += S[r][c]
            R[i][k] = subject_term + object_term
    return R


def brute_pipeline(
    text_embeddings,
    visual_embeddings,
    allowed,
    text_triplets,
    visual_triplets,
    M,
    N,
    direction="text-to-image",
):
    """Similarity -> indicator -> propagation, all by loops."""
    S = brute_similarity(text_embeddings, visual_embeddings)
    B = brute_indicator(S, allowed, direction)
    return brute_instance_scores(S, B, text_triplets, visual_triplets, M, N)
