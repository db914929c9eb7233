"""
Ranking, grounding and answer metrics
=====================================
"""

import numpy as np

from mtvl.metrics import RankedList, iou, recall_at_k, vg_recall_at_k, vqa_accuracy

print("IoU of two offset squares:", iou((0, 0, 2, 2), (1, 1, 3, 3)))

# three queries ranking five candidates; ties go to the lower index
scores = np.array([
    [0.9, 0.1, 0.3, 0.3, 0.0],
    [0.2, 0.2, 0.8, 0.1, 0.5],
    [0.1, 0.4, 0.4, 0.9, 0.0],
])
gold = [{0}, {4}, {2}]
queries = [RankedList.from_scores(s, g) for s, g in zip(scores, gold)]
print("first hits:", [q.first_hit() for q in queries])
for k in (1, 2, 3):
    print(f"R@{k} = {recall_at_k(queries, k):.3f}")

# grounding: a region counts if it overlaps the phrase's box by at least one half
regions = [(0, 0, 10, 10), (0, 0, 10, 8), (30, 30, 40, 40)]
print("VG R@1:", vg_recall_at_k([[0.2, 0.9, 0.1]], regions, [(0, 0, 10, 10)], 1))

# answers: three agreeing annotators are enough for full credit
for n in range(5):
    print(f"{n} of 10 annotators agree -> {vqa_accuracy(1, [1] * n + [0] * (10 - n)):.3f}")
