"""
Synthetic scenes with captions, questions and phrase boxes
==========================================================

Each world is a 64x64 frame holding a few coloured shapes. It comes with a
caption, a question with its answer and, for every noun phrase, the region
proposals that overlap the described object.
"""

from mtvl.data import ANSWERS, generate_world, make_splits
from mtvl.metrics import iou

world = generate_world(seed=0, world_id=3)

for obj in world.objects:
    print(f"{obj.size:>5} {obj.color:>6} {obj.shape:<8} box={tuple(round(v, 1) for v in obj.box)}")

print("\ncaption :", " ".join(world.caption))
print("question:", " ".join(world.question), "->", ANSWERS[world.answers[0][0]])

# phrases are 1-based inclusive word spans; gold regions are 0-based rows of the region table
for (b, e), oi, gold in zip(world.phrases, world.phrase_objects, world.gold_regions):
    phrase = " ".join(world.caption[b - 1 : e])
    best = gold[0]
    overlap = iou(world.region_boxes[best], world.objects[oi].box)
    print(f"'{phrase}' -> region {best} (IoU {overlap:.2f})")

print("\nregions:", world.num_regions, "features per region:", len(world.region_features[0]))

# splits: 80/10/10 by world id. Under vqa-trainval, VQA also trains on val,
# so ICR and VG may not be evaluated on val or test in that run.
manifest = make_splits(100, seed=0, regime="vqa-trainval")
print("VQA train size:", len(manifest.pools["VQA"]["train"]), "forbidden:", sorted(manifest.forbidden))
