"""
A short joint run, its report and an attention dump
===================================================

Trains all three heads together on a small synthetic set for a few hundred
iterations, prints the validation table and inspects one example. Takes
about half a minute.
"""

from mtvl.cli import attention_record
from mtvl.data import generate_dataset, make_splits, select
from mtvl.evaluation import evaluate, format_report
from mtvl.model import ModelConfig, MultiTaskModel
from mtvl.training import TaskSpec, derive_joint_plan, train, training_pools

worlds = generate_dataset(300, seed=0)
manifest = make_splits(len(worlds), seed=0)
config = ModelConfig(d=32, depth=5, taps={"ICR": 3, "VQA": 5, "VG": 2})
model = MultiTaskModel(config, seed=0)

specs = [TaskSpec(t, config.taps[t], 32, n, 400) for t, n in (("ICR", 300), ("VQA", 300), ("VG", 200))]
plan = derive_joint_plan(specs, cycle=10)
losses = []
result = train(plan, model, training_pools(worlds, manifest), seed=0, manifest=manifest,
               log_sink=losses.append)
print(losses[0])
print(losses[-1])

val = select(worlds, manifest.pools["ICR"]["val"])
print(format_report(evaluate(model, val, manifest=manifest, split="val"), label="joint"))

record = attention_record(model, val[0])
print("\ncaption:", " ".join(record["caption"]))
top_words = sorted(zip(record["icr"]["word_weights"], record["caption"]), reverse=True)[:3]
print("ICR decoder looks at:", [w for _, w in top_words])
print("question:", " ".join(record["question"]), "->", record["vqa"]["prediction"])
for g in record["vg"]:
    print(f"'{' '.join(g['phrase'])}' -> region {g['top_region']}")
