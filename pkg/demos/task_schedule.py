"""
Planning a joint run from single-task budgets
=============================================

Each task brings its own iteration budget and decay step. The joint plan sums
them, gives each task a share of every update cycle proportional to its
budget, and repeats that cycle.
"""

from mtvl.training import TaskSpec, build_task_sequence, derive_joint_plan, lr_schedule

specs = [
    TaskSpec("ICR", tap=3, batch_size=32, iters=300, step=100),
    TaskSpec("VQA", tap=5, batch_size=32, iters=200, step=50),
]
plan = derive_joint_plan(specs, cycle=5)
print("total iterations", plan.total_iter, "decay step", plan.total_step)
print("shares", [str(a) for a in plan.alphas], "slots per cycle", plan.slots)

seq = build_task_sequence(plan)
print("first two cycles:", seq[:10])
print("updates per task:", {s.task: seq.count(i) for i, s in enumerate(specs, start=1)})

# the learning rate halves after every `total_step` iterations of the joint run
for it in (0, 149, 150, 300, 450):
    print(f"iteration {it:>3}: lr {lr_schedule(it, plan.total_step):.6f}")

# three tasks with uneven budgets still fill the cycle exactly
three = derive_joint_plan(specs + [TaskSpec("VG", 2, 32, 100, 50)], cycle=10)
print("\nthree-task slots", three.slots, "sum", sum(three.slots))
