"""The training-side balancing machinery, simulated end to end.

Covers reflection filtering of pseudo labels, the static threshold
circulation, the dynamic loss-weight schedule, and background-aware
proposal compression with its loss.

Run with: python demos/03_balancing_schemes.py
"""

import numpy as np

from ovrefine import (
    Box7DoF,
    DbcState,
    ProposalSet,
    PseudoLabel2D,
    SbcState,
    assign_foreground_labels,
    baol_compress,
    baol_loss,
    dbc_accumulate,
    reflect_filter,
    sbc_loop,
    scale_loss,
)

# --- Reflection filtering -------------------------------------------------------
# Each 2D pseudo label carries similarities against "This is a {class}." and
# "This is not a {class}."; a two-way softmax turns them into a correctness
# score, and labels below 0.5 are dropped.
labels = [
    PseudoLabel2D((10, 10, 80, 60), "chair", 0.82, sim_pos=2.1, sim_neg=0.3),
    PseudoLabel2D((5, 5, 30, 30), "lamp", 0.64, sim_pos=0.2, sim_neg=1.9),  # wrong class
    PseudoLabel2D((40, 20, 90, 75), "table", 0.71, sim_pos=1.4, sim_neg=1.4),  # borderline
]
kept = reflect_filter(labels, phi_clip=0.5)
print("reflection keeps:", [l.label for l in kept])

# --- Static balance: threshold circulation ---------------------------------------
# A toy label pool where common classes flood the detector at low thresholds.
# The circulation nudges each class threshold until counts even out (or a
# threshold hits its clamp).
pool_sizes = {"chair": 400, "bookshelf": 120, "lamp": 60, "nightstand": 25}

def count_labels(phi_by_class):
    return {
        cls: max(0, int(total * (1.0 - phi_by_class[cls])))
        for cls, total in pool_sizes.items()
    }

state = SbcState.uniform(sorted(pool_sizes), phi_init=0.5)
final, iterations = sbc_loop(count_labels, state)
print(f"\nthreshold circulation converged in {iterations} rounds:")
for cls, phi in sorted(final.phi_by_class.items()):
    print(f"  phi[{cls}] = {phi:.2f}  ->  {count_labels(final.phi_by_class)[cls]} labels")

# --- Dynamic balance: loss weights ------------------------------------------------
# Classes whose loss stays high are "hard": every update_interval iterations
# the top-k accumulated losses gain weight and the bottom-k lose it.
rng = np.random.default_rng(0)
state = DbcState.initial(["chair", "bookshelf", "lamp"], update_interval=100, k=1)
for step in range(300):
    losses = {
        "chair": float(rng.uniform(0.1, 0.3)),      # easy, converged
        "bookshelf": float(rng.uniform(0.8, 1.2)),  # hard
        "lamp": float(rng.uniform(0.4, 0.6)),
    }
    state = dbc_accumulate(losses, state)
print("\nloss weights after 300 iterations:", dict(sorted(state.w_by_class.items())))
print("scaled loss example:", scale_loss({"bookshelf": 1.0, "chair": 1.0}, state))

# --- Background-aware proposal scoring ---------------------------------------------
# Class scores are scaled per-proposal by a foreground score; the top entries
# of the scaled matrix pick the surviving boxes.
boxes = (
    Box7DoF(0.0, 0.0, 0.45, 0.55, 0.55, 0.9),    # real chair
    Box7DoF(0.02, 0.0, 0.45, 0.55, 0.55, 0.9),   # duplicate of it
    Box7DoF(4.0, 4.0, 0.2, 0.4, 0.4, 0.4),       # background noise
)
proposals = ProposalSet(
    boxes,
    class_scores=np.array([[0.85, 0.10], [0.80, 0.15], [0.55, 0.40]]),
    fg_scores=np.array([0.95, 0.90, 0.15]),
)
compressed = baol_compress(proposals, k_pro=3)
print("\nsurviving boxes after compression:", compressed.box_indices)

ground_truth = [Box7DoF(0.0, 0.0, 0.45, 0.55, 0.55, 0.9)]
y = assign_foreground_labels(boxes, ground_truth, iou_lo=0.25, iou_hi=0.85)
print("foreground labels:", y.tolist(), "(duplicate rescued by the high-IoU rule)")
print("foreground loss:", round(baol_loss(y, proposals.fg_scores, lam=1.0), 4))
