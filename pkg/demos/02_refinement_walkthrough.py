"""Walk two detection mistakes through the full refinement pipeline.

Scene one: a detector believes it found a toilet in a living room. Scene
two: an oversized "book" in a library that is really a coffee table. The
first is removed on scene grounds; the second is reclassified by debate.

Run with: python demos/02_refinement_walkthrough.py
"""

from ovrefine import (
    Box7DoF,
    Detection,
    SceneContext,
    SceneRecord,
    StaticKnowledgeProvider,
    constraint_vector,
    default_knowledge_base,
    refine_scene,
)

kb = default_knowledge_base()
provider = StaticKnowledgeProvider(kb)

# --- Scene one: the misplaced toilet ------------------------------------------
# The box is bench-sized: 1.63 m long against the 0.70 m toilet prior, so the
# size fit lands around 0.908, and "toilet in a living room" fails outright.
toilet_box = Box7DoF(1.2, 0.8, 0.375, 1.63466184, 0.40, 0.75)
living_room = SceneRecord(
    "walkthrough-1",
    SceneContext("living room", "sofa against the wall, table in the middle"),
    (
        Detection(toilet_box, "toilet", 0.73),
        Detection(Box7DoF(-1.5, 0, 0.4, 2.0, 0.9, 0.8), "sofa", 0.95),  # base class
    ),
)

x = constraint_vector(toilet_box, "toilet", 0.73, living_room.scene, provider)
print("toilet constraints: conf=%.2f size=%.4f scene=%d" % (x.conf, x.size, x.scene))

refined, log = refine_scene(living_room, provider)
entry = log.objects[0]
print(
    f"solver: y_keep={entry.solution.y_keep:.3f} y_recls={entry.solution.y_recls:.3f}"
    f" -> {entry.decision.value}"
)
print("remaining detections:", [d.label for d in refined.detections])

# --- Scene two: the giant book -------------------------------------------------
# Every dimension is ~3.5x the book prior (size fit 0.5419), but the box sits
# exactly on the coffee-table prior. Confidence is high, so the solver lands
# in reclassify territory and the debate weighs size x scene x score.
book_box = Box7DoF(-0.5, 1.0, 0.0875, 1.05020856, 0.70013904, 0.17503476)
library = SceneRecord(
    "walkthrough-2",
    SceneContext("library", "reading corner with two chairs"),
    (
        Detection(book_box, "book", 0.9, {"book": 0.9, "stool": 0.6, "coffee table": 0.55}),
        Detection(Box7DoF(1.0, 1.0, 0.45, 0.55, 0.55, 0.90, 0.3), "chair", 0.88),
        Detection(Box7DoF(2.0, 0.5, 0.45, 0.55, 0.55, 0.90, -0.7), "chair", 0.91),
    ),
)

refined, log = refine_scene(library, provider)
entry = log.objects[0]
print("\nbook constraints: conf=%.2f size=%.4f scene=%d" % entry.constraints.as_tuple())
print(
    f"solver: y_keep={entry.solution.y_keep:.3f} y_recls={entry.solution.y_recls:.3f}"
    f" -> {entry.decision.value}"
)
for role, line in entry.transcript:
    print(f"  {role}: {line}")
print("final classes:", [d.label for d in refined.detections])
