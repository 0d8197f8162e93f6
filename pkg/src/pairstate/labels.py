"""The four pair labels and their target encodings.

Convention fixed here once: higher severity is worse disease, BETTER means
severity dropped at the second visit, and the progression target runs
WORSE = 0, STABLE = 0.5, BETTER = 1 so that the stable class sits halfway
between the two directed classes.
"""

BETTER = "BETTER"
STABLE = "STABLE"
WORSE = "WORSE"
OTHER = "OTHER"

# canonical class order for confusion matrices and the naive 4-way head
LABELS = (BETTER, STABLE, WORSE, OTHER)
LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}

PROGRESSION_LABELS = (BETTER, STABLE, WORSE)

# soft target for the progression head; OTHER has no progression target
PROGRESSION_TARGET = {WORSE: 0.0, STABLE: 0.5, BETTER: 1.0}
