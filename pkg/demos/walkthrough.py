"""The decision rules between the networks, on hand-made numbers.

Run with ``python3 demos/walkthrough.py``; nothing here trains.
"""
import numpy as np

from remerec.data import EntitySpan, generate_synthetic
from remerec.eir import select_top_k
from remerec.metrics import relation_accuracy
from remerec.tmp import align_spans, estimated_span, extract_candidate_spans

caption = "the red square left of the blue circle".split()
# per-token entity probabilities as a trained classifier might emit them
probs = np.array([0.2, 0.9, 0.95, 0.1, 0.05, 0.3, 0.8, 0.9])
spans = extract_candidate_spans(probs, 0.5, len(caption))
print("candidate spans:", [(s.start, s.end, " ".join(caption[s.start:s.end + 1])) for s in spans])

# two entity queries predicted normalized (start, end) positions
estimates = [estimated_span(0.1, 0.35, len(caption)), estimated_span(0.7, 0.95, len(caption))]
print("estimated spans:", estimates)
aligned, masks = align_spans(estimates, spans, len(caption))
for span, mask in zip(aligned, masks):
    print(f"  aligned {span} -> context tokens {[w for w, m in zip(caption, mask) if m]}")

# no candidate at all: the estimate itself is used, endpoints swapped
print("fallback:", align_spans([EntitySpan(5, 2)], [], len(caption))[0])

# relation matrix for two entities; the count head said one relation
scores = np.array([[0.0, 2.3], [-1.1, 0.0]])
print("top-1 relation:", select_top_k(scores, 1))

# two images, two ground-truth relations each, one recovered in each
gt = [{(0, 1), (1, 2)}, {(0, 1), (2, 0)}]
pred = [{(0, 1)}, {(2, 0), (1, 0)}]
image_level, relation_level = relation_accuracy(pred, gt)
print(f"image-level {image_level}, relation-level {relation_level}")

record, sample = generate_synthetic(seed=3, n=1, max_entities=3)[0]
print("synthetic caption:", record.caption)
print("  boxes:", [(b.label, b.x_min, b.y_min, b.x_max, b.y_max) for b in record.boxes])
print("  relations:", sorted(record.relations))
