"""Classifier heads: prototypes, leave-one-out masking, KNN voting.

Shows the three ways this library scores an embedding:

- a prototype head (normalized per-class sums of prompt embeddings),
- the masked variant that removes one training sample from its own
  class prototype (used during training so a sample cannot vote for
  itself),
- temperature-weighted k-nearest-neighbor voting over a labeled bank.

Run: python demos/03_heads_and_knn.py
"""

import tempfile
from pathlib import Path

import numpy as np

from soupadapter import (KnnConfig, build_prototypes, build_prototypes_masked,
                         export_head, generate_synthetic, head_logits,
                         import_head, knn_logits, sample_few_shot)

train, id_test, _ = generate_synthetic(n_classes=5, dim=16, per_class=40,
                                       shift_angle=0.0, noise=0.25, seed=3)
selection = sample_few_shot(train, range(train.n), n_shot=8, seed=3)
clean = train.unit_features(0)
prompts = [clean[selection.indices[c]] for c in range(5)]

# ---------------------------------------------------------------- prototypes
head = build_prototypes(prompts)
x = id_test.unit_features(0)[0]
logits = head_logits(head, x)
print("prototype head rows are unit vectors:",
      np.allclose(np.linalg.norm(head.weights, axis=1), 1.0))
print(f"logits for one test embedding: {np.round(logits, 2)}")
print(f"prediction: class {int(np.argmax(logits))} "
      f"(true class {int(id_test.labels[0])})")

# ------------------------------------------------------------------- masking
masked = build_prototypes_masked(prompts, excluded=(0, 2))
changed = np.linalg.norm(masked.weights - head.weights, axis=1)
print("\nmasking sample 2 of class 0 changes only row 0:",
      np.round(changed, 4))

# ----------------------------------------------------------------------- knn
bank_idx = [i for cls in selection.indices for i in cls]
bank = train.unit_features(0, indices=bank_idx)
bank_labels = train.labels[np.asarray(bank_idx)]
votes = knn_logits(bank, bank_labels, x, KnnConfig(k=10, temperature=0.1))
print(f"\nknn votes (k=10, T=0.1): {np.round(votes, 2)}")
print(f"knn prediction: class {int(np.argmax(votes))}")

# ----------------------------------------------------------------- head file
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "head.shed"
    export_head(head, path)
    back = import_head(path)
    print(f"\nhead file round-trip: origin={back.origin!r}, "
          f"max row delta {np.max(np.abs(back.weights - head.weights)):.1e}")
