"""Exact information measures on a small joint distribution.

Run with ``python demos/information_measures.py``.
"""
import numpy as np

from igdslab import infotheory as it

# %% A joint over 4 inputs and 2 labels. Rows are inputs, columns labels.
table = np.array([
    [0.20, 0.05],
    [0.15, 0.10],
    [0.05, 0.20],
    [0.10, 0.15],
])
j = it.DiscreteJoint(table)
for name, value in it.summarize(j).items():
    print(f"{name:8s} {value:.6f}")

# %% H(X) splits into label-relevant and label-irrelevant parts
print("H(X) - I(X;Y) - H(X|Y) =", j.h_x() - it.mutual_information(j) - it.conditional_entropy(j))

# %% Merging inputs 0 and 2 (different majority labels) loses label information
merged = it.push_forward(j, [0, 1, 0, 2])
print("I after merging 0 and 2:", it.mutual_information(merged))

# %% A relabeling that keeps inputs distinct changes nothing
print("I after a permutation:  ", it.mutual_information(it.push_forward(j, [3, 0, 2, 1])))

# %% Zero-mean vectors are recovered from their softmax
v = np.random.default_rng(0).normal(size=8)
v -= v.mean()
print("softmax round trip error:", np.abs(it.invert_softmax(it.softmax(v)) - v).max())

# %% Splitting an outcome raises entropy; the uniform law sits at ln n
p = np.array([0.5, 0.3, 0.2])
print("H(p) =", it.entropy(p), " after split:", it.entropy(it.split_outcome(p, 0, 0.5)))
print("uniform over 16:", it.entropy(np.full(16, 1 / 16)), "ln 16 =", np.log(16))

# %% KL to the batch centroid equals the Jensen gap of the entropy
batch = it.softmax(np.random.default_rng(1).normal(size=(5, 4)) * 2)
centroid = batch.mean(axis=0)
print("mean KL to centroid:", it.mean_kl_to_centroid(batch, centroid))
print("H(centroid) - mean H:", it.entropy(centroid) - np.mean([it.entropy(b) for b in batch]))
