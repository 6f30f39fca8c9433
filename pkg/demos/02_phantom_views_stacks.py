"""
Phantoms, views and stacks
==========================

Synthetic volumes stand in for CT scans.  Each is read along three axes and
cut into stacks of k slices; predictions are merged back, averaging the
slices where the last stack overlaps its neighbour.
"""

import numpy as np

from mdsnet.volume import (VIEWS, extract_all, generate_phantom, inverse_view, merge_stacks, plan_stacks,
                           transpose_view)

image, label = generate_phantom(seed=7, dims=(32, 64, 64))
print("image", image.dims, "foreground fraction", round(float(label.voxels.mean()), 4))

# how many slices of each view actually contain the organ
for view in VIEWS:
    lab = transpose_view(label.voxels, view)
    filled = lab.reshape(len(lab), -1).any(axis=1)
    print(f"{view:>9}: {len(lab)} slices, {filled.sum()} with foreground")

# stride-k plans; an indivisible depth gets a tail stack at d - k
for d, k in [(21, 7), (20, 7), (32, 7)]:
    plan = plan_stacks(d, k)
    print(f"d={d} k={k}: starts {plan.starts}, slices covered twice {np.flatnonzero(plan.coverage() == 2)}")

# cutting and merging is lossless, and so is going through a view and back
plan = plan_stacks(32, 7)
stacks = extract_all(image.voxels, plan)
assert np.allclose(merge_stacks(stacks, plan), image.voxels)
for view in VIEWS:
    assert np.array_equal(inverse_view(transpose_view(image.voxels, view), view), image.voxels)
print("round trips exact")
