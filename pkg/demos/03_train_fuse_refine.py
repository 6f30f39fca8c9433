"""
Training the three views and fusing them
========================================

A small run: eight phantoms to train, two to test.  Each view gets its own
stack U-Net; their probability maps are averaged in the axial frame and a
bidirectional ConvLSTM refines the result slice by slice.
"""

import time

from mdsnet.training import TrainConfig, evaluate, fit, phantom_cases, run_pipeline

cases = phantom_cases(10, seed=500, dims=(16, 32, 32))
train, test = cases[:8], cases[8:]

config = TrainConfig(k=7, base_channels=8, depth=3, epochs=20, refiner_epochs=3, refiner_hidden=4, dtype="f32")

t0 = time.perf_counter()
model = fit(train, config, progress=lambda v, e, l: print(f"{v} epoch {e + 1} loss {l:.3f}") if e % 5 == 4 else None)
print(f"trained in {time.perf_counter() - t0:.0f}s")

# one view at a time, then all three fused, then refined
for view in config.views:
    print(f"{view:>9} only: test Dice {evaluate(model, test, use_refiner=False, views=(view,)).mean():.3f}")
print(f"    fused: test Dice {evaluate(model, test, use_refiner=False).mean():.3f}")
report = evaluate(model, test, use_refiner=True)
print(f"  refined: test Dice {report.mean():.3f}")
print(report.formatted())

# the pipeline output keeps every intermediate map
out = run_pipeline(test[0].image, model.view_models, model.refiner, config)
print("maps:", sorted(out.view_probs), "mask voxels:", int(out.mask.sum()), "label voxels:", int(test[0].label.sum()))
