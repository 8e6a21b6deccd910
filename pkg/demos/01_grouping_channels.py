# %% [markdown]
# Grouping channels with small filters
#
# Channel signals are folded into a small 2-D map. Each position of a
# G-filter scan over that map covers a set of channels, and that set is a
# channel group. This walk-through prints those groups for a few filter sets.

# %%
import numpy as np

from inner_imaging.gfilters import GFilterSpec, effective_specs, preset
from inner_imaging.verification import enumerate_groups, inspect_groups

# 32 channel signals folded row-major into a 4x8 map
ids = np.arange(32).reshape(4, 8)
print(ids)

# %% A 3x3 filter covers nine neighbouring channels per position
groups = enumerate_groups(GFilterSpec(3, 3), 4, 8)
print(len(groups), "groups")
print("group at (0,0):", sorted(groups[(0, 0)]))
print("group at (1,5):", sorted(groups[(1, 5)]))

# %% Presets combine several shapes. Shapes that do not fit the map are dropped.
for name in ("square-3", "mix-5", "square-5"):
    for rows, cols in ((4, 8), (2, 16)):
        kept = [str(s) for s in effective_specs(preset(name), rows, cols)]
        print(f"{name:9s} on {rows}x{cols}: {kept}")

# %% How often each channel is covered, summed over all kept shapes
report = inspect_groups("square-3", 4, 8)
print(np.array(report["overlap"]).reshape(4, 8))
print("histogram:", report["overlap_histogram"])

# %% The 1x1 preset puts every channel in its own group
onehot = inspect_groups("onehot", 4, 8)
print({len(c["channels"]) for c in onehot["specs"][0]["cells"]})
