# %% [markdown]
# Attention blocks side by side
#
# A plain SE-style block gates channels from their pooled signals. The InI
# block encodes group signals instead. The joint variant also reads the
# identity branch of a residual unit.

# %%
import numpy as np

from inner_imaging import InnerImageConfig, InnerImaging, JointInnerImaging, SqueezeExcitation, Tensor, no_grad

rng = np.random.default_rng(0)
C = 32
u = Tensor(rng.normal(size=(4, C, 6, 6)))

# %% Gates lie strictly between 0 and 1, one per (sample, channel)
ini = InnerImaging(C, InnerImageConfig(preset="square-3", reduction=8), np.random.default_rng(1))
with no_grad():
    s = ini.gates(u).data
print("map", ini.map_shape, "gates", s.shape, "range", s.min().round(3), s.max().round(3))

# %% Parameter cost relative to the SE block
se = SqueezeExcitation(C, 8, np.random.default_rng(1))
print("SE params:", se.num_parameters(), " InI params:", ini.num_parameters(),
      " closed form:", ini.expected_parameters())

# %% With only the 1x1 filter, unit weights and copied encoders the two blocks agree exactly
onehot = InnerImaging(C, InnerImageConfig(preset="onehot", fold_shape=(4, 8), reduction=8, batchnorm=False),
                      np.random.default_rng(2))
enc = onehot.encoder
for w in enc.weights:
    w.data[...] = 1.0
for src, dst in ((se.fc1, enc.fc1), (se.fc2, enc.fc2)):
    dst.weight.data[...] = src.weight.data
    dst.bias.data[...] = src.bias.data
with no_grad():
    print("max gate difference:", np.abs(se.gates(u).data - onehot.gates(u).data).max())

# %% The joint block reacts to the identity branch, the plain block does not
x = Tensor(rng.normal(size=(4, C, 6, 6)))
joint = JointInnerImaging(C, InnerImageConfig(preset="square-3", reduction=8), np.random.default_rng(3))
with no_grad():
    a = joint.gates(x, u).data
    b = joint.gates(Tensor(x.data + 0.5), u).data
print("joint map", joint.map_shape, "gate change from identity shift:", np.abs(a - b).max())
