"""How far does one output pixel see?

Two ways to answer: walk the layer list backwards (analytic), or push a
unit gradient from one output pixel back to the input and look where it
lands (impulse probe). They should always agree.
"""
# %%
import numpy as np

from dmcnn.network import NetworkConfig, build, pixel_branch_footprint
from dmcnn.tensor_engine import LayerSpec, probe_receptive_field, receptive_field

# %%
# Three 3x3 convolutions with doubling dilation. The footprint grows as
# 2**(n+1) - 1, so three layers reach 15 pixels.
for n in range(1, 5):
    stack = [LayerSpec.same(3, 2 ** i) for i in range(n)]
    print(f"{n} layers: analytic {receptive_field(stack)}, probe {probe_receptive_field(stack)}, "
          f"2**(n+1)-1 = {2 ** (n + 1) - 1}")

# %%
# Strided and transposed layers make the footprint depend on the output
# position. The reported field is the largest one over a full phase period.
up = [LayerSpec("conv", 3, 2, 1, 1), LayerSpec.same(3), LayerSpec("transposed", 4, 2, 1, 1)]
print("per phase:", [receptive_field(up, position=(8 + q, 8 + q))[0] for q in range(2)],
      "overall:", receptive_field(up), "probe:", probe_receptive_field(up))

# %%
# The pixel branch of the default network: two stride-2 stages, a dilated
# bottleneck and two upsampling stages. A narrow copy has the same geometry
# and probes in a couple of seconds.
model = build(NetworkConfig(base_channels=4), dtype=np.float64)
print("pixel branch analytic:", receptive_field(model.pixel_layer_specs()))
print("pixel branch impulse :", pixel_branch_footprint(model))
print("dct branch (pixels)  :", receptive_field(model.dct_layer_specs()))
