"""Feed one random feature map through each building block and check a gradient.

Run: python3 demos/blocks_walkthrough.py
"""
import numpy as np

from efayolo.analysis import count_flops, count_params
from efayolo.blocks import CBS, SPPF, EAConv, EADown
from efayolo.selftest import format_gradcheck, gradcheck_blocks
from efayolo.tensor import ConvSpec, pool2d

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 16, 32, 32)).astype(np.float32)

blocks = {
    "CBS 3x3": CBS(16, 32, 3, rng=rng),
    "EAConv": EAConv(16, 32, rng=rng),
    "EADown": EADown(16, 32, rng=rng),
    "SPPF": SPPF(16, 32, rng=rng),
}
for name, blk in blocks.items():
    y = blk.eval()(x)
    print(f"{name:8s} {str(x.shape):18s} -> {str(y.shape):18s} params {count_params(blk):6d}  flops {count_flops(blk, x.shape):,}")

# the SPPF trick: two stacked 5x5 max pools see a 9x9 window
p5 = ConvSpec(5, 1, 2)
twice = pool2d(pool2d(x, "max", p5), "max", p5)
print("\nk5∘k5 == k9:", np.array_equal(twice, pool2d(x, "max", ConvSpec(9, 1, 4))))

print()
print(format_gradcheck(gradcheck_blocks()))
