"""The three architectures: censuses, parameter budgets, and the shape walk
of a reduced-extent variant.

Run: python3 demos/02_architectures.py
"""

import numpy as np

from voxcnn.models import (
    build_layers,
    build_model,
    forward,
    infer_shapes,
    layer_census,
    parameter_shapes,
)
from voxcnn.presets import arch_preset

print("== full-size architectures ==")
for name in ("alexnet3d", "vgg16-3d", "googlenet3d"):
    config = arch_preset(name)
    layers = build_layers(config)
    census = layer_census(layers)
    count = sum(int(np.prod(s)) for s in parameter_shapes(layers).values())
    print(f"{name}: {count:,} parameters | {census['conv']} conv, "
          f"{census['dense']} dense, {census['inception']} inception modules")

print()
print("== shape walk of alexnet3d-micro (3x9x9x9 input) ==")
config = arch_preset("alexnet3d-micro")
layers = build_layers(config)
for name, shape in infer_shapes(layers, config.input_shape):
    print(f"  {name:10s} {tuple(shape)}")

print()
print("== a built model is ready to run ==")
model = build_model(config, seed=0)
rng = np.random.default_rng(1)
x = rng.normal(size=config.input_shape)
probs, _ = forward(model, x)
print(f"random input -> class probabilities {np.round(probs, 3)} "
      f"(sum {probs.sum():.3f})")
