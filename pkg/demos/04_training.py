"""Training loop end to end: schedule, history checkpoints, and the final
evaluation on a held-out split.

Run: python3 demos/04_training.py  (about half a minute)
"""

import os
import tempfile

from voxcnn.models import AlexNetConfig, build_model
from voxcnn.training import (
    SplitPlan,
    TrainConfig,
    evaluate,
    lr_at_epoch,
    train,
)
from voxcnn.volumes import PhantomParams, VolumeDataset, generate_phantoms

print("== the default schedule decays the learning rate every 256 epochs ==")
default = TrainConfig()
for epoch in (0, 255, 256, 512):
    print(f"  epoch {epoch:4d}: lr {lr_at_epoch(default, epoch):.3e}")

root = os.path.join(tempfile.mkdtemp(), "phantoms")
params = PhantomParams(
    extents=(20, 22, 20),
    samples_per_class=8,
    region_radii=(1.6, 2.2, 2.8),
    noise_amplitude=0.05,
    jitter=0.8,
    seed=11,
)
generate_phantoms(params, root)
dataset = VolumeDataset.from_manifest(os.path.join(root, "manifest.vman"))
plan = SplitPlan(
    train_ids=dataset.split_ids("train"),
    val_ids=dataset.split_ids("val"),
    test_ids=dataset.split_ids("test"),
)
print()
print(f"== training a small alexnet3d on {len(plan.train_ids)} phantoms ==")

arch = AlexNetConfig(
    input_shape=(3, 20, 22, 20),
    conv_widths=(4, 8, 8, 8, 8),
    dense_widths=(16, 16),
    stem_kernel=3, stem_stride=1, stem_padding=1,
    pool_padding=1,
)
config = TrainConfig(epochs=60, lr0=3e-3, batch_size=6, l2_lambda=1e-4,
                     dropout_rate=0.0, validation_freq_iters=30, seed=0)
model = build_model(arch, seed=config.seed)
model, history = train(model, dataset, plan, config)
for rec in history.records:
    print(f"  iter {rec.iteration:3d} epoch {rec.epoch:3d} "
          f"train_loss {rec.train_loss:.4f} val_loss {rec.val_loss:.4f} "
          f"val_acc {rec.val_acc:.3f}")

result = evaluate(model, dataset, plan.test_ids)
print(f"test accuracy: {result.accuracy:.3f} on {len(result.ids)} samples")
print()
print("history csv head:")
print("\n".join(history.to_csv().splitlines()[:3]))
