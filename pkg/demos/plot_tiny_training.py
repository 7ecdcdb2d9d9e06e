"""
Overfitting a tiny network on two patches
=========================================

A narrow network is trained on two synthetic 128x128 patches until it
reproduces them. This is the smallest end-to-end run: training with
checkpoints, evaluation and export of typed instances with an overlay.
Takes a couple of minutes on a laptop CPU.
"""

from pathlib import Path

from nucgrade import synthdata
from nucgrade.network import NetworkConfig
from nucgrade.pipeline.checkpoint import load_model
from nucgrade.pipeline.config import TrainConfig
from nucgrade.pipeline.training import evaluate_samples, export_prediction, predict_sample, train

out = Path("demo_output")
samples = synthdata.generate_set(2, seed=0, canvas=(128, 128), n_instances=10)

net = NetworkConfig(input_size=(128, 128), backbone_widths=(16, 16, 32, 32, 64),
                    backbone_blocks=(1, 1, 1, 1), hrfe_stream_widths=(8, 16, 32),
                    lunet_widths=(8, 16, 32))
config = TrainConfig(checkpoint_dir=str(out / "tiny_run"), split=(1, 0, 0), epochs_frozen=0,
                     epochs_finetune=200, lr_initial=3e-3, lr_after=3e-3, lr_drop_epoch=200,
                     batch_size=1, augmentations=(), network=net, seed=0)

final = train(config, samples=samples)
model, cfg, meta = load_model(final)
print("last epoch loss:", round(meta["history"][-1]["train_loss"], 4))

report = evaluate_samples(model, samples, cfg.postprocess)
print(report.to_text())

for s in samples:
    export_prediction(predict_sample(model, s.image, cfg.postprocess), s.image, out / "tiny_pred", s.id)
print("exports in", out / "tiny_pred")
