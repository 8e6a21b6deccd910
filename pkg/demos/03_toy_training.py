# %% [markdown]
# Training a small network end to end
#
# Trains a reduced pre-activation ResNet with InI gates on the synthetic
# dataset, checkpoints it, resumes, and evaluates the saved weights.

# %%
import json
import tempfile
from pathlib import Path

from inner_imaging import run
from inner_imaging.config import ExperimentConfig

out = Path(tempfile.mkdtemp())
cfg = ExperimentConfig(image_size=8, widths="8,16", num_classes=4, epochs=4, batch_size=32,
                       synth_train=256, synth_test=128, out_dir=str(out))

# %% Stop after two epochs, as if the job were interrupted
run.train(cfg, until=2)
print((out / "metrics.jsonl").read_text())

# %% Resume from the checkpoint and finish the schedule
trainer = run.resume(cfg, out / "checkpoint.bin")
for record in trainer.history:
    print(json.dumps(record))

# %% Evaluate the saved weights
print(run.evaluate_checkpoint(cfg, out / "checkpoint.bin"))
