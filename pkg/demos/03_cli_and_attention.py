"""Drive the command line end to end and look at the attention maps.

Runs gen-synthetic, build-ckb, train, evaluate and export-attention on a
small configuration in a temporary directory, then prints where the model
attends on windows that contain an event.

    python3 demos/03_cli_and_attention.py
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from causaltraffic.cli import main
from causaltraffic.evaluation import read_matrix_csv

SMALL = {
    "synthetic": {"segment_count": 8, "horizon_days": 6, "event_rate": 3.0, "random_seed": 3,
                  "event_types": ["Accident", "Hazard"],
                  "injected_effects": {"Accident": {"MorningPeak": -12.0, "EveningPeak": -12.0,
                                                    "OffPeak": -8.0, "Night": -6.0},
                                       "Hazard": {"OffPeak": 6.0}}},
    "ckb": {"min_matches": 5},
    "model": {"lookback": 12, "horizon": 3, "hidden": 8, "layers": 1, "heads": 2, "neighbors": 3},
    "train": {"epochs": 10, "batch_size": 64, "lr": 2e-3, "max_batches_per_epoch": 6,
              "val_windows": 256, "event_share": 0.5},
}

root = Path(tempfile.mkdtemp(prefix="causaltraffic-demo-"))
(root / "pipeline.json").write_text(json.dumps(SMALL))
cfg = ["--config", str(root / "pipeline.json")]
data, ckpt = str(root / "data"), str(root / "ckpt")

steps = [
    ["gen-synthetic", "--out", data],
    ["build-ckb", "--data", data, "--out", str(root / "ckb.json")],
    ["ckb-report", "--ckb", str(root / "ckb.json")],
    ["train", "--data", data, "--ckb", str(root / "ckb.json"), "--out", ckpt],
    ["evaluate", "--ckpt", ckpt, "--data", data, "--out", str(root / "report.json")],
    ["export-attention", "--ckpt", ckpt, "--data", data, "--out", str(root / "maps"), "--events-only"],
]
for argv in steps:
    print("$ causaltraffic " + " ".join(argv[:1] + cfg + argv[1:]))
    code = main(argv[:1] + cfg + argv[1:])
    if code:
        raise SystemExit(code)

report = json.loads((root / "report.json").read_text())
print()
print("test MAE / MSE / RMSE:", report["table_row"])

# Row t of the map is the distribution over lookback steps s <= t used to
# update step t; the last row feeds the prediction heads.
mean = read_matrix_csv(root / "maps" / "attention_mean.csv")
last = mean[-1]
print("attention of the last step over the lookback (oldest first):")
print("  " + " ".join(f"{w:.2f}" for w in last))
print(f"most attended step: {int(np.nanargmax(last))} of {len(last) - 1}")
print(f"heatmaps: {root / 'maps'}")
