"""
Command-line walkthrough
========================

synth, train, eval, predict and compare, driven from Python through
the same entry point the ``hgfusion`` console script uses.
"""

# %%
import json
import tempfile
from pathlib import Path

from hgfusion.cli import main

root = Path(tempfile.mkdtemp(prefix="hgfusion_demo_"))
data = root / "data"
toy = ["--stacks", "1", "--channels", "32", "--depth", "2", "--input-side", "128", "--init", "uniform", "--zero-head"]

# %%
main(["synth", "--kind", "activity_separable", "--n", "8", "--image-side", "128", "--out", str(data)])

# %%
for variant in ("ablative", "contextual"):
    main(["train", "--data", str(data / "annotations.jsonl"), *toy, "--variant", variant, "--form", "A",
          "--lr", "2.5e-3", "--epochs", "1000", "--max-steps", "40", "--no-augment", "--split", "all", "--out", str(root / variant)])

# %%
# One row per model, in the layout of the comparison table.
for variant in ("ablative", "contextual"):
    main(["eval", "--checkpoint", str(root / variant / "best.hgfz"), "--data", str(data / "annotations.jsonl"),
          "--label", variant, "--thresholds", "0.1:0.1:0.9", "--out", str(root / f"rep_{variant}")])

# %%
main(["compare", "--report-a", str(root / "rep_ablative" / "report.csv"),
      "--report-b", str(root / "rep_contextual" / "report.csv"), "--out", str(root / "diff.csv")])

# %%
image = sorted((data / "images").glob("*.png"))[0]
main(["predict", "--checkpoint", str(root / "contextual" / "best.hgfz"), "--image", str(image),
      "--activity", "running", "--out", str(root / "pred")])
doc = json.loads((root / "pred" / "keypoints.json").read_text())
print(doc["keypoints"][0])
print("manifest keys:", sorted(json.loads((root / "contextual" / "manifest.json").read_text())))
