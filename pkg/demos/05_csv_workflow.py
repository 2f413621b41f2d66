"""The command-line workflow on a CSV file, end to end.

Writes a synthetic dataset to CSV, runs the `weakiv estimate` pipeline on
it exactly as one would from a shell, and reads the machine-readable report
back. The same flags work for any user-supplied CSV with a header row.
"""

import json
import tempfile
from pathlib import Path

from weakiv import ColumnSchema, ScenarioConfig, generate_s1, write_csv
from weakiv.cli import main

workdir = Path(tempfile.mkdtemp(prefix="weakiv_demo_"))
csv_path = workdir / "study.csv"
out_prefix = workdir / "analysis"

# --- fabricate a study file --------------------------------------------------
cfg = ScenarioConfig(scenario="s1_lowdim", n=1500, m=15, cp=30.0, base_seed=3)
ds, _ = generate_s1(cfg, 3)
schema = ColumnSchema(
    outcome="log_wage",
    treatment="education",
    instruments=tuple(f"q{j+1}" for j in range(15)),
    covariates=("age", "age_sq", "married"),
)
write_csv(ds, csv_path, schema)
print(f"wrote {csv_path} ({ds.n} rows, {ds.m} instruments, {ds.p} covariates)\n")

# --- run the CLI in-process (identical to the shell invocation) --------------
argv = [
    "estimate",
    "--data", str(csv_path),
    "--outcome", "log_wage",
    "--treatment", "education",
    "--instruments", *[f"q{j+1}" for j in range(15)],
    "--covariates", "age", "age_sq", "married",
    "--learner", "spline",
    "--folds", "4",
    "--method", "cue", "tsls",
    "--seed", "3",
    "--out", str(out_prefix),
]
print("$ weakiv " + " ".join(argv), "\n")
code = main(argv)
assert code == 0, f"pipeline exited with {code}"

# --- consume the machine-readable report -------------------------------------
report = json.loads((workdir / "analysis.json").read_text())
cue = report["results"]["cue"]
print("\nfrom analysis.json:")
print(f"  resolved seed        {report['config']['seed']}")
print(f"  cue estimate         {cue['estimate']['beta_hat']:.4f}")
print(f"  cue standard error   {cue['inference']['se']:.4f}")
print(f"  overidentification p {cue['inference']['j_p']:.3f}")
print(f"  first-step summaries {len(report['nuisance_summaries'])} fits recorded")
