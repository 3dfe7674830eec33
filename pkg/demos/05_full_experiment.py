"""Drive a complete experiment through the command line entry point.

Equivalent shell session:

    flexgrid run --config demos/configs/small.yaml --out runs/small
    flexgrid report --run runs/small
    flexgrid consolidate --run runs/small
"""

import sys
import tempfile
from pathlib import Path

from flexgrid.cli import main

config = Path(__file__).with_name("configs") / (sys.argv[1] if len(sys.argv) > 1 else "small.yaml")

with tempfile.TemporaryDirectory() as tmp:
    run = Path(tmp) / "run"
    assert main(["run", "--config", str(config), "--out", str(run)]) == 0
    print("artifacts:", ", ".join(sorted(p.name for p in run.iterdir())))

    # reports are rebuilt from the CSV and model artifacts alone
    assert main(["report", "--run", str(run)]) == 0
    assert main(["consolidate", "--run", str(run)]) == 0
    rows = (run / "consolidated_response.csv").read_text().splitlines()
    print(f"consolidated response: {len(rows) - 1} minutes, header {rows[0]}")
