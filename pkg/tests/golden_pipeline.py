"""Small end-to-end CLI pipeline whose outputs are kept as golden files.

Run ``python tests/golden_pipeline.py`` to regenerate ``tests/golden/`` after
an intentional output change.
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

from flowserve.cli import main

GOLDEN = Path(__file__).parent / "golden"
SRC_DEPLOYMENT = [{"devices": [0, 1, 2, 3], "tp": 4, "pp": 1}, {"devices": [4, 5, 6, 7], "tp": 4, "pp": 1}]


def _call(args: list[str]) -> None:
    code = main(args)
    if code != 0:
        raise RuntimeError(f"flowserve {' '.join(args)} exited with {code}")


def run_pipeline(out: Path) -> list[Path]:
    """Every subcommand once, each into its own directory. Returns the files written."""
    out = Path(out)
    d = {name: out / name for name in ("synth", "fit", "predict", "schedule", "exhaustive",
                                       "switch", "simulate", "orchestrate")}
    for p in d.values():
        p.mkdir(parents=True, exist_ok=True)
    _call(["--out-dir", str(d["synth"]), "synth", "--spans", "4", "--rate", "300"])
    trace = str(d["synth"] / "trace.jsonl")
    _call(["--trace", trace, "--out-dir", str(d["fit"]), "fit", "--k", "2"])
    types = str(d["fit"] / "types.json")
    common = ["--trace", trace, "--types", types]
    _call(common + ["--out-dir", str(d["predict"]), "predict"])
    _call(common + ["--out-dir", str(d["schedule"]), "schedule", "--span-index", "1",
                    "--search-log", str(d["schedule"] / "search_log.csv"),
                    "--dot", str(d["schedule"] / "network.dot")])
    _call(common + ["--out-dir", str(d["exhaustive"]), "schedule", "--span-index", "1", "--exhaustive"])
    src = out / "src_deployment.json"
    src.write_text(json.dumps(SRC_DEPLOYMENT))
    _call(["--out-dir", str(d["switch"]), "switch-plan", "--src", str(src),
           "--dst", str(d["schedule"] / "deployment.json")])
    _call(common + ["--out-dir", str(d["simulate"]), "simulate",
                    "--deployment", str(d["schedule"] / "deployment.json"), "--outcomes"])
    _call(common + ["--out-dir", str(d["orchestrate"]), "orchestrate"])
    return sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())


if __name__ == "__main__":
    if GOLDEN.exists():
        shutil.rmtree(GOLDEN)
    files = run_pipeline(GOLDEN)
    print(f"wrote {len(files)} golden files to {GOLDEN}", file=sys.stderr)
