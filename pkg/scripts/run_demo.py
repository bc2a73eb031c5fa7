#!/usr/bin/env python3
"""Drive the complete workflow on a demo corpus through the CLI.

detect -> rank -> select -> ensemble -> evaluate -> campaign -> simulate,
leaving every artifact under the corpus directory for inspection.

Usage:
    python scripts/make_demo_corpus.py out/corpus
    python scripts/run_demo.py out/corpus
"""

import argparse
import json
import sys
from pathlib import Path

from segqa.cli import main as segqa


def run(argv: list[str]) -> None:
    print(f"$ segqa {' '.join(argv)}")
    rc = segqa(argv)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("corpus", help="directory written by make_demo_corpus.py")
    parser.add_argument("--threshold-mm3", type=float, default=10.0)
    args = parser.parse_args()

    root = Path(args.corpus)
    models = sorted(str(d) for d in root.glob("model*"))
    truth = str(root / "truth")
    attention = root / "attention"
    work = root / "work"
    work.mkdir(exist_ok=True)

    run(["detect", "--preds", *models, "--out", str(attention), "--jobs", "4"])
    run(["rank", "--attention", str(attention), "--out", str(work / "ranking.csv"),
         "--curve", str(work / "curve.csv")])
    run(["select", "--ranking", str(work / "ranking.csv"),
         "--threshold-mm3", str(args.threshold_mm3), "--knee"])
    run(["ensemble", "--preds", *models, "--out", str(root / "pseudo")])
    run(["evaluate", "--attention", str(attention), "--pseudo", str(root / "pseudo"),
         "--truth", truth, "--out", str(work / "metrics.json")])
    run(["campaign", "init", "--state", str(work / "campaign.json"),
         "--attention", str(attention), "--force"])
    run(["campaign", "status", "--state", str(work / "campaign.json")])
    run(["simulate", "--preds", *models, "--truth", truth, "--loops", "3",
         "--threshold-mm3", str(args.threshold_mm3),
         "--out", str(work / "loop_report.json")])

    report = json.loads((work / "loop_report.json").read_text())
    revised = report["loops"][0]["revised_count"]
    total = len(report["loops"][0]["cases"])
    run(["estimate", "--revised", str(revised), "--total", str(total)])
    print(f"demo artifacts under {work}")


if __name__ == "__main__":
    main()
