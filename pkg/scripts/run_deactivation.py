"""Deactivation table at the default toy scale.

Text-pretrains the default model, adapts it to speech (stage 1), and reports
perplexity after zeroing the top, bottom and a random 3% of parameters by
importance: once for the text-only model (text rows) and once for the
speech-adapted model (both modalities).

    python3 scripts/run_deactivation.py [--config configs/default.json] [--out runs]
"""

import argparse
import sys

from modalshift import pipeline
from modalshift.config import default_config, load_config
from modalshift.importance import estimate_importance
from modalshift.report import deactivation_report


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    rc = load_config(args.config) if args.config else default_config()
    run_dir = rc.run_dir(args.out)
    data = pipeline.build_data(rc)
    print("pretraining", file=sys.stderr)
    pre = pipeline.pretrain_model(rc, data).model
    print("speech adaptation", file=sys.stderr)
    aligned = pipeline.align_model(rc, pre, data).model
    prov = rc.provenance()
    text_map = {"text": estimate_importance(pre, data.probe, "text")}
    rep = deactivation_report(pre, text_map, data.pretrain_eval, prov, rc.fraction, rc.seed, ("text",))
    rep.files = {"deactivation_pretrained.csv": rep.files["deactivation.csv"]}
    rep.write(run_dir)
    maps = {m: estimate_importance(aligned, data.probe, m) for m in ("text", "speech")}
    rep2 = deactivation_report(aligned, maps, data.pretrain_eval, prov, rc.fraction, rc.seed)
    rep2.files = {"deactivation_aligned.csv": rep2.files["deactivation.csv"]}
    rep2.write(run_dir)
    print(f"{'model':<16}{'modality':<9}{'base':>9}{'top':>9}{'bottom':>9}{'random':>9}")
    for label, r in [("pretrained", rep.payload["rows"][0])] + [("speech-adapted", r) for r in rep2.payload["rows"]]:
        print(f"{label:<16}{r['modality']:<9}{r['base']:>9.3f}{r['top']:>9.2f}{r['bottom']:>9.3f}{r['random']:>9.3f}")
    print(f"written to {run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
