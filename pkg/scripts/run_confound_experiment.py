"""Run the planted-laterality experiment and print a per-seed table.

    python scripts/run_confound_experiment.py --out runs/confound [--config cfg.json] [--seed 0]

Re-running with the same --out resumes: finished stages are skipped.
"""

import argparse
import logging
from pathlib import Path

from gaitaudit.cli import cmd_experiment, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")

    summary = cmd_experiment(load_config(args.config, args.seed), args.out)
    print(f"{'arm':<9}{'seed':>5}{'HE':>8}{'LB':>8}{'LF':>8}{'RF':>8}{'LF hi':>8}{'AUC':>7}  flags")
    for arm, res in summary["arms"].items():
        for r in res["replicates"]:
            a = r["attention"]
            print(f"{arm:<9}{r['seed']:>5}" + "".join(f"{a[s]:>8.3f}" for s in ("HE", "LB", "LF", "RF"))
                  + f"{r['attention_ci_high']['LF']:>8.3f}{r['roc_auc']:>7.2f}  {','.join(r['flags']) or '-'}"
                  + ("" if r["pass"] else "  (fails)"))
        print(f"{arm}: {res['n_pass']}/{len(res['replicates'])} seeds pass -> {'PASS' if res['pass'] else 'FAIL'}")
    print(f"summary: {args.out / 'summary.json'}")


if __name__ == "__main__":
    main()
