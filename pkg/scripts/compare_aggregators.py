"""Final ACC, ASR and detection rate of several aggregators on one config, averaged over seeds.

Extra ``section.key=value`` arguments override the config, e.g.

    python3 scripts/compare_aggregators.py configs/backdoor.txt --aggs fedavg,multikrum,dimkrum fed.num_malicious=2
"""
import argparse
import json
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from dimkrum.config import load_config
from dimkrum.fedsim import run_experiment


def parse_override(text):
    key, _, raw = text.partition("=")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def one(job):
    path, changes, seed = job
    res = run_experiment(load_config(path).with_values(changes), seed)
    return res.final.acc, res.final.asr, res.detection_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("overrides", nargs="*", help="section.key=value")
    ap.add_argument("--aggs", default="fedavg,multikrum,dimkrum")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    base = dict(parse_override(o) for o in args.overrides)
    print("aggregator,acc,asr,detection_rate")
    with ProcessPoolExecutor(args.workers) as ex:
        for agg in args.aggs.split(","):
            changes = {**base, "aggregator.name": agg}
            out = list(ex.map(one, [(args.config, changes, s) for s in range(args.seeds)]))
            acc, asr = np.mean([o[0] for o in out]), np.mean([o[1] for o in out])
            det = [o[2] for o in out if o[2] is not None]
            print(f"{agg},{acc:.3f},{asr:.3f},{np.mean(det):.3f}" if det else f"{agg},{acc:.3f},{asr:.3f},")


if __name__ == "__main__":
    main()
