"""How often each selection rule drops the backdoor client on the sparse Gaussian demo.

Every round draws ``n`` clients, one of them shifted by ``delta`` on the first
``support`` coordinates, and records whether it lands outside the selected set.
"""
import argparse

import numpy as np

from dimkrum.krum import DimKrumConfig, select
from dimkrum.theory import GaussianDemoSpec, sample_demo_round


def exclusion_rates(spec, n, rounds, rules, seed=0):
    hits = {name: 0 for name in rules}
    for r in range(rounds):
        rs = sample_demo_round(spec, n, 0, np.random.default_rng([seed, r]))
        for name, cfg in rules.items():
            rep, _ = select(rs, cfg)
            hits[name] += 0 not in rep.selected
    return {name: h / rounds for name, h in hits.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, default=10_000)
    ap.add_argument("--support", type=int, default=10)
    ap.add_argument("--delta", type=float, default=3.1)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--rhos", default="0.0001,0.001,0.01,0.1")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = GaussianDemoSpec.sparse(args.dim, args.support, args.delta)
    rules = {"multikrum": DimKrumConfig(rho=1.0, alpha=0.0, lam=0.0, variant="multikrum")}
    for rho in (float(x) for x in args.rhos.split(",")):
        rules[f"dimkrum rho={rho:g}"] = DimKrumConfig(rho=rho, alpha=0.0, lam=0.0, variant="dimkrum")
    print("rule,exclusion_rate")
    for name, rate in exclusion_rates(spec, args.n, args.rounds, rules, args.seed).items():
        print(f"{name},{rate:.3f}")


if __name__ == "__main__":
    main()
