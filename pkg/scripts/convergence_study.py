"""RK4 convergence of the Moser flow on a bundled darboux scenario.

Runs the scenario's flow at a ladder of step counts and prints the
invariance residual, the distance of the images to the finest run and the
observed order between successive rungs.

    python scripts/convergence_study.py --scenario darboux-point-2d --steps 8 16 32 64 128
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from lcskit.lcs import conformal_rescale, local_potential
from lcskit.moser import build_retraction, homotopy_sigma, integrate_moser_flow
from lcskit.scenario import load_scenario


def flow_inputs(name: str, seeds: int):
    sc = load_scenario(name)
    if sc.pipeline not in ("darboux", "moser-flow"):
        raise SystemExit(f"{name} runs the {sc.pipeline} pipeline, not a Moser flow")
    tube = sc.tube()
    rng = np.random.default_rng(sc.sampling.seed)
    P = tube.sample(seeds, rng, sc.sampling.fraction)
    patch = sc.patches[0].build()
    patch.samples = P[patch.member(P)]
    P = patch.samples
    f0 = local_potential(sc.form("theta0"), patch, patch.anchor, sc.tolerances, sc.quadrature)
    f1 = local_potential(sc.form("theta1"), patch, patch.anchor, sc.tolerances, sc.quadrature)
    eta0 = conformal_rescale(sc.form("omega0"), f0, -1)
    eta1 = conformal_rescale(sc.form("omega1"), f1, -1)
    sigma = homotopy_sigma(eta1 - eta0, build_retraction(tube), P, sc.quadrature)
    return P, eta0, eta1, sigma


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="darboux-point-2d")
    ap.add_argument("--steps", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    ap.add_argument("--seeds", type=int, default=64)
    args = ap.parse_args(argv)
    steps = sorted(args.steps)
    if any(s % 4 for s in steps):
        ap.error("step counts must be multiples of 4")

    P, eta0, eta1, sigma = flow_inputs(args.scenario, args.seeds)
    runs = {s: integrate_moser_flow(P, eta0, eta1, sigma, s) for s in steps + [2 * steps[-1]]}
    ref = runs[2 * steps[-1]].images

    print(f"{'steps':>6} {'invariance':>12} {'order':>6} {'image err':>12} {'order':>6}")
    prev = None
    for s in steps:
        inv = max(float(np.max(v)) for v in runs[s].invariance.values())
        err = float(np.max(np.abs(runs[s].images - ref)))
        o_inv = o_err = ""
        if prev is not None and inv > 0 and err > 0:
            o_inv = f"{math.log2(prev[0] / inv):6.2f}"
            o_err = f"{math.log2(prev[1] / err):6.2f}"
        print(f"{s:6d} {inv:12.3e} {o_inv:>6} {err:12.3e} {o_err:>6}")
        prev = (inv, err)


if __name__ == "__main__":
    main()
