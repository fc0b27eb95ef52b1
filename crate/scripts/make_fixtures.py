"""Writes the problem files under fixtures/.

Usage: make_fixtures.py PENDULUM_NET_JSON DI_INVARIANT_SET_JSON OUT_DIR
The first file comes from train_pendulum.py, the second from
`pwalyap invariant-set fixtures/double_integrator.json` (its "set" field) or
any JSON polytope {"F", "h"}.
"""
import json
import os
import sys


def box(lo, hi):
    n = len(lo)
    F, h = [], []
    for i in range(n):
        e = [0.0] * n
        e[i] = 1.0
        F.append(e)
        h.append(hi[i])
        e = [0.0] * n
        e[i] = -1.0
        F.append(e)
        h.append(-lo[i])
    return {"F": F, "h": h}


def clamp_net(k, lo, hi):
    # lo + relu(kx - lo) - relu(kx - hi)
    return {
        "layers": [
            {"W": [k, k], "b": [-lo, -hi]},
            {"W": [[1.0, -1.0]], "b": [lo]},
        ]
    }


def zero_net(n):
    return {"layers": [{"W": [[0.0] * n], "b": [0.0]}]}


def lti(a, b, region):
    return {"modes": [dict(A=a, B=b, c=[0.0] * len(a), **region)]}


K_DI = [-0.5937862797861089, -1.0692426929382557]
A_DI = [[1.1, 1.1], [0.0, 1.1]]
B_DI = [[1.0], [0.5]]


def main(net_path, cis_path, out):
    with open(net_path) as f:
        pend_net = json.load(f)
        pend_net = {"layers": pend_net["layers"]}
    with open(cis_path) as f:
        cis = json.load(f)
        cis = {"F": cis["F"], "h": cis["h"]}
    di_plant = lti(A_DI, B_DI, box([-5.0, -5.0], [5.0, 5.0]))
    u = box([-1.0], [1.0])
    files = {
        "double_integrator.json": {
            "schema_version": 1,
            "plant": di_plant,
            "controller": {"variant": "raw", "network": clamp_net(K_DI, -1.0, 1.0)},
            "roi0": cis,
            "input_set": u,
            "options": {"candidate": "quadratic", "epsilon": "auto", "gamma": 0.9, "max_iterations": 50},
        },
        "double_integrator_projected.json": {
            "schema_version": 1,
            "plant": di_plant,
            "controller": {
                "variant": "projected_state_dependent",
                "network": clamp_net(K_DI, -2.0, 2.0),
                "roi": cis,
                "input_set": u,
            },
            "roi0": cis,
            "options": {"candidate": "quadratic", "epsilon": "auto", "gamma": 1.0, "max_iterations": 50},
        },
        "pendulum.json": {
            "schema_version": 1,
            "plant": {
                "modes": [
                    dict(A=[[1.0, 0.01], [0.1, 1.0]], B=[[0.0], [0.01]], c=[0.0, 0.0], **box([-0.2, -1.5], [0.1, 1.5])),
                    dict(A=[[1.0, 0.01], [-0.9, 1.0]], B=[[0.0], [0.01]], c=[0.0, 0.1], **box([0.1, -1.5], [0.2, 1.5])),
                ]
            },
            "controller": {"variant": "raw", "network": pend_net},
            "roi0": box([-0.16, -1.2], [0.16, 1.2]),
            "input_set": box([-4.0], [4.0]),
            "options": {
                "candidate": "quadratic",
                "epsilon": "auto",
                "gamma": {"lo": 0.1, "hi": 1.0, "tol": 0.01},
                "max_iterations": 200,
            },
        },
        "expansion_1d.json": {
            "schema_version": 1,
            "plant": lti([[2.0]], [[1.0]], box([-10.0], [10.0])),
            "controller": {"variant": "raw", "network": zero_net(1)},
            "roi0": box([-1.0], [1.0]),
            "options": {"candidate": "quadratic", "epsilon": 0.1, "max_iterations": 50},
        },
        "contraction_1d.json": {
            "schema_version": 1,
            "plant": lti([[0.5]], [[1.0]], box([-10.0], [10.0])),
            "controller": {"variant": "raw", "network": zero_net(1)},
            "roi0": box([-1.0], [1.0]),
            "options": {"candidate": "quadratic", "epsilon": "auto", "max_iterations": 50},
        },
        "cis_1d.json": {
            "schema_version": 1,
            "plant": lti([[2.0]], [[1.0]], box([-2.0], [2.0])),
            "controller": {"variant": "raw", "network": zero_net(1)},
            "roi0": box([-1.0], [1.0]),
            "input_set": u,
            "options": {"epsilon": 0.1},
        },
    }
    for name, spec in files.items():
        with open(os.path.join(out, name), "w") as f:
            json.dump(spec, f, indent=1)
            f.write("\n")


if __name__ == "__main__":
    main(*sys.argv[1:4])
