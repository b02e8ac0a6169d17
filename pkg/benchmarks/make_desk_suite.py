"""Regenerate the shipped desk model and its property suite.

The model is a PGD-trained 10-32-32-32-2 net on two-moons with eight nuisance
features; the suite holds the first 50 correctly classified test points at
radius 0.1. Run from the repository root:

    python benchmarks/make_desk_suite.py
"""
import json
from pathlib import Path

import numpy as np

from veribnb.data import two_moons
from veribnb.network import PropertySpec, evaluate, property_to_dict, save_network
from veribnb.train import desk_config, pgd_baseline, train

ASSETS = Path(__file__).resolve().parents[1] / "src" / "veribnb" / "assets"
EPS = 0.1
N_PROPS = 50


def main():
    full = two_moons(600, 0.1, 7, dim=10)
    tr, te = full.train_test_split(0.25, 0)
    result = train(pgd_baseline(desk_config(epsilon_ver=0.03, hidden=(32, 32, 32), lr=0.1)), tr)
    net = result.network
    x_test = te.inputs[0]
    save_network(net, ASSETS / "desk_model.json",
                 test_vector={"input": x_test.tolist(), "output": evaluate(net, x_test).tolist()})
    correct = np.flatnonzero(np.argmax(evaluate(net, te.inputs), axis=1) == te.labels)
    props = []
    for k, i in enumerate(correct[:N_PROPS]):
        doc = property_to_dict(PropertySpec(te.inputs[i], EPS, int(te.labels[i]), "all"))
        props.append({"id": f"moons-{k:02d}", **doc})
    (ASSETS / "desk_props.json").write_text(json.dumps({"properties": props}, indent=1) + "\n",
                                            encoding="utf-8")
    print(f"wrote {len(props)} properties; test accuracy {len(correct) / len(te):.3f}")


if __name__ == "__main__":
    main()
