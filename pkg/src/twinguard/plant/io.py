"""Plant configuration files (YAML or JSON) with keys tanks, pipes, pumps, sensors, noise."""

import json

import yaml

from .topology import NoiseConfig, PlantTopology, default_noise


def load_config(path):
    with open(path) as f:
        text = f.read()
    d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    topo = PlantTopology.from_dict(d)
    noise = NoiseConfig.from_dict(d["noise"]) if "noise" in d else default_noise(topo)
    return topo, noise


def save_config(path, topo, noise=None):
    d = topo.to_dict()
    if noise is not None:
        d["noise"] = noise.to_dict()
    with open(path, "w") as f:
        if str(path).endswith(".json"):
            json.dump(d, f, indent=2)
        else:
            yaml.safe_dump(d, f, sort_keys=False)
