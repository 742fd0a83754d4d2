import copy
import json

import pytest

# small enough that every workflow (dataset, banks, training, all methods) runs in a few seconds
TINY_CONFIG = {
    "seed": 1,
    "dataset": {"shape": [64, 64], "band": [2, 16], "n_train": 4, "n_val": 2, "n_flats": 6,
                "n_filaments": 3, "cold_per_source": 3},
    "dffn": {"S": 10, "max_iterations": 50},
    "unet": {"base_channels": 4, "depth": 2, "epochs": 1},
    "shock_model": {"base_channels": 4},
    "ensemble": {"members": 2},
}


@pytest.fixture
def tiny_config():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path
