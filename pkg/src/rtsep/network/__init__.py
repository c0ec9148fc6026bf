from rtsep.network.config import DR, E2E, NS, PRESETS, SS, SS_SUB, ModelConfig, from_text, preset, to_text
from rtsep.network.macs import layer_macs, mac_count
from rtsep.network.model import Model, ModelState, build, identity_params, param_shapes, random_params
from rtsep.network.weights import WeightBundle, load_model, load_weights, read_bundle, save_weights

__all__ = [
    "DR", "E2E", "NS", "PRESETS", "SS", "SS_SUB", "ModelConfig", "Model", "ModelState", "WeightBundle",
    "build", "from_text", "identity_params", "layer_macs", "load_model", "load_weights", "mac_count",
    "param_shapes", "preset", "random_params", "read_bundle", "save_weights", "to_text",
]
