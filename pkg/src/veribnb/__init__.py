"""Complete verification of ReLU networks by branch and bound, and IBP-R training."""
from importlib.resources import files

from .network import Network, PropertySpec, canonicalize, evaluate, load_network, load_properties
from .intervals import Box, ibp_forward, make_input_box, hull_area
from .dual import optimize_dual
from .bab import BabConfig, VerificationResult, verify, verify_property
from .train import TrainConfig, evaluate_model, ibpr_loss, train

__version__ = "0.1.0"


def asset_path(name):
    """Path of a file shipped in ``veribnb/assets`` (``desk_model.json``, ``desk_props.json``)."""
    return files(__package__) / "assets" / name
