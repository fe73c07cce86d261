from csihar.models.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from csihar.models.core import (
    BiLstmSpec,
    CnnGruSpec,
    ConvBlock,
    Model,
    ModelConfig,
    activation_elements,
    build_model,
    model_forward,
    param_count_formula,
)
from csihar.models.layers import (
    GruParams,
    LstmParams,
    bilstm_layer,
    conv1d,
    gru_cell,
    gru_sequence,
    lstm_cell,
    lstm_sequence,
)

__all__ = [
    "BiLstmSpec", "Checkpoint", "CnnGruSpec", "ConvBlock", "GruParams", "LstmParams", "Model",
    "ModelConfig", "activation_elements", "bilstm_layer", "build_model", "conv1d", "gru_cell",
    "gru_sequence", "load_checkpoint", "lstm_cell", "lstm_sequence", "model_forward",
    "param_count_formula", "save_checkpoint",
]
