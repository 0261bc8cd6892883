from .bilstm import BiLstmConfig, BiLstmTagger, bilstm_forward
from .checkpoint import Checkpoint, build_model, load_checkpoint, load_into, load_state, save_checkpoint
from .layers import (
    AttentionFusion, BiLSTMLayer, LSTMCell, Module, MultiHeadAttention, attention_fusion, lstm_cell,
    multi_head_attention, positional_encoding,
)
from .transformer import (
    TransformerConfig, TransformerTagger, shift_right, transformer_forward_teacher_forced,
    transformer_greedy_decode,
)

__all__ = [
    "AttentionFusion", "BiLSTMLayer", "BiLstmConfig", "BiLstmTagger", "Checkpoint", "LSTMCell",
    "Module", "MultiHeadAttention", "TransformerConfig", "TransformerTagger", "attention_fusion",
    "bilstm_forward", "build_model", "load_checkpoint", "load_into", "load_state", "lstm_cell",
    "multi_head_attention", "positional_encoding", "save_checkpoint", "shift_right",
    "transformer_forward_teacher_forced", "transformer_greedy_decode",
]
