"""Data-free int8 post-training quantization with zero-point-free integer convolution."""
from .bnfold import fold_bn
from .engine import (QuantizedGraph, count_ops, load_quantized, quantize_graph, run_fake_quant,
                     run_float, run_int_affine, run_int_symmetric, save_quantized)
from .graph import Graph, Node, load_model, make_graph, save_model, shape_inference
from .quantizer import (QuantParams, calibrate_activations, compute_params, dequantize,
                        quantize)
from .squant import CalibReport, nearest_round, squant_round
from .tensor import TensorAcc, TensorF, TensorQ, conv2d_f32, conv2d_int

__version__ = "0.1.0"
