from . import graph
from .graph import (Node, add, backward, broadcast_to, concat, constant, cos,
                    cumsum, detach, div, exp, forward_derivative, gather,
                    getitem, jvp, log, matmul, mul, neg, nmean, nsum, param,
                    power, relu, reshape, sigmoid, sin, softplus, sqrt, sub)
from .nn import MlpSpec, ParamStore, init_linear, init_mlp, linear, mlp_forward, positional_encoding
from .optim import AdamState, SgdState, adam_step, sgd_step
from .serialize import read_checkpoint, write_checkpoint
