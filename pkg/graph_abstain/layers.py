import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ParameterError


log = logging.getLogger('layers')

LAYER_GAT = 'gat'
LAYER_GCN = 'gcn'
LAYER_KINDS = (LAYER_GAT, LAYER_GCN)


@dataclass(frozen=True)
class GatLayerConfig:
    in_features: int
    out_features_per_head: int
    num_heads: int = 1
    concat_heads: bool = True
    attention_slope: float = 0.2
    dropout_p: float = 0.6
    attention_dropout: bool = True

    @property
    def out_features(self):
        if self.concat_heads:
            return self.out_features_per_head * self.num_heads
        return self.out_features_per_head

    def validate(self):
        if self.num_heads < 1:
            raise ParameterError(f'num_heads must be >= 1, got {self.num_heads}')
        if self.in_features < 1 or self.out_features_per_head < 1:
            raise ParameterError('Layer widths must be positive')
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f'dropout_p must be in [0, 1), got {self.dropout_p}')
        if self.attention_slope <= 0.0:
            raise ParameterError(f'attention_slope must be > 0, got {self.attention_slope}')


@dataclass(frozen=True)
class EncoderConfig:
    layer_kind: str = LAYER_GAT
    num_layers: int = 2
    hidden_features: int = 8
    num_heads: int = 8
    output_heads: int = 1
    dropout_p: float = 0.6
    attention_slope: float = 0.2
    attention_dropout: bool = True

    @property
    def hidden_width(self):
        return self.hidden_features * self.num_heads

    def validate(self):
        if self.layer_kind not in LAYER_KINDS:
            raise ParameterError(f"layer_kind must be one of {LAYER_KINDS}, got '{self.layer_kind}'")
        if self.num_layers < 2:
            raise ParameterError(f'num_layers must be >= 2, got {self.num_layers}')
        if self.output_heads < 1:
            raise ParameterError(f'output_heads must be >= 1, got {self.output_heads}')
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f'dropout_p must be in [0, 1), got {self.dropout_p}')

    def layer_configs(self, in_features, num_outputs):
        self.validate()
        configs = []
        width = in_features
        for _ in range(self.num_layers - 1):
            if self.layer_kind == LAYER_GAT:
                config = GatLayerConfig(
                    in_features=width,
                    out_features_per_head=self.hidden_features,
                    num_heads=self.num_heads,
                    concat_heads=True,
                    attention_slope=self.attention_slope,
                    dropout_p=self.dropout_p,
                    attention_dropout=self.attention_dropout
                )
            else:
                config = GatLayerConfig(in_features=width, out_features_per_head=self.hidden_width)
            configs.append(config)
            width = config.out_features

        if self.layer_kind == LAYER_GAT:
            final = GatLayerConfig(
                in_features=width,
                out_features_per_head=num_outputs,
                num_heads=self.output_heads,
                concat_heads=False,
                attention_slope=self.attention_slope,
                dropout_p=self.dropout_p,
                attention_dropout=self.attention_dropout
            )
        else:
            final = GatLayerConfig(in_features=width, out_features_per_head=num_outputs)
        configs.append(final)

        for config in configs:
            config.validate()
        return configs

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_linear(rng, in_features, out_features):
    return {
        'W': ad.parameter(glorot_uniform(rng, in_features, out_features)),
        'bias': ad.parameter(np.zeros((1, out_features)))
    }


def linear_forward(h, params):
    return ad.add_bias(ad.matmul(h, params['W']), params['bias'])


def init_gat_layer(cfg, rng):
    cfg.validate()
    params = {}
    width = cfg.out_features_per_head
    for k in range(cfg.num_heads):
        params[f'W{k}'] = ad.parameter(glorot_uniform(rng, cfg.in_features, width))
        attention = glorot_uniform(rng, 2 * width, 1)
        params[f'a_src{k}'] = ad.parameter(attention[:width])
        params[f'a_dst{k}'] = ad.parameter(attention[width:])
    params['bias'] = ad.parameter(np.zeros((1, cfg.out_features)))
    return params


def init_gcn_layer(cfg, rng):
    return init_linear(rng, cfg.in_features, cfg.out_features_per_head)


def attention_coefficients(z, g, a_src, a_dst, slope):
    source = ad.matmul(z, a_src)
    target = ad.matmul(z, a_dst)
    logits = ad.add(ad.gather_rows(source, g.edge_rows), ad.gather_rows(target, g.csr_neighbors))
    logits = ad.leaky_relu(logits, slope)
    return ad.segment_softmax(logits, g.csr_offsets)


def gat_layer_forward(h, g, params, cfg, train_flag, rng=None):
    if h.shape != (g.num_nodes, cfg.in_features):
        raise DimensionError(f'GAT layer expects input ({g.num_nodes}, {cfg.in_features}), got {h.shape}')

    heads = []
    for k in range(cfg.num_heads):
        z = ad.matmul(h, params[f'W{k}'])
        attention = attention_coefficients(z, g, params[f'a_src{k}'], params[f'a_dst{k}'], cfg.attention_slope)
        if cfg.attention_dropout:
            attention = ad.dropout(attention, cfg.dropout_p, train_flag, rng)
        heads.append(ad.segment_weighted_sum(attention, z, g.csr_offsets, g.csr_neighbors))

    if cfg.concat_heads:
        out = ad.concat_cols(heads) if len(heads) > 1 else heads[0]
    else:
        out = heads[0]
        for head in heads[1:]:
            out = ad.add(out, head)
        if len(heads) > 1:
            out = ad.scale(out, 1.0 / len(heads))
    return ad.add_bias(out, params['bias'])


def gcn_layer_forward(h, g, params, train_flag=False):
    if h.shape[0] != g.num_nodes or h.shape[1] != params['W'].shape[0]:
        raise DimensionError(f"GCN layer expects input ({g.num_nodes}, {params['W'].shape[0]}), got {h.shape}")
    hw = ad.matmul(h, params['W'])
    weights = ad.constant(g.gcn_edge_weights)
    out = ad.segment_weighted_sum(weights, hw, g.csr_offsets, g.csr_neighbors)
    return ad.add_bias(out, params['bias'])


def encoder_forward(g, cfg, params, train_flag, rng=None):
    layer_configs = cfg.layer_configs(g.num_features, params[-1]['bias'].shape[1])
    if len(params) != len(layer_configs):
        raise DimensionError(f'Encoder has {len(params)} parameter groups, config needs {len(layer_configs)}')

    x = ad.constant(g.features)
    penultimate = None
    for i, (layer_cfg, layer_params) in enumerate(zip(layer_configs, params)):
        x = ad.dropout(x, cfg.dropout_p, train_flag, rng)
        if cfg.layer_kind == LAYER_GAT:
            x = gat_layer_forward(x, g, layer_params, layer_cfg, train_flag, rng)
        else:
            x = gcn_layer_forward(x, g, layer_params, train_flag)
        x = ad.elu(x)
        if i == len(layer_configs) - 2:
            penultimate = x
    return x, penultimate


class Encoder:

    def __init__(self, cfg, in_features, num_outputs, rng):
        self._cfg = cfg
        self._layer_configs = cfg.layer_configs(in_features, num_outputs)
        init = init_gat_layer if cfg.layer_kind == LAYER_GAT else init_gcn_layer
        self._params = [init(layer_cfg, rng) for layer_cfg in self._layer_configs]

    @property
    def config(self):
        return self._cfg

    @property
    def layer_configs(self):
        return self._layer_configs

    @property
    def params(self):
        return self._params

    @property
    def output_width(self):
        return self._layer_configs[-1].out_features

    @property
    def penultimate_width(self):
        return self._layer_configs[-2].out_features

    def named_parameters(self, prefix='encoder'):
        named = {}
        for i, layer_params in enumerate(self._params):
            for name, tensor in layer_params.items():
                named[f'{prefix}.{i}.{name}'] = tensor
        return named

    def forward(self, g, train_flag, rng=None):
        return encoder_forward(g, self._cfg, self._params, train_flag, rng)
