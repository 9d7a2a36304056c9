"""Low-rank adapters over frozen base models.

A LoRA pair holds A [m, r] and B [n, r] for a host weight flattened to
[m, n] = [C_out, C_in*k*k]; the applied delta is alpha * reshape(A @ B^T).
B starts at zero so attaching is an exact identity. Norm deltas are
zero-initialized per-channel offsets added to resnet gamma/beta.

The resolution-adapter bundle wraps the down/up sampler conv weights plus
all resnet norms; the style bundle wraps the bottleneck attention
projections and serves as a contrast baseline in evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor
from .unet import UNetModel, list_sites, model_fingerprint, unet_forward

__all__ = [
    "LoRAPair", "NormDelta", "ResAdapterBundle", "StyleLoRABundle",
    "attach_resadapter", "attach_style_lora", "adapted_forward", "merge",
    "effective_param_map", "trainable_param_count", "frozen_param_count",
    "total_param_count",
]

DEFAULT_RANK = 4

LORA_A_SUFFIX = ".lora.A"
LORA_B_SUFFIX = ".lora.B"
DELTA_GAMMA_SUFFIX = ".delta.gamma"
DELTA_BETA_SUFFIX = ".delta.beta"


@dataclass
class LoRAPair:
    site: str
    a: Tensor  # [m, r]
    b: Tensor  # [n, r]
    rank: int

    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class NormDelta:
    site: str  # norm prefix, e.g. "down.0.res.1.norm2"
    dgamma: Tensor
    dbeta: Tensor

    def param_count(self) -> int:
        return self.dgamma.size + self.dbeta.size


@dataclass
class ResAdapterBundle:
    conv_loras: list[LoRAPair]
    norm_deltas: list[NormDelta]
    alpha_r: float
    base_fingerprint: str

    def lora_pairs(self) -> list[LoRAPair]:
        return self.conv_loras

    def deltas(self) -> list[NormDelta]:
        return self.norm_deltas

    def alpha_value(self) -> float:
        return self.alpha_r

    def with_alpha(self, alpha: float) -> "ResAdapterBundle":
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha_r must be in [0, 1], got {alpha}")
        return replace(self, alpha_r=float(alpha))

    def restricted(self, modes) -> "ResAdapterBundle":
        """Keep only the named parts: subset of {'conv_lora', 'norm_delta'}."""
        modes = set(modes)
        unknown = modes - {"conv_lora", "norm_delta"}
        if unknown:
            raise ConfigError(f"unknown ablation mode(s) {sorted(unknown)}")
        return replace(
            self,
            conv_loras=self.conv_loras if "conv_lora" in modes else [],
            norm_deltas=self.norm_deltas if "norm_delta" in modes else [],
        )

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for pair in self.conv_loras:
            out[pair.site + LORA_A_SUFFIX] = pair.a
            out[pair.site + LORA_B_SUFFIX] = pair.b
        for nd in self.norm_deltas:
            out[nd.site + DELTA_GAMMA_SUFFIX] = nd.dgamma
            out[nd.site + DELTA_BETA_SUFFIX] = nd.dbeta
        return out


@dataclass
class StyleLoRABundle:
    attn_loras: list[LoRAPair]
    alpha: float
    base_fingerprint: str

    def lora_pairs(self) -> list[LoRAPair]:
        return self.attn_loras

    def deltas(self) -> list[NormDelta]:
        return []

    def alpha_value(self) -> float:
        return self.alpha

    def with_alpha(self, alpha: float) -> "StyleLoRABundle":
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        return replace(self, alpha=float(alpha))

    def named_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for pair in self.attn_loras:
            out[pair.site + LORA_A_SUFFIX] = pair.a
            out[pair.site + LORA_B_SUFFIX] = pair.b
        return out


def _new_pair(model: UNetModel, site: str, rank: int, rng: np.random.Generator) -> LoRAPair:
    host = model.params[site]
    if host.ndim == 4:
        m = host.shape[0]
        n = int(np.prod(host.shape[1:]))
    elif host.ndim == 2:
        m, n = host.shape
    else:
        raise ConfigError(f"cannot wrap site {site} with shape {host.shape}")
    if rank < 1 or rank > min(m, n):
        raise ConfigError(f"rank {rank} invalid for site {site} (must be in [1, {min(m, n)}])")
    a = Tensor(rng.normal(0.0, np.sqrt(1.0 / m), (m, rank)), requires_grad=True)
    b = Tensor(np.zeros((n, rank)), requires_grad=True)
    return LoRAPair(site=site, a=a, b=b, rank=rank)


def _freeze(model: UNetModel) -> None:
    for name, tensor in model.params.items():
        tensor.requires_grad = False
        model.frozen.add(name)


def attach_resadapter(model: UNetModel, rank: int = DEFAULT_RANK, seed: int = 0) -> ResAdapterBundle:
    """Wrap sampler convs with LoRA pairs and resnet norms with zero deltas.

    Freezes every base parameter; attaching changes no output (B and the
    norm deltas start at zero).
    """
    rng = np.random.default_rng(seed)
    pairs = [_new_pair(model, site, rank, rng) for site in list_sites(model, "sampler_convs")]
    norm_prefixes = sorted({site.rsplit(".", 1)[0] for site in list_sites(model, "resnet_norms")})
    deltas = []
    for prefix in norm_prefixes:
        c = model.params[prefix + ".gamma"].shape[0]
        deltas.append(NormDelta(
            site=prefix,
            dgamma=Tensor(np.zeros(c), requires_grad=True),
            dbeta=Tensor(np.zeros(c), requires_grad=True),
        ))
    _freeze(model)
    return ResAdapterBundle(
        conv_loras=pairs, norm_deltas=deltas, alpha_r=1.0,
        base_fingerprint=model_fingerprint(model),
    )


def attach_style_lora(model: UNetModel, rank: int = DEFAULT_RANK, seed: int = 0) -> StyleLoRABundle:
    """Wrap the bottleneck attention projections (q/k/v/o) with LoRA pairs."""
    sites = list_sites(model, "attention_projections")
    if not sites:
        raise ConfigError("model has no attention projection sites to wrap")
    rng = np.random.default_rng(seed)
    pairs = [_new_pair(model, site, rank, rng) for site in sites]
    _freeze(model)
    return StyleLoRABundle(attn_loras=pairs, alpha=1.0, base_fingerprint=model_fingerprint(model))


def _check_fingerprint(model: UNetModel, bundle) -> None:
    fp = model_fingerprint(model)
    if fp != bundle.base_fingerprint:
        raise ConfigError(
            f"adapter was built for base fingerprint {bundle.base_fingerprint}, model has {fp}"
        )


def _lora_delta_array(pair: LoRAPair, host_shape: tuple[int, ...]) -> np.ndarray:
    # identical arithmetic to the taped path in effective_param_map
    bt = np.ascontiguousarray(pair.b.data.transpose())
    return np.matmul(pair.a.data, bt).reshape(host_shape)


def effective_param_map(model: UNetModel, bundle) -> dict[str, Tensor]:
    """Parameter map with adapter deltas applied as taped expressions.

    Gradients flow into the bundle tensors only; base parameters are frozen
    leaves and never receive grads through this map.
    """
    _check_fingerprint(model, bundle)
    alpha = bundle.alpha_value()
    p = dict(model.params)
    for pair in bundle.lora_pairs():
        host = model.params[pair.site]
        delta = ops.reshape(ops.matmul(pair.a, ops.permute(pair.b, (1, 0))), host.shape)
        p[pair.site] = ops.add(host, ops.scale(delta, alpha))
    for nd in bundle.deltas():
        for field, leaf in (("gamma", nd.dgamma), ("beta", nd.dbeta)):
            site = f"{nd.site}.{field}"
            p[site] = ops.add(model.params[site], ops.scale(leaf, alpha))
    return p


def adapted_forward(model: UNetModel, bundle, x: Tensor, t, c=None, forward=unet_forward) -> Tensor:
    return forward(model, x, t, c, effective_param_map(model, bundle))


def merge(model: UNetModel, bundle) -> UNetModel:
    """New model with deltas folded into the weights; the original is untouched."""
    _check_fingerprint(model, bundle)
    merged = model.clone()
    alpha = bundle.alpha_value()
    for pair in bundle.lora_pairs():
        host = merged.params[pair.site]
        host.data = host.data + alpha * _lora_delta_array(pair, host.shape)
    for nd in bundle.deltas():
        merged.params[nd.site + ".gamma"].data = (
            merged.params[nd.site + ".gamma"].data + alpha * nd.dgamma.data
        )
        merged.params[nd.site + ".beta"].data = (
            merged.params[nd.site + ".beta"].data + alpha * nd.dbeta.data
        )
    merged.frozen = set()
    for tensor in merged.params.values():
        tensor.requires_grad = True
    return merged


def trainable_param_count(bundle) -> int:
    return sum(t.size for t in bundle.named_tensors().values())


def frozen_param_count(model: UNetModel) -> int:
    return sum(model.params[name].size for name in model.frozen)


def total_param_count(model: UNetModel) -> int:
    return sum(t.size for t in model.params.values())
