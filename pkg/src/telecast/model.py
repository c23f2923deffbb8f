"""Full forecast model: backbone plus optional ocean-index gate, with the
adaptation-mode bookkeeping (which tensors train, which stay frozen).

Modes
  frozen         backbone only, nothing trainable (baseline evaluation)
  full_finetune  backbone only, every parameter trainable
  lora_oci       wrapped linears + gate + input/output embeddings train
  lora_no_oci    identical architecture, ocean indices replaced by zeros
"""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, GridTransformer
from .grids import GridSpec
from .lora import LoraLinear, ParamAccount, account_parameters, inject_lora, lora_modules
from .nn import Module
from .rng import RngStream
from .temporal import OciGate
from .tensor import Tensor

MODES = ("frozen", "full_finetune", "lora_oci", "lora_no_oci")
DEFAULT_LORA_TARGETS = ("*.attn.q", "*.attn.k", "*.attn.v", "*.attn.out",
                        "*.mlp.fc1", "*.mlp.fc2")

# the input embedding (patch projections plus the additive position terms)
# and the output embedding (patch recovery) keep training during adaptation;
# the position terms double as stable carriers for the gate signal
_EMBEDDING_PREFIXES = ("backbone.embed.", "backbone.recover.")


class ForecastModel(Module):
    def __init__(self, backbone: GridTransformer, gate: OciGate | None = None,
                 gate_mode: str = "residual", use_oci: bool = True):
        super().__init__()
        self.backbone = backbone
        self.gate = gate
        self.gate_mode = gate_mode
        self.use_oci = use_oci

    def forward(self, surface: Tensor, upper: Tensor, oci: Tensor | None = None):
        gate_vec = None
        if self.gate is not None:
            if oci is None:
                raise ValueError("model has a gate but no ocean-index input was given")
            if not self.use_oci:
                oci = Tensor(np.zeros_like(oci.data))
            gate_vec = self.gate(oci)
        return self.backbone(surface, upper, gate=gate_vec, gate_mode=self.gate_mode)

    def set_dropout_rng(self, rng: RngStream | None) -> None:
        for layer in lora_modules(self).values():
            layer.dropout_rng = rng


def parameter_group(name: str) -> str:
    """Bucket a parameter name for the accounting report."""
    if name.endswith(".down") or name.endswith(".up"):
        return "lora"
    if name.startswith("gate."):
        return "temporal_filter"
    if any(name.startswith(p) for p in _EMBEDDING_PREFIXES):
        return "embeddings"
    return "backbone"


def build_model(grid: GridSpec, cfg: BackboneConfig, mode: str, rng: RngStream,
                n_oci_indices: int = 16, n_oci_lags: int = 22,
                gate_mode: str = "residual", gate_width: int = 8,
                lora_rank: int = 4, lora_alpha: float = 8.0,
                lora_dropout: float = 0.1,
                lora_targets=DEFAULT_LORA_TARGETS) -> ForecastModel:
    """Construct the model for a mode. LoRA injection happens after the
    backbone is built so the base weights are exactly the pretrained ones."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    backbone = GridTransformer(grid, cfg, rng.split("backbone"))
    gate = None
    if mode in ("lora_oci", "lora_no_oci"):
        gate = OciGate(n_oci_indices, n_oci_lags, cfg.embed_dim, rng.split("gate"),
                       width=gate_width)
    model = ForecastModel(backbone, gate=gate, gate_mode=gate_mode,
                          use_oci=(mode != "lora_no_oci"))
    model.mode = mode
    if gate is not None:
        inject_lora(model, lora_targets, rank=lora_rank, alpha=lora_alpha,
                    dropout_p=lora_dropout, rng=rng.split("lora"))
    apply_mode_flags(model, mode)
    return model


def apply_mode_flags(model: ForecastModel, mode: str) -> ParamAccount:
    """Set trainable flags for the mode and return the resulting account."""
    if mode == "frozen":
        model.freeze(True)
    elif mode == "full_finetune":
        model.freeze(False)
    else:
        model.freeze(True)
        for name, p in model.named_parameters():
            group = parameter_group(name)
            if group in ("lora", "temporal_filter", "embeddings"):
                p.requires_grad = True
    return account_parameters(model, parameter_group)


def trainable_named_parameters(model: Module) -> list:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def frozen_named_parameters(model: Module) -> list:
    return [(n, p) for n, p in model.named_parameters() if not p.requires_grad]
