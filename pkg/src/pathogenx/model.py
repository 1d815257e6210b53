"""Pathology encoder, genomic projection, genomic decoder and survival head.

Training runs both modalities through one tape (``forward_train``); inference
(``forward_test``) only ever sees the image bag.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import (
    LayerNormParams,
    LinearParams,
    MSAParams,
    PPEGParams,
    init_mlp,
    layer_norm_forward,
    linear_forward,
    mlp_forward,
    msa_forward,
    named_parameters,
    ppeg_forward,
)
from .tensor import ShapeError, Tensor, concat_rows

RISK_INPUTS = ("translated", "class_token")


@dataclass
class ModelConfig:
    d_in: int = 1024
    d_genomic: int = 746
    dim: int = 256
    heads: int = 4
    hidden: int = 64
    decoder_depth: int = 1
    risk_input: str = "translated"

    def __post_init__(self):
        if self.risk_input not in RISK_INPUTS:
            raise ValueError(f"risk_input must be one of {RISK_INPUTS}, got {self.risk_input!r}")
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={self.dim}")
        if self.decoder_depth < 1:
            raise ValueError("decoder_depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PathoGenXParams:
    input_embed: LinearParams
    class_token: Tensor
    msa1: MSAParams
    ln1: LayerNormParams
    ppeg: PPEGParams
    msa2: MSAParams
    ln2: LayerNormParams
    genomic_projection: LinearParams
    decoder_msa: list[MSAParams]
    decoder_ln: list[LayerNormParams]
    decoder_out: LinearParams
    risk_head: list[LinearParams]
    config: ModelConfig = field(default_factory=ModelConfig, compare=False, repr=False)

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "PathoGenXParams":
        d = config.dim
        return cls(
            input_embed=LinearParams.init(rng, config.d_in, d),
            class_token=Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True),
            msa1=MSAParams.init(rng, d, config.heads),
            ln1=LayerNormParams.init(d),
            ppeg=PPEGParams.init(rng, d),
            msa2=MSAParams.init(rng, d, config.heads),
            ln2=LayerNormParams.init(d),
            genomic_projection=LinearParams.init(rng, config.d_genomic, d),
            decoder_msa=[MSAParams.init(rng, d, config.heads) for _ in range(config.decoder_depth)],
            decoder_ln=[LayerNormParams.init(d) for _ in range(config.decoder_depth)],
            decoder_out=LinearParams.init(rng, d, d),
            risk_head=init_mlp(rng, [d, config.hidden, 1]),
            config=config,
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in named_parameters(self) if not n.startswith("config")]

    def groups(self) -> dict[str, list[Tensor]]:
        """Parameters keyed by top-level component name."""
        out: dict[str, list[Tensor]] = {}
        for name, t in self.named_parameters():
            out.setdefault(name.split(".")[0], []).append(t)
        return out


@dataclass
class ForwardArtifacts:
    P_l_cls: Tensor
    G_l: Tensor
    G_l_hat: Tensor
    risk: Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _block(msa: MSAParams, ln: LayerNormParams, x: Tensor) -> Tensor:
    return layer_norm_forward(ln, msa_forward(msa, x)) + x


def encode_pathology(params: PathoGenXParams, bag) -> Tensor:
    """Map an N x D_in bag to the (N+1) x D encoder output, class token in row 0."""
    bag = _as_tensor(bag)
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise ShapeError(f"encode_pathology: need a non-empty N x D_in bag, got shape {bag.shape}")
    p0 = concat_rows([params.class_token, linear_forward(params.input_embed, bag)])
    p1 = _block(params.msa1, params.ln1, p0)
    p2 = ppeg_forward(params.ppeg, p1)
    return _block(params.msa2, params.ln2, p2)


def project_genomic(params: PathoGenXParams, g0) -> Tensor:
    g0 = _as_tensor(g0)
    if g0.shape != (params.genomic_projection.n_in,):
        raise ShapeError(
            f"project_genomic: expected length {params.genomic_projection.n_in}, got shape {g0.shape}"
        )
    return linear_forward(params.genomic_projection, g0)


def _decoder_class_row(params: PathoGenXParams, p_l: Tensor) -> Tensor:
    dim = params.decoder_out.n_in
    if p_l.ndim != 2 or p_l.shape[1] != dim or p_l.shape[0] < 2:
        raise ShapeError(f"decode_to_genomic: expected (N+1) x {dim} with N >= 1, got {p_l.shape}")
    z = p_l
    for msa, ln in zip(params.decoder_msa[:-1], params.decoder_ln[:-1]):
        z = _block(msa, ln, z)
    # Only the class-token row of the last block is read; LN and the residual
    # act row-wise, so computing that row alone is exact.
    attended = msa_forward(params.decoder_msa[-1], z, query_rows=1)
    return layer_norm_forward(params.decoder_ln[-1], attended) + z.slice_rows(0, 1)


def decode_to_genomic(params: PathoGenXParams, p_l: Tensor) -> Tensor:
    """Translate encoder output to the genomic latent: one block, then the class row."""
    return linear_forward(params.decoder_out, _decoder_class_row(params, p_l).reshape(p_l.shape[1]))


def predict_risk(params: PathoGenXParams, features: Tensor) -> Tensor:
    return mlp_forward(params.risk_head, features).reshape(())


def forward_train(params: PathoGenXParams, bag, g0) -> ForwardArtifacts:
    p_l = encode_pathology(params, bag)
    cls_row = p_l.slice_rows(0, 1).reshape(p_l.shape[1])
    g_l = project_genomic(params, g0)
    g_hat = decode_to_genomic(params, p_l)
    head_input = g_hat if params.config.risk_input == "translated" else cls_row
    return ForwardArtifacts(cls_row, g_l, g_hat, predict_risk(params, head_input))


def forward_test(params: PathoGenXParams, bag) -> Tensor:
    """Image-only risk; genomic inputs are never consulted."""
    p_l = encode_pathology(params, bag)
    if params.config.risk_input == "translated":
        return predict_risk(params, decode_to_genomic(params, p_l))
    return predict_risk(params, p_l.slice_rows(0, 1).reshape(p_l.shape[1]))


def forward_train_batch(params: PathoGenXParams, bags: Sequence, genomics: Sequence) -> ForwardArtifacts:
    """``forward_train`` over a batch, with row i of every field for patient i.

    Encoder and decoder blocks run per bag (bag sizes differ); the layers that
    act on single D-vectors run once on the stacked B x D matrices, which is the
    same arithmetic with far fewer tape nodes.
    """
    if len(bags) != len(genomics) or not bags:
        raise ValueError(f"need equally many bags and genomic vectors, got {len(bags)} and {len(genomics)}")
    cls_rows, dec_rows = [], []
    for bag in bags:
        p_l = encode_pathology(params, bag)
        cls_rows.append(p_l.slice_rows(0, 1))
        dec_rows.append(_decoder_class_row(params, p_l))
    p_cls = concat_rows(cls_rows)
    g0 = np.stack([np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64) for g in genomics])
    if g0.shape[1] != params.genomic_projection.n_in:
        raise ShapeError(f"genomic vectors have length {g0.shape[1]}, expected {params.genomic_projection.n_in}")
    g_l = linear_forward(params.genomic_projection, Tensor(g0))
    g_hat = linear_forward(params.decoder_out, concat_rows(dec_rows))
    head_input = g_hat if params.config.risk_input == "translated" else p_cls
    risk = mlp_forward(params.risk_head, head_input).reshape(len(bags))
    return ForwardArtifacts(p_cls, g_l, g_hat, risk)


def predict_bags(params: PathoGenXParams, bags: Sequence) -> np.ndarray:
    return np.array([forward_test(params, bag).item() for bag in bags])
