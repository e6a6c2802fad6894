"""The joint grounding/tracking network and its ablation flavours."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Tuple

import torch
from torch import nn

from .encoders import EmbeddingSeq, EncoderConfig, LanguageEncoder, Projection, VisionEncoder
from .head import BoxPrediction, CornerHead, TargetDecoder, fuse_similarity
from .layers import ShapeError
from .relation import Mode, RelationEncoder, RelationOutput, build_reference, concat_segments
from .sgtm import TemporalModule
from .synthworld import MAX_TOKENS, VOCAB


class Flavor(str, enum.Enum):
    SEPRM = "seprm"  # two relation encoders + two heads, no decoder
    MSRM = "msrm"  # one shared relation encoder and head
    MSRM_TDEC = "msrm-tdec"  # + target decoder with similarity fusion
    MSRM_TM = "msrm-tm"  # + temporal module fed only with target patches
    FULL = "full"  # + NL CLS guidance inside the temporal module

    @property
    def has_decoder(self) -> bool:
        return self in (Flavor.MSRM_TDEC, Flavor.MSRM_TM, Flavor.FULL)

    @property
    def has_temporal(self) -> bool:
        return self in (Flavor.MSRM_TM, Flavor.FULL)


FLAVORS = tuple(f.value for f in Flavor)


@dataclass(frozen=True)
class ModelConfig:
    flavor: str = "full"
    vocab_size: int = len(VOCAB)
    n_tokens: int = MAX_TOKENS
    d_lang: int = 64
    d_vis: int = 64
    d_model: int = 64
    patch_size: int = 8
    n_layers_lang: int = 2
    n_layers_vis: int = 2
    n_heads: int = 4
    ffn_ratio: int = 4
    n_layers_relation: int = 4
    n_layers_decoder: int = 2
    n_layers_temporal: int = 2
    roi_size: int = 6
    memory_capacity: int = 3
    template_size: int = 32
    search_size: int = 80

    def validate(self) -> "ModelConfig":
        Flavor(self.flavor)
        if self.d_model % self.n_heads:
            raise ShapeError("d_model must be divisible by n_heads")
        for s in (self.template_size, self.search_size):
            if s % self.patch_size:
                raise ShapeError(f"image size {s} not divisible by patch size {self.patch_size}")
        self.encoder_config().validate()
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size, n_tokens=self.n_tokens, d_lang=self.d_lang,
            d_vis=self.d_vis, d_model=self.d_model, patch_size=self.patch_size,
            n_layers_lang=self.n_layers_lang, n_layers_vis=self.n_layers_vis,
            n_heads=self.n_heads, ffn_ratio=self.ffn_ratio,
            max_grid=max(self.search_size, self.template_size) // self.patch_size,
        )

    @property
    def n_template_tokens(self) -> int:
        return (self.template_size // self.patch_size) ** 2

    @property
    def n_test_tokens(self) -> int:
        return (self.search_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class JointModel(nn.Module):
    """Language + vision encoders, relation modelling, target decoding and box head.

    One instance serves both grounding and tracking; the SEPRM flavour is the
    exception and keeps separate relation encoders and heads per mode.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        self.flavor = Flavor(c.flavor)
        enc = c.encoder_config()
        self.lang_encoder = LanguageEncoder(enc)
        self.vision_encoder = VisionEncoder(enc)
        self.lang_proj = Projection(c.d_lang, c.d_model)
        self.vis_proj = Projection(c.d_vis, c.d_model)
        nl, nz, nt = c.n_tokens, c.n_template_tokens, c.n_test_tokens
        if self.flavor is Flavor.SEPRM:
            self.ground_relation = RelationEncoder(c.d_model, c.n_heads, c.n_layers_relation, nl, 0, nt, c.ffn_ratio)
            self.track_relation = RelationEncoder(c.d_model, c.n_heads, c.n_layers_relation, 0, nz, nt, c.ffn_ratio)
            self.ground_head = CornerHead(c.d_model)
            self.track_head = CornerHead(c.d_model)
        else:
            self.relation = RelationEncoder(c.d_model, c.n_heads, c.n_layers_relation, nl, nz, nt, c.ffn_ratio)
            self.head = CornerHead(c.d_model)
        if self.flavor.has_decoder:
            self.decoder = TargetDecoder(c.d_model, c.n_heads, c.n_layers_decoder, c.ffn_ratio)
        if self.flavor.has_temporal:
            self.temporal = TemporalModule(
                c.d_model, c.n_heads, c.roi_size, c.memory_capacity,
                c.n_layers_temporal, c.n_layers_temporal,
                use_nl_cls=self.flavor is Flavor.FULL, ffn_ratio=c.ffn_ratio)

    # -- building blocks -------------------------------------------------
    @property
    def has_decoder(self) -> bool:
        return self.flavor.has_decoder

    @property
    def has_temporal(self) -> bool:
        return self.flavor.has_temporal

    def encode_text(self, ids: torch.Tensor, valid: torch.Tensor) -> EmbeddingSeq:
        return self.lang_proj(self.lang_encoder(ids, valid))

    def encode_image(self, images: torch.Tensor) -> EmbeddingSeq:
        return self.vis_proj(self.vision_encoder(images))

    def relate(self, mode: Mode, lang: EmbeddingSeq, template: Optional[EmbeddingSeq],
               test: EmbeddingSeq) -> RelationOutput:
        if self.flavor is Flavor.SEPRM:
            if mode is Mode.GROUNDING:
                return self.ground_relation(*concat_segments(lang, None, test))
            return self.track_relation(*concat_segments(None, template, test))
        joint, segments = build_reference(mode, lang, template, test, self.config.n_template_tokens)
        return self.relation(joint, segments)

    def localize(self, mode: Mode, rel: RelationOutput,
                 clue: Optional[torch.Tensor] = None) -> BoxPrediction:
        h_t = rel.h_t
        if self.has_decoder:
            target = self.decoder(h_t, clue)
            h_t = fuse_similarity(target, h_t)
        if self.flavor is Flavor.SEPRM:
            head = self.ground_head if mode is Mode.GROUNDING else self.track_head
        else:
            head = self.head
        return head(h_t)

    def temporal_clue(self, patches: torch.Tensor, nl_cls: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
        if not self.has_temporal:
            return None
        return self.temporal(patches, nl_cls)

    # -- full passes -------------------------------------------------------
    def ground_forward(self, lang: EmbeddingSeq, images: torch.Tensor) -> Tuple[BoxPrediction, RelationOutput]:
        rel = self.relate(Mode.GROUNDING, lang, None, self.encode_image(images))
        return self.localize(Mode.GROUNDING, rel), rel

    def track_forward(self, lang: EmbeddingSeq, template: EmbeddingSeq, images: torch.Tensor,
                      clue: Optional[torch.Tensor] = None) -> Tuple[BoxPrediction, RelationOutput]:
        rel = self.relate(Mode.TRACKING, lang, template, self.encode_image(images))
        return self.localize(Mode.TRACKING, rel, clue), rel

    # -- bookkeeping ------------------------------------------------------
    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.lang_encoder.parameters()
        yield from self.vision_encoder.parameters()

    def other_parameters(self) -> List[nn.Parameter]:
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_names(self) -> Dict[int, str]:
        return {id(p): n for n, p in self.named_parameters()}
