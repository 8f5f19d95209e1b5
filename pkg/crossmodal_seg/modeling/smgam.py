"""
Semantic mutual guidance alignment

At every backbone stage i two parallel submodules exchange information:

* LGVLA refines the visual map under language guidance (vision queries
  language) and produces V_i'.
* VGLVA refines the language features under vision guidance (language queries
  vision) and produces L_i'.

The next stage consumes ``V_i + V_i'`` and ``L_i + L_i'``. The gates end in a
Tanh whose final linear layer starts at zero, so an untrained module is an
exact passthrough of the plain encoders.

Parameter naming: ``smgam.stage{i}.{lgvla|vglva}.*``

"""
import logging
from typing import List, NamedTuple, Optional

import torch
from torch import nn

from crossmodal_seg.config import NUM_STAGES, RunConfig
from crossmodal_seg.exceptions import InputError
from crossmodal_seg.models import CrossModalAttentionOutput

from .attention import MultiHeadAttention
from .encoders import VisionBackbone

LOG = logging.getLogger(__name__)


class LanguageGate(nn.Module):

    """Gate(A) = Tanh(Linear(ReLU(Linear(A)))) * A over the last dimension"""

    def __init__(self, dim: int, zero_init: bool = True):
        super(LanguageGate, self).__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.Tanh()
        )
        if zero_init:
            nn.init.zeros_(self.mlp[2].weight)
            nn.init.zeros_(self.mlp[2].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(x) * x


def _check_finite(name: str, x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise InputError("%s contains non-finite values" % name)


class LGVLA(nn.Module):

    """Language-guided vision alignment"""

    def __init__(
        self, vis_dim: int, text_dim: int, num_heads: int, gate_init_zero: bool = True
    ):
        super(LGVLA, self).__init__()
        self.vision_proj = nn.Sequential(nn.Conv2d(vis_dim, vis_dim, 1), nn.GELU())
        self.attn = MultiHeadAttention(vis_dim, num_heads, key_dim=text_dim, out_proj=False)
        self.guided_proj = nn.Sequential(nn.Conv2d(vis_dim, vis_dim, 1), nn.GELU())
        self.gate = LanguageGate(vis_dim, gate_init_zero)

    def forward(
        self, vision: torch.Tensor, language: torch.Tensor, mask: torch.Tensor
    ) -> CrossModalAttentionOutput:
        """
        Parameters
        ----------
        vision : Tensor (B, C_i, H_i, W_i)
        language : Tensor (B, N, C_t)
        mask : BoolTensor (B, N)

        Returns
        -------
        output : :class:`~crossmodal_seg.models.CrossModalAttentionOutput`
            ``refined`` is V_i' with the shape of the projected V_i

        """
        _check_finite("Visual features", vision)
        _check_finite("Language features", language)
        batch, channels, height, width = vision.shape
        projected = self.vision_proj(vision)
        tokens = projected.flatten(2).transpose(1, 2)
        message, similarity = self.attn(tokens, language, key_mask=mask)
        guided = (message * tokens).transpose(1, 2).reshape(batch, channels, height, width)
        guided = self.guided_proj(guided)
        refined = self.gate(guided.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return CrossModalAttentionOutput(similarity, guided, refined)


class VGLVA(nn.Module):

    """Vision-guided language alignment"""

    def __init__(
        self, vis_dim: int, text_dim: int, num_heads: int, gate_init_zero: bool = True
    ):
        super(VGLVA, self).__init__()
        self.text_proj = nn.Sequential(nn.Linear(text_dim, text_dim), nn.GELU())
        self.attn = MultiHeadAttention(text_dim, num_heads, key_dim=vis_dim, out_proj=False)
        self.guided_proj = nn.Sequential(nn.Linear(text_dim, text_dim), nn.GELU())
        self.gate = LanguageGate(text_dim, gate_init_zero)

    def forward(
        self, language: torch.Tensor, mask: torch.Tensor, vision: torch.Tensor
    ) -> CrossModalAttentionOutput:
        """
        Parameters
        ----------
        language : Tensor (B, N, C_t)
        mask : BoolTensor (B, N)
            Rows of L_i' at padded positions are zero
        vision : Tensor (B, C_i, H_i, W_i)

        """
        _check_finite("Visual features", vision)
        _check_finite("Language features", language)
        projected = self.text_proj(language)
        tokens = vision.flatten(2).transpose(1, 2)
        message, similarity = self.attn(projected, tokens)
        guided = self.guided_proj(message * projected)
        refined = self.gate(guided) * mask[..., None].to(guided.dtype)
        return CrossModalAttentionOutput(similarity, guided, refined)


class SMGAMStage(nn.Module):

    """The two submodules of one stage; a disabled submodule contributes zeros"""

    def __init__(
        self,
        vis_dim: int,
        text_dim: int,
        num_heads: int,
        use_lgvla: bool = True,
        use_vglva: bool = True,
        gate_init_zero: bool = True,
    ):
        super(SMGAMStage, self).__init__()
        self.lgvla = (
            LGVLA(vis_dim, text_dim, num_heads, gate_init_zero) if use_lgvla else None
        )
        self.vglva = (
            VGLVA(vis_dim, text_dim, num_heads, gate_init_zero) if use_vglva else None
        )

    def forward(self, vision, language, mask):
        lgvla_out = vglva_out = None
        if self.lgvla is not None:
            lgvla_out = self.lgvla(vision, language, mask)
            vision_refined = lgvla_out.refined
        else:
            vision_refined = torch.zeros_like(vision)
        if self.vglva is not None:
            vglva_out = self.vglva(language, mask, vision)
            language_refined = vglva_out.refined
        else:
            language_refined = torch.zeros_like(language)
        return vision_refined, language_refined, lgvla_out, vglva_out


def stage_transition_vision(
    backbone: VisionBackbone, index: int, vision: torch.Tensor, refined: torch.Tensor
) -> torch.Tensor:
    """
    V_{i+1} = Stage_{i+1}(V_i' + V_i)

    For the last stage the enhanced map itself is returned.

    """
    if vision.shape != refined.shape:
        raise InputError(
            "Stage %d: V_i %s and V_i' %s differ in shape"
            % (index, list(vision.shape), list(refined.shape))
        )
    enhanced = vision + refined
    if index == NUM_STAGES:
        return enhanced
    return backbone.stage(index + 1, enhanced)


def stage_transition_language(language: torch.Tensor, refined: torch.Tensor) -> torch.Tensor:
    """L_{i+1} = L_i + L_i'"""
    if language.shape != refined.shape:
        raise InputError(
            "L_i %s and L_i' %s differ in shape"
            % (list(language.shape), list(refined.shape))
        )
    return language + refined


class AlignmentResult(NamedTuple):

    """Output of a full four-stage alignment pass"""

    pyramid: List[torch.Tensor]
    language: torch.Tensor
    lgvla: List[Optional[CrossModalAttentionOutput]]
    vglva: List[Optional[CrossModalAttentionOutput]]


class SMGAM(nn.Module):

    """Stage-wise alignment interleaved with the vision backbone"""

    def __init__(self, cfg: RunConfig):
        super(SMGAM, self).__init__()
        enc = cfg.encoder
        heads = cfg.smgam.num_heads or enc.num_heads
        self.project_residual = cfg.smgam.project_residual
        if self.project_residual and not cfg.use_smgam_lgvla:
            LOG.warning("smgam.project_residual has no effect without LGVLA")
        for i in range(1, NUM_STAGES + 1):
            self.add_module(
                "stage%d" % i,
                SMGAMStage(
                    enc.stage_channels[i - 1],
                    enc.text_dim,
                    heads,
                    cfg.use_smgam_lgvla,
                    cfg.use_smgam_vglva,
                    cfg.smgam.gate_init_zero,
                ),
            )

    def get_stage(self, index: int) -> SMGAMStage:
        return getattr(self, "stage%d" % index)

    def forward(
        self,
        backbone: VisionBackbone,
        image: torch.Tensor,
        language: torch.Tensor,
        mask: torch.Tensor,
    ) -> AlignmentResult:
        vision = backbone.stem(image)
        pyramid, lgvla_outs, vglva_outs = [], [], []
        for i in range(1, NUM_STAGES + 1):
            stage = self.get_stage(i)
            v_refined, l_refined, lgvla_out, vglva_out = stage(vision, language, mask)
            residual = vision
            if self.project_residual and stage.lgvla is not None:
                residual = stage.lgvla.vision_proj(vision)
            pyramid.append(residual + v_refined)
            language = stage_transition_language(language, l_refined)
            if i < NUM_STAGES:
                vision = stage_transition_vision(backbone, i, residual, v_refined)
            lgvla_outs.append(lgvla_out)
            vglva_outs.append(vglva_out)
        return AlignmentResult(pyramid, language, lgvla_outs, vglva_outs)

