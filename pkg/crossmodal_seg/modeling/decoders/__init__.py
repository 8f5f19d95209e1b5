""" Segmentation decoder implementations """
from pyramid.path import DottedNameResolver

from crossmodal_seg.config import RunConfig

from .base import IDecoder
from .standard import OrientedDecoder, StandardDecoder
from .tcmd import TCMDecoder, TransformerDecoderLayer


def get_decoder_impl(variant: str):
    """Get the decoder class for a variant name or dotted path"""
    resolver = DottedNameResolver(__name__)
    if variant == "tcmd":
        variant = "crossmodal_seg.modeling.decoders.TCMDecoder"
    elif variant == "standard":
        variant = "crossmodal_seg.modeling.decoders.StandardDecoder"
    elif variant == "oad":
        variant = "crossmodal_seg.modeling.decoders.OrientedDecoder"
    return resolver.maybe_resolve(variant)


def build_decoder(cfg: RunConfig) -> IDecoder:
    """Construct the decoder selected by ``cfg.decoder_variant``"""
    impl = get_decoder_impl(cfg.decoder_variant)
    return impl(**impl.configure(cfg))
