""" Decoders used as baselines in the decoder comparison """
from .base import IDecoder


class StandardDecoder(IDecoder):

    """Plain top-down seg blocks; no rotated convolutions, no text conditioning"""

    rotated = False


class OrientedDecoder(IDecoder):

    """
    Seg blocks with adaptive rotated convolutions but no text conditioning

    A simplified stand-in for an oriented-aware decoder.

    """

    rotated = True
