""" Checkpoint storage backend implementations """
from functools import partial
from typing import Any, Callable

from pyramid.path import DottedNameResolver

from .base import ICheckpointStorage
from .files import FileStorage
from .s3 import S3Storage


def get_storage_impl(settings) -> Callable[[], Any]:
    """Get and configure the storage backend factory"""
    resolver = DottedNameResolver(__name__)
    storage = settings.get("storage.backend", "file")
    if storage == "s3":
        storage = "crossmodal_seg.storage.S3Storage"
    elif storage == "file":
        storage = "crossmodal_seg.storage.FileStorage"
    storage_impl = resolver.resolve(storage)
    kwargs = storage_impl.configure(settings)
    return partial(storage_impl, **kwargs)
