""" Store checkpoints as files on disk """
import os
import shutil
from contextlib import closing

from crossmodal_seg.exceptions import CheckpointError
from crossmodal_seg.util import atomic_write

from .base import ICheckpointStorage


class FileStorage(ICheckpointStorage):

    """Stores each checkpoint as a directory of files"""

    def __init__(self, **kwargs):
        self.directory = kwargs.pop("directory")
        super(FileStorage, self).__init__(**kwargs)

    @classmethod
    def configure(cls, settings):
        kwargs = super(FileStorage, cls).configure(settings)
        directory = settings.get("storage.dir")
        if not directory:
            raise ValueError("You must specify the 'storage.dir'")
        directory = os.path.abspath(directory).rstrip("/")
        if not os.path.exists(directory):
            os.makedirs(directory)
        kwargs["directory"] = directory
        return kwargs

    def get_path(self, name, filename=None):
        """Get the fully-qualified path of a checkpoint directory or file"""
        if not name or "/" in name or name.startswith("."):
            raise CheckpointError("Invalid checkpoint name %r" % name)
        path = os.path.join(self.directory, name)
        if filename is not None:
            path = os.path.join(path, filename)
        return path

    def list(self):
        for name in sorted(os.listdir(self.directory)):
            if os.path.exists(os.path.join(self.directory, name, "manifest.json")):
                yield name

    def save(self, name, files):
        # The manifest goes last so a checkpoint without one is incomplete
        ordered = sorted(files, key=lambda f: (f == "manifest.json", f))
        try:
            for filename in ordered:
                atomic_write(self.get_path(name, filename), files[filename])
        except OSError as e:
            raise CheckpointError(
                "Could not write checkpoint %s: %s" % (self.get_path(name), e)
            )

    def open(self, name, filename):
        path = self.get_path(name, filename)
        try:
            return closing(open(path, "rb"))
        except OSError as e:
            raise CheckpointError("Could not open %s: %s" % (path, e))

    def exists(self, name, filename="manifest.json"):
        return os.path.exists(self.get_path(name, filename))

    def delete(self, name):
        path = self.get_path(name)
        if os.path.isdir(path):
            shutil.rmtree(path)

    def describe(self, name):
        return self.get_path(name)
