""" Base class for checkpoint storage backends """
from typing import BinaryIO, ContextManager, Dict, Iterable


class ICheckpointStorage(object):

    """
    Base class for a backend that stores named checkpoints

    A checkpoint is a small set of named files (weights, manifest, optimizer
    state) that is written and read as a unit.

    """

    @classmethod
    def configure(cls, settings):
        """Configure the storage method with flat ``storage.*`` settings"""
        return {}

    def list(self) -> Iterable[str]:
        """Return a list or generator of all checkpoint names"""
        raise NotImplementedError

    def save(self, name: str, files: Dict[str, bytes]) -> None:
        """
        Write the files of a checkpoint

        Parameters
        ----------
        name : str
            Checkpoint name, e.g. "best" or "last"
        files : dict
            Mapping of file name to file contents

        """
        raise NotImplementedError

    def open(self, name: str, filename: str) -> ContextManager[BinaryIO]:
        """
        Open one file of a checkpoint for reading

        Returns
        -------
        ctx : context manager
            Yields a binary file-like object

        Raises
        ------
        exc : :class:`~crossmodal_seg.exceptions.CheckpointError`
            If the file does not exist

        """
        raise NotImplementedError

    def read(self, name: str, filename: str) -> bytes:
        with self.open(name, filename) as ifile:
            return ifile.read()

    def exists(self, name: str, filename: str = "manifest.json") -> bool:
        """Check if a checkpoint (or one of its files) exists"""
        raise NotImplementedError

    def delete(self, name: str) -> None:
        """Delete all files of a checkpoint"""
        raise NotImplementedError

    def describe(self, name: str) -> str:
        """Human-readable location of a checkpoint for log messages"""
        return name
