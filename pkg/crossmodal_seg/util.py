""" Utilities """
import hashlib
import json
import logging
import os
from typing import Any, Dict, Iterable, Mapping, Optional

from pyramid.settings import aslist

LOG = logging.getLogger(__name__)
ENV_PREFIX = "CMS_"
CACHE_ENV = "CROSSMODAL_SEG_CACHE"


def environ_key(key: str) -> str:
    """Name of the environment variable that overrides a dotted setting"""
    return ENV_PREFIX + key.upper().replace(".", "_")


def get_environ_settings(keys: Iterable[str]) -> Dict[str, str]:
    """
    The dotted settings among ``keys`` that have a CMS_* environment variable

    Values are the raw strings.

    """
    environ = {}
    for key in keys:
        value = os.environ.get(environ_key(key))
        if value is not None:
            environ[key] = value
    return environ


def get_settings(settings: Mapping[str, Any], prefix: str, /, **kwargs) -> dict:
    """
    Convenience method for fetching settings

    Returns a dict; any settings that were missing from the config file will
    not be present in the returned dict (as opposed to being present with a
    None value)

    Parameters
    ----------
    settings : dict
        The flat settings dict
    prefix : str
        String to prefix all keys with when fetching value from settings
    **kwargs : dict
        Mapping of setting name to conversion function (e.g. int or asbool)

    """
    computed = {}
    for name, fxn in kwargs.items():
        val = settings.get(prefix + name)
        if val is not None:
            computed[name] = fxn(val)
    return computed


def flatten_settings(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """
    Flatten a nested config mapping into dotted keys

    Lists are kept as values; only mappings are descended into.

    """
    flat = {}
    for key, value in data.items():
        dotted = prefix + key
        if isinstance(value, Mapping):
            flat.update(flatten_settings(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def parse_override(text: str):
    """Parse the value half of a ``key=value`` override as JSON, else string"""
    try:
        return json.loads(text)
    except ValueError:
        return text


def aslist_of(fxn):
    """Build a converter that turns a list or a comma/space string into a typed list"""

    def convert(value):
        if isinstance(value, str):
            value = aslist(value.replace(",", " "))
        return [fxn(v) for v in value]

    return convert


def optional(fxn):
    """Wrap a converter so that None / "none" / "" pass through as None"""

    def convert(value):
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        return fxn(value)

    return convert


def canonical_json(data: Any) -> str:
    """Serialize data deterministically for hashing"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: Any) -> str:
    """Hash the canonical JSON form of some data"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def get_cache_dir(create: bool = True) -> str:
    """Location of the dataset cache (``$CROSSMODAL_SEG_CACHE``)"""
    directory = os.environ.get(CACHE_ENV) or os.path.join(
        os.path.expanduser("~"), ".cache", "crossmodal_seg"
    )
    directory = os.path.abspath(directory)
    if create and not os.path.exists(directory):
        os.makedirs(directory)
    return directory


def atomic_write(path: str, data: bytes, tmp_suffix: Optional[str] = None) -> None:
    """Write bytes to a temp file next to ``path`` and rename into place"""
    destdir = os.path.dirname(path)
    if destdir and not os.path.exists(destdir):
        os.makedirs(destdir)
    uid = tmp_suffix or os.urandom(4).hex()
    tempfile = os.path.join(destdir, "." + os.path.basename(path) + "." + uid)
    with open(tempfile, "wb") as ofile:
        ofile.write(data)
    os.rename(tempfile, path)
