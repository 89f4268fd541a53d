"""
(©) EDQ Lab

Shared helpers: named random streams, content hashing and readable formatting.
"""

import hashlib
import json
import logging

import numpy as np

# Set up a logger for this module
logger = logging.getLogger(__name__)

def format_bytes(size_bytes: int) -> str:
    """2048 -> '2.0 KB'. Binary multiples, two decimals at most, capped at TB."""
    if size_bytes <= 0:
        return "0 B"
    units = ("B", "KB", "MB", "GB", "TB")
    exponent = min((int(size_bytes).bit_length() - 1) // 10, len(units) - 1)
    if exponent == 0:
        return f"{size_bytes} B"
    return f"{round(size_bytes / 1024 ** exponent, 2)} {units[exponent]}"

def get_readable_time(seconds: float) -> str:
    """'1.50s' under a minute, otherwise '[Nd:][Nh:]Nm:Ns' with whole seconds."""
    if seconds < 60:
        return f"{seconds:.2f}s"
    days, rest = divmod(int(seconds), 86400)
    hours, rest = divmod(rest, 3600)
    minutes, secs = divmod(rest, 60)
    prefix = f"{days}d:{hours}h:" if days else (f"{hours}h:" if hours else "")
    return f"{prefix}{minutes}m:{secs}s"

# ======================================================================================
#                                 *** Hashing ***
# ======================================================================================

def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, no whitespace, floats in repr form."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)

def content_hash(obj) -> str:
    """SHA-256 hex digest of raw bytes, text, or any JSON-serializable object."""
    if isinstance(obj, bytes):
        data = obj
    elif isinstance(obj, str):
        data = obj.encode("utf-8")
    else:
        data = canonical_json(obj).encode("utf-8")
    return hashlib.sha256(data).hexdigest()

def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

# ======================================================================================
#                               *** Random Streams ***
# ======================================================================================

def _name_key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    # Python's str hash is salted per process; a digest keeps streams stable across runs
    return int.from_bytes(hashlib.sha256(str(name).encode("utf-8")).digest()[:8], "little")

def stream(seed: int, *names) -> np.random.Generator:
    """
    Returns the generator for the named stream `(seed, *names)`.
    The same seed and names always give the same draws; different names give independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(_name_key(n) for n in names)]))
