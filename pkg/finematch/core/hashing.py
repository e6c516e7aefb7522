"""
Utilities for hashing and comparing hashes of serialized payloads.
"""

from collections.abc import Callable

import xxhash


class UnsupportedHashAlgorithm(Exception):
    pass


def match_name_to_algorithm(name: str) -> Callable[[bytes], "xxhash.xxh3_64"]:
    match name:
        case "xxh3":
            return xxhash.xxh3_64
        case _:
            raise UnsupportedHashAlgorithm(f"Algorithm {name} not supported")


def checksum(content: str | bytes, hash_algorithm: str = "xxh3") -> str:
    """
    Calculate a fresh hash (named checksum to avoid colliding with the
    builtin hash) of some content.
    """
    if isinstance(content, str):
        content = content.encode("utf-8")

    algorithm = match_name_to_algorithm(hash_algorithm)

    return algorithm(content).hexdigest()


def compare(content: str | bytes, compare_to: str, hash_algorithm: str = "xxh3") -> bool:
    """
    Compare some content (hashed with hash_algorithm) to a pre-existing checksum
    (`compare_to`).
    """
    return compare_to == checksum(content=content, hash_algorithm=hash_algorithm)
