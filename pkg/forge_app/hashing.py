"""Content and seed hashing shared by ingest, routing and the mock backends."""
import hashlib
import json


def sha256_hex(data):
    if isinstance(data, str):
        data = data.encode('utf-8')
    return hashlib.sha256(data).hexdigest()


def content_hash(*parts):
    """SHA-256 over the trimmed text parts, order-sensitive"""
    canonical = json.dumps([part.strip() for part in parts], ensure_ascii=False)
    return sha256_hex(canonical)


def seeded_fraction(seed, key):
    """
    Map (seed, key) onto [0, 1) with the first 8 bytes of a SHA-256 digest.

    Identical on every platform and Python build, unlike hash().
    """
    digest = hashlib.sha256(f"{seed}:{key}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') / 2 ** 64
