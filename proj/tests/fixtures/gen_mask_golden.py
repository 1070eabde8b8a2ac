#!/usr/bin/env python3
"""Writes hashed-mask golden vectors from a standalone FNV-1a implementation."""
import json
import random
import struct
import sys

OFFSET = 0xCBF29CE484222325
PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a(ids, seed):
    h = OFFSET ^ seed
    for t in ids:
        for b in struct.pack("<i", t):
            h ^= b
            h = (h * PRIME) & MASK64
    return h


def mask(ids, k, h, seed):
    bits = []
    for i in range(len(ids)):
        if i < h:
            bits.append(1)
            continue
        # drop when hash / 2^64 < 1 / k
        bits.append(0 if fnv1a(ids[i - h:i], seed) * k < (1 << 64) else 1)
    return bits


def main(path):
    rng = random.Random(20240601)
    cases = []
    ids = [rng.randrange(258) for _ in range(20)]
    cases.append({"ids": ids, "k": 2, "h": 3, "seed": 1, "expected_bits": mask(ids, 2, 3, 1)})
    for k, h, seed, n in [(4, 13, 0, 200), (3, 13, 0, 200), (4, 13, 12345, 150), (2, 4, 7, 120),
                          (8, 1, 0, 100), (32, 13, 99, 300)]:
        ids = [rng.randrange(258) for _ in range(n)]
        cases.append({"ids": ids, "k": k, "h": h, "seed": seed, "expected_bits": mask(ids, k, h, seed)})
    text = b"The quick brown fox jumps over the lazy dog. " * 4
    ids = [256] + list(text)
    cases.append({"ids": ids, "k": 4, "h": 13, "seed": 0, "expected_bits": mask(ids, 4, 13, 0)})
    hashes = [{"ids": c["ids"][:13], "seed": c["seed"], "hash": str(fnv1a(c["ids"][:13], c["seed"]))}
              for c in cases]
    hashes.append({"ids": [], "seed": 0, "hash": str(fnv1a([], 0))})
    hashes.append({"ids": [0], "seed": 0, "hash": str(fnv1a([0], 0))})
    with open(path, "w") as f:
        json.dump({"cases": cases, "hashes": hashes}, f)
        f.write("\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "mask_golden.json")
