import hashlib
from dataclasses import dataclass

import numpy as np

SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngSeed:
    """Address of one reproducible random stream: a master seed plus a replica index."""

    master_seed: int
    replica_index: int = 0

    def __post_init__(self):
        if self.replica_index < 0:
            raise ValueError("replica_index must be nonnegative")

    def generator(self) -> np.random.Generator:
        """PCG64 stream for this (master_seed, replica_index) pair.

        The replica index enters through the SeedSequence spawn key, so the
        stream does not depend on which thread runs the replica or when.
        """
        sequence = np.random.SeedSequence(
            entropy=self.master_seed & SEED_MASK,
            spawn_key=(self.replica_index,)
        )
        return np.random.Generator(np.random.PCG64(sequence))

    def replica(self, index: int) -> 'RngSeed':
        return RngSeed(self.master_seed, index)


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Derive a 64-bit stage seed from (master_seed, stage name, index).

    sha256 over the text "master_seed:stage:index", first 8 bytes read
    little-endian. Recorded in every run manifest.
    """
    key = f"{master_seed & SEED_MASK}:{stage}:{index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], 'little')
