import numpy as np

# spawn-key slot reserved for bootstrap resampling streams
BOOTSTRAP_KEY = 2**32 - 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """
    Counter-based generator for the stream identified by (seed, *key).

    Streams for distinct keys are independent and do not depend on the
    order in which they are created, so per-state and per-replicate
    sampling can run in any order or in parallel.
    """
    sequence = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(int(k) for k in key)
    )
    return np.random.Generator(np.random.Philox(sequence))


def replicate_streams(
    seed: int, state_index: int, replicates: int
) -> list[np.random.Generator]:
    return [stream(seed, state_index, r) for r in range(replicates)]
