import hashlib
from typing import Any, Dict

import numpy as np


class Rng:
    """Seeded, splittable random source.

    Children are derived from the root seed and a name, so the stream a
    component sees does not depend on how many draws other components made.
    """

    def __init__(self, seed: int, path: str = "root"):
        self.seed = int(seed)
        self.path = path
        digest = hashlib.sha256(f"{self.seed}/{path}".encode()).digest()
        entropy = int.from_bytes(digest[:16], "little")
        self.generator = np.random.Generator(np.random.PCG64(entropy))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.path}/{name}")

    def state(self) -> Dict[str, Any]:
        return {"seed": self.seed, "path": self.path, "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], state["path"])
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def normal(self, *args, **kwargs):
        return self.generator.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def permutation(self, *args, **kwargs):
        return self.generator.permutation(*args, **kwargs)

    def random(self, *args, **kwargs):
        return self.generator.random(*args, **kwargs)
