"""Text embedding providers: a deterministic offline mock and a remote client.

The mock folds a seeded hash of each whitespace token into a pseudo-random
vector and returns the normalized token sum, so texts sharing tokens are
close, distinct seeds give unrelated spaces, and everything is reproducible
without a network. Both providers return unit-norm float64 vectors.
"""

from __future__ import annotations

import hashlib

import httpx
import numpy as np

from memcycle.endpoints import EndpointError, RetryPolicy, post_json

DEFAULT_DIM = 768


class MockEmbeddings:
    """Deterministic embedding provider for offline runs and tests."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim <= 0:
            raise ValueError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        cached = self._token_cache.get(token)
        if cached is not None:
            return cached
        digest = hashlib.blake2b(
            f"{self.seed}\x1f{token}".encode("utf-8"), digest_size=8
        ).digest()
        gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))
        vec = gen.standard_normal(self.dim)
        self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot embed empty or whitespace-only text")
        total = np.zeros(self.dim)
        for token in tokens:
            total += self._token_vector(token)
        norm = float(np.linalg.norm(total))
        if norm == 0.0:  # token vectors are continuous draws; this never fires in practice
            total[0] = 1.0
            norm = 1.0
        return total / norm


class RemoteEmbeddings:
    """Embedding client speaking an embeddings endpoint over HTTP.

    Vectors are normalized on receipt so the unit-norm invariant holds
    regardless of what the server returns.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        dim: int = DEFAULT_DIM,
        *,
        auth_env: str = "MEMCYCLE_API_TOKEN",
        policy: RetryPolicy | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        import os

        self.dim = dim
        self.model = model
        self.policy = policy or RetryPolicy()
        headers = {}
        token = os.environ.get(auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=base_url,
            headers=headers,
            timeout=self.policy.timeout,
            transport=transport,
        )

    def embed(self, text: str) -> np.ndarray:
        if not text.split():
            raise ValueError("cannot embed empty or whitespace-only text")
        data = post_json(
            self._client, "/embeddings", {"model": self.model, "input": [text]}, self.policy
        )
        try:
            raw = data["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError):
            raise EndpointError("malformed embeddings response", retryable=False) from None
        vec = np.asarray(raw, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise EndpointError(
                f"expected embedding dim {self.dim}, got {vec.shape}", retryable=False
            )
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise EndpointError("server returned a zero embedding", retryable=False)
        return vec / norm
