"""Semantic embedders: map the 2L+1 subword sequences of a window to vectors.

Every embedder takes the whole window at once, so an implementation backed by
a contextual language model sees the concatenated text, and returns one
``(n_i, dim)`` array per sentence. Empty sentences (padding) come back as a
single designated pad vector.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
from typing import Protocol, Sequence

import numpy as np

from msstyle.errors import ContractError, ExternalDependencyError

SCHEMA = "msstyle.semantic/1"
PAD_TOKEN = "<pad>"


class SemanticEmbedder(Protocol):
    dim: int

    def __call__(self, window_texts: Sequence[Sequence[str]]) -> list[np.ndarray]: ...


def _sinusoid(pos: float, dim: int) -> np.ndarray:
    i = np.arange(dim)
    angle = pos / (10000.0 ** (2 * (i // 2) / dim))
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class HashEmbedder:
    """Deterministic stand-in for a pretrained language model.

    A token's vector is the sum of a token channel (a fixed random vector
    seeded by hashing the token string) and a positional channel encoding the
    token's offset from both the start and the end of the concatenated
    window. The positional channel is the only way context reaches a token.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 2:
            raise ContractError("embedding dim must be >= 2")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_channel(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            h = hashlib.blake2b(f"{self.seed}\x00{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(h, "little"))
            vec = rng.normal(0.0, 1.0, self.dim).astype(np.float32)
            self._cache[token] = vec
        return vec

    def positional_channel(self, position: int, total: int) -> np.ndarray:
        half = self.dim // 2
        fwd = _sinusoid(position, half)
        bwd = _sinusoid(total - 1 - position, self.dim - half)
        return (0.5 * np.concatenate([fwd, bwd])).astype(np.float32)

    def pad_vector(self) -> np.ndarray:
        return self.token_channel(PAD_TOKEN)

    def __call__(self, window_texts):
        total = sum(len(s) for s in window_texts)
        out, pos = [], 0
        for sent in window_texts:
            if len(sent) == 0:
                out.append(self.pad_vector()[None, :].copy())
                continue
            rows = []
            for tok in sent:
                rows.append(self.token_channel(tok) + self.positional_channel(pos, total))
                pos += 1
            out.append(np.stack(rows).astype(np.float32))
        return out


def encode_request(window_texts) -> str:
    return json.dumps({"schema": SCHEMA, "sentences": [list(s) for s in window_texts]}, ensure_ascii=False)


def decode_response(line: str, window_texts, dim: int | None = None) -> list[np.ndarray]:
    """Validate a plug-in response against the request it answers."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ExternalDependencyError(f"embedder returned invalid JSON: {e}") from e
    if obj.get("schema") != SCHEMA:
        raise ExternalDependencyError(f"embedder schema mismatch: {obj.get('schema')!r}")
    if "error" in obj:
        raise ExternalDependencyError(f"embedder error: {obj['error']}")
    embs = obj.get("embeddings")
    if not isinstance(embs, list) or len(embs) != len(window_texts):
        raise ExternalDependencyError("embedder returned the wrong number of sentences")
    out = []
    for sent, e in zip(window_texts, embs):
        arr = np.asarray(e, dtype=np.float32)
        want = max(1, len(sent))
        if arr.ndim != 2 or arr.shape[0] != want or (dim is not None and arr.shape[1] != dim):
            raise ExternalDependencyError(f"embedding shape {arr.shape} does not match request")
        if not np.all(np.isfinite(arr)):
            raise ExternalDependencyError("embedder returned non-finite values")
        out.append(arr)
    return out


class SubprocessEmbedder:
    """Talks to an external embedding server over stdin/stdout, one JSON line each way.

    Request: ``{"schema": "msstyle.semantic/1", "sentences": [[tok, ...], ...]}``.
    Response: ``{"schema": ..., "dim": D, "embeddings": [[[float] * D] * n_i, ...]}``
    where an empty sentence gets exactly one row. A response may carry
    ``"error"`` instead of embeddings.
    """

    def __init__(self, command: Sequence[str], dim: int, timeout: float = 60.0):
        self.command = list(command)
        self.dim = dim
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                    text=True, encoding="utf-8",
                )
            except OSError as e:
                raise ExternalDependencyError(f"cannot start embedder {self.command!r}: {e}") from e
        return self._proc

    def __call__(self, window_texts):
        proc = self._ensure()
        try:
            proc.stdin.write(encode_request(window_texts) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except (BrokenPipeError, OSError) as e:
            raise ExternalDependencyError(f"embedder process failed: {e}") from e
        if not line:
            raise ExternalDependencyError(f"embedder exited with status {proc.poll()}")
        return decode_response(line, window_texts, self.dim)

    def close(self):
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=self.timeout)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TransformersEmbedder:
    """Adapter for a BERT-style model from ``transformers``.

    Subwords are looked up directly in the tokenizer vocabulary (for a
    character-level Chinese BERT each subword is one vocabulary entry); the
    whole window is encoded as ``[CLS] s_1 ... s_{2L+1} [SEP]`` and the last
    hidden layer is split back per sentence. Empty sentences get a zero
    vector.
    """

    def __init__(self, model, tokenizer, device: str = "cpu"):
        self.model = model.eval().to(device)
        self.tokenizer = tokenizer
        self.device = device
        self.dim = int(model.config.hidden_size)

    @classmethod
    def from_pretrained(cls, name: str, device: str = "cpu"):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:  # pragma: no cover - optional dependency
            raise ExternalDependencyError("transformers is not installed") from e
        try:
            return cls(AutoModel.from_pretrained(name), AutoTokenizer.from_pretrained(name), device)
        except OSError as e:
            raise ExternalDependencyError(f"cannot load pretrained model {name!r}: {e}") from e

    def __call__(self, window_texts):
        import torch

        tok = self.tokenizer
        flat = [t for s in window_texts for t in s]
        if len(flat) + 2 > tok.model_max_length:
            raise ContractError(f"window of {len(flat)} subwords exceeds the model's input limit")
        ids = tok.convert_tokens_to_ids([tok.cls_token, *flat, tok.sep_token])
        with torch.no_grad():
            hidden = self.model(torch.tensor([ids], device=self.device)).last_hidden_state[0, 1:-1]
        hidden = hidden.cpu().numpy().astype(np.float32)
        out, pos = [], 0
        for s in window_texts:
            if len(s) == 0:
                out.append(np.zeros((1, self.dim), dtype=np.float32))
            else:
                out.append(hidden[pos:pos + len(s)])
                pos += len(s)
        return out
