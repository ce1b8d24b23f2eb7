"""KV cache memory footprint."""

from .config import ModelShape

__all__ = ["estimate_kvcache_bytes", "LLAMA32_1B", "LLAMA32_3B"]

# public Llama 3.2 attention shapes (GQA, 8 KV heads)
LLAMA32_1B = ModelShape(layers=16, kv_heads=8, head_dim=64, bytes_per_element=2)
LLAMA32_3B = ModelShape(layers=28, kv_heads=8, head_dim=128, bytes_per_element=2)


def estimate_kvcache_bytes(shape, seq_len):
    """Bytes held by keys and values of every layer and KV head for ``seq_len`` tokens."""
    if seq_len < 0:
        raise ValueError("seq_len must be non-negative")
    return (shape.layers * 2 * shape.kv_heads * shape.head_dim
            * int(seq_len) * shape.bytes_per_element)
