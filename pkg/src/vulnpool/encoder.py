"""Compact transformer encoder: token/position embedding plus a pre-norm
multi-head self-attention stack.

Stands in for a pretrained code encoder at desk scale; weights load from a
checkpoint or initialize from a seeded normal(0, 0.02). Prompt rows prepended
by the pool receive no positional term, so `embed` indexes positions over
code tokens only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint as ckpt
from . import numcore as nc
from .numcore import Tensor

NEG_INF = float("-inf")


@dataclass
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ffn: int = 64
    max_positions: int = 517
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def _param_shapes(config: EncoderConfig, vocab_size: int) -> dict[str, tuple]:
    d, f = config.d_model, config.d_ffn
    shapes = {
        "embed.tok": (vocab_size, d),
        "embed.pos": (config.max_positions, d),
    }
    for i in range(config.n_layers):
        p = f"enc.{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.wq": (d, d),
                p + "attn.bq": (d,),
                p + "attn.wk": (d, d),
                p + "attn.bk": (d,),
                p + "attn.wv": (d, d),
                p + "attn.bv": (d,),
                p + "attn.wo": (d, d),
                p + "attn.bo": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.w1": (d, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, d),
                p + "ffn.b2": (d,),
            }
        )
    shapes["enc.lnf.g"] = (d,)
    shapes["enc.lnf.b"] = (d,)
    return shapes


class Encoder:
    """Embedding layer + attention stack over adapted embeddings."""

    def __init__(self, config: EncoderConfig, vocab_size: int, params: dict[str, Tensor]):
        self.config = config
        self.vocab_size = vocab_size
        self.params = params

    @classmethod
    def init_random(cls, config: EncoderConfig, vocab_size: int, seed: int = 0) -> "Encoder":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(config, vocab_size).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                data = np.ones(shape)
            elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            params[name] = nc.parameter(data)
        return cls(config, vocab_size, params)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, self.params[name]) for name in _param_shapes(self.config, self.vocab_size)]

    # ------------------------------------------------------------------
    # forward

    def embed(self, ids) -> Tensor:
        """Token embedding plus learned absolute positions over code tokens."""
        ids = list(ids)
        if any(i < 0 or i >= self.vocab_size for i in ids):
            bad = [i for i in ids if i < 0 or i >= self.vocab_size]
            raise IndexError(f"token id(s) out of range for vocab {self.vocab_size}: {bad}")
        if len(ids) > self.config.max_positions:
            raise ValueError(
                f"sequence length {len(ids)} exceeds max_positions {self.config.max_positions}"
            )
        tok_rows = nc.gather_rows(self.params["embed.tok"], ids)
        pos_rows = nc.gather_rows(self.params["embed.pos"], list(range(len(ids))))
        return nc.add(tok_rows, pos_rows)

    def _attention(self, x: Tensor, mask_bias: np.ndarray | None, layer: int) -> Tensor:
        cfg = self.config
        p = f"enc.{layer}.attn."
        q = nc.add(nc.matmul(x, self.params[p + "wq"]), self.params[p + "bq"])
        k = nc.add(nc.matmul(x, self.params[p + "wk"]), self.params[p + "bk"])
        v = nc.add(nc.matmul(x, self.params[p + "wv"]), self.params[p + "bv"])
        dh = cfg.d_model // cfg.n_heads
        inv_sqrt = 1.0 / math.sqrt(dh)
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = nc.slice_cols(q, lo, hi)
            kh = nc.slice_cols(k, lo, hi)
            vh = nc.slice_cols(v, lo, hi)
            scores = nc.scale(nc.matmul(qh, nc.transpose(kh)), inv_sqrt)
            if mask_bias is not None:
                scores = nc.add(scores, Tensor(mask_bias))
            attn = nc.softmax_rows(scores)
            heads.append(nc.matmul(attn, vh))
        merged = heads[0] if len(heads) == 1 else nc.concat_cols(heads)
        return nc.add(nc.matmul(merged, self.params[p + "wo"]), self.params[p + "bo"])

    def encode(self, x: Tensor, mask=None, train_mode: bool = False, rng=None) -> Tensor:
        """Run the pre-norm encoder stack; masked positions receive zero
        attention weight from every query. Output shape equals input shape."""
        rows = x.shape[0]
        if rows > self.config.max_positions:
            raise ValueError(
                f"input rows {rows} exceed max_positions {self.config.max_positions}"
            )
        mask_bias = None
        if mask is not None:
            mask = list(mask)
            if len(mask) != rows:
                raise ValueError(f"mask length {len(mask)} does not match input rows {rows}")
            if not all(mask):
                bias_row = np.where(np.asarray(mask, dtype=bool), 0.0, NEG_INF)
                mask_bias = np.broadcast_to(bias_row, (rows, rows)).copy()

        drop = self.config.dropout_rate if train_mode else 0.0
        for layer in range(self.config.n_layers):
            p = f"enc.{layer}."
            normed = nc.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            attn_out = self._attention(normed, mask_bias, layer)
            if drop > 0.0:
                attn_out = nc.dropout(attn_out, drop, rng)
            x = nc.add(x, attn_out)
            normed = nc.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            hidden = nc.gelu(
                nc.add(nc.matmul(normed, self.params[p + "ffn.w1"]), self.params[p + "ffn.b1"])
            )
            ffn_out = nc.add(nc.matmul(hidden, self.params[p + "ffn.w2"]), self.params[p + "ffn.b2"])
            if drop > 0.0:
                ffn_out = nc.dropout(ffn_out, drop, rng)
            x = nc.add(x, ffn_out)
        return nc.layer_norm(x, self.params["enc.lnf.g"], self.params["enc.lnf.b"])

    # ------------------------------------------------------------------
    # persistence

    def save(self, path):
        meta = {"kind": "encoder", "config": asdict(self.config), "vocab_size": self.vocab_size}
        ckpt.save_arrays(path, {n: t.data for n, t in self.parameters()}, meta)

    @classmethod
    def load(cls, path) -> "Encoder":
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("kind") != "encoder":
            raise ckpt.CheckpointError(f"{path}: not an encoder checkpoint: {meta.get('kind')!r}")
        config = EncoderConfig(**meta["config"])
        vocab_size = int(meta["vocab_size"])
        ckpt.check_shapes(arrays, _param_shapes(config, vocab_size), where=str(path))
        params = {name: nc.parameter(arr) for name, arr in arrays.items()}
        return cls(config, vocab_size, params)
