"""Sequence-to-sequence backbone with K expert pattern heads.

A deliberately small encoder-decoder (single-head scaled dot-product
attention, learned positional embeddings, tanh feed-forward) shared by all
experts; each expert is one output-projection head over the shared decoder
states.  Everything runs in float64 on CPU so finite-difference gradient
checks are meaningful and runs are exactly reproducible.

The sparse routing step is the numpy closed form from
:mod:`spmoe.projection`, wrapped in an autograd function whose backward pass
applies the fixed-support projection Jacobian.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from spmoe.corpus import BOS_ID, EOS_ID, PAD_ID, TokenSequence, Vocabulary
from spmoe.metrics import GenerationSet
from spmoe.projection import project_rows_scaled

DTYPE = torch.float64

# Initial spread of the routing logits: small enough that routing starts near
# uniform with full support (the projection's gradient is alive everywhere).
ROUTING_INIT_SCALE = 0.1


class SparsegenFunction(torch.autograd.Function):
    """Row-wise sparsegen-lin with the analytic fixed-support Jacobian."""

    @staticmethod
    def forward(ctx, z: torch.Tensor, lam: float) -> torch.Tensor:
        u = z.detach().cpu().numpy() / (1.0 - lam)
        probs, mask, _ = project_rows_scaled(u)
        probs_t = torch.from_numpy(probs).to(z.dtype)
        ctx.save_for_backward(torch.from_numpy(mask))
        ctx.lam = lam
        return probs_t

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (mask,) = ctx.saved_tensors
        s = mask.to(grad_out.dtype)
        size = s.sum(dim=-1, keepdim=True)
        g = s * grad_out
        grad_z = (g - s * (g.sum(dim=-1, keepdim=True) / size)) / (1.0 - ctx.lam)
        return grad_z, None


def sparse_route(z: torch.Tensor, lam: float) -> torch.Tensor:
    """Project logit rows (B, K) onto the simplex, differentiably."""
    return SparsegenFunction.apply(z, lam)


class Attention(nn.Module):
    """Single-head scaled dot-product attention."""

    def __init__(self, d_model: int):
        super().__init__()
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, query, memory, causal: bool = False):
        q = self.wq(query)
        k = self.wk(memory)
        v = self.wv(memory)
        scores = q @ k.transpose(-2, -1) * self.scale
        if causal:
            t_q, t_k = scores.shape[-2], scores.shape[-1]
            mask = torch.triu(torch.ones(t_q, t_k, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        return self.wo(torch.softmax(scores, dim=-1) @ v)


class FeedForward(nn.Module):
    # tanh keeps the loss C^1 everywhere, which the gradient contracts rely on
    def __init__(self, d_model: int):
        super().__init__()
        self.w1 = nn.Linear(d_model, 2 * d_model)
        self.w2 = nn.Linear(2 * d_model, d_model)

    def forward(self, x):
        return self.w2(torch.tanh(self.w1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model)
        self.ff = FeedForward(d_model)

    def forward(self, x):
        x = x + self.attn(self.ln1(x), self.ln1(x))
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model)
        self.cross_attn = Attention(d_model)
        self.ff = FeedForward(d_model)

    def forward(self, y, memory):
        y = y + self.self_attn(self.ln1(y), self.ln1(y), causal=True)
        y = y + self.cross_attn(self.ln2(y), memory)
        return y + self.ff(self.ln3(y))


class Seq2SeqBackbone(nn.Module):
    """Shared encoder-decoder producing the states all pattern heads read.

    Pre-norm residual blocks with a final layer norm: the states handed to the
    heads and the pooler stay bounded, which keeps the routing logits from
    drifting as the backbone trains.
    """

    def __init__(self, vocab_size: int, d_model: int, l_input: int, l_output: int,
                 n_layers: int):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_enc = nn.Parameter(torch.zeros(l_input, d_model))
        self.pos_dec = nn.Parameter(torch.zeros(l_output, d_model))
        self.enc_layers = nn.ModuleList(EncoderLayer(d_model) for _ in range(n_layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(d_model) for _ in range(n_layers))
        self.enc_norm = nn.LayerNorm(d_model)
        self.dec_norm = nn.LayerNorm(d_model)

    def encode(self, src_ids: torch.Tensor) -> torch.Tensor:
        x = self.tok_emb(src_ids) + self.pos_enc[: src_ids.shape[1]]
        for layer in self.enc_layers:
            x = layer(x)
        return self.enc_norm(x)

    def decode(self, tgt_in_ids: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        y = self.tok_emb(tgt_in_ids) + self.pos_dec[: tgt_in_ids.shape[1]]
        for layer in self.dec_layers:
            y = layer(y, memory)
        return self.dec_norm(y)


class PatternPooler(nn.Module):
    """Pools encoder/decoder states into K pattern logits.

    z = [E_enc . w_enc ; E_dec . w_dec] . w + b with position-weight vectors
    over the fixed padded lengths; pad positions contribute like any other.
    """

    def __init__(self, d_model: int, n_experts: int, l_input: int, l_output: int):
        super().__init__()
        self.w_enc = nn.Parameter(torch.zeros(l_input))
        self.w_dec = nn.Parameter(torch.zeros(l_output))
        self.w = nn.Parameter(torch.zeros(2 * d_model, n_experts))
        self.b = nn.Parameter(torch.zeros(n_experts))

    def forward(self, enc_states: torch.Tensor, dec_states: torch.Tensor) -> torch.Tensor:
        if enc_states.shape[-2] != self.w_enc.shape[0]:
            raise ValueError(
                f"encoder states have {enc_states.shape[-2]} positions, "
                f"pooler expects {self.w_enc.shape[0]}"
            )
        if dec_states.shape[-2] != self.w_dec.shape[0]:
            raise ValueError(
                f"decoder states have {dec_states.shape[-2]} positions, "
                f"pooler expects {self.w_dec.shape[0]}"
            )
        pooled_enc = torch.einsum("bld,l->bd", enc_states, self.w_enc)
        pooled_dec = torch.einsum("bld,l->bd", dec_states, self.w_dec)
        return torch.cat([pooled_enc, pooled_dec], dim=-1) @ self.w + self.b


class ExpertBundle(nn.Module):
    """Shared backbone plus K pattern heads, the pooler, and hyperparameters."""

    def __init__(
        self,
        vocab: Vocabulary,
        n_experts: int = 3,
        d_model: int = 64,
        n_layers: int = 1,
        l_input: int = 12,
        l_output: int = 16,
        lam: float = 0.5,
        gamma: float = 1.0,
        learning_rate: float = 0.05,
        seed: int = 0,
    ):
        super().__init__()
        if n_experts < 2:
            raise ValueError("need at least 2 experts")
        if not lam < 1.0:
            raise ValueError(f"lambda must be < 1, got {lam}")
        if gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        self.vocab = vocab
        self.n_experts = n_experts
        self.d_model = d_model
        self.n_layers = n_layers
        self.l_input = l_input
        self.l_output = l_output
        self.lam = float(lam)
        self.gamma = float(gamma)
        self.learning_rate = float(learning_rate)
        self.seed = int(seed)
        self.step = 0

        self.backbone = Seq2SeqBackbone(len(vocab), d_model, l_input, l_output, n_layers)
        self.heads = nn.Parameter(torch.zeros(n_experts, d_model, len(vocab)))
        self.pooler = PatternPooler(d_model, n_experts, l_input, l_output)
        self.to(DTYPE)
        self._init_parameters(seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        d = self.d_model

        def fill(param: torch.Tensor, std: float) -> None:
            param.copy_(torch.randn(param.shape, generator=gen, dtype=DTYPE) * std)

        with torch.no_grad():
            for name, param in sorted(self.named_parameters()):
                if ".ln" in name or "norm" in name:
                    param.fill_(1.0) if name.endswith("weight") else param.zero_()
                elif name.endswith(".bias") or name == "pooler.b":
                    param.zero_()
                elif name == "heads":
                    # equal heads: no expert starts ahead, so the routing
                    # features (not head luck) break the symmetry
                    param.zero_()
                elif name in ("pooler.w_enc", "pooler.w_dec"):
                    fill(param, 1.0 / math.sqrt(param.shape[0]))
                elif name == "pooler.w":
                    fill(param, ROUTING_INIT_SCALE / math.sqrt(2 * d))
                elif "tok_emb" in name or "pos_" in name:
                    fill(param, 1.0 / math.sqrt(d))
                else:
                    fill(param, 1.0 / math.sqrt(param.shape[1]))

    def head_logits(self, dec_states: torch.Tensor) -> torch.Tensor:
        """Apply every pattern head: (B, L, d) -> (B, K, L, V)."""
        return torch.einsum("bld,kdv->bklv", dec_states, self.heads)

    def clone(self) -> "ExpertBundle":
        other = ExpertBundle(
            vocab=self.vocab,
            n_experts=self.n_experts,
            d_model=self.d_model,
            n_layers=self.n_layers,
            l_input=self.l_input,
            l_output=self.l_output,
            lam=self.lam,
            gamma=self.gamma,
            learning_rate=self.learning_rate,
            seed=self.seed,
        )
        other.load_state_dict(self.state_dict())
        other.step = self.step
        return other


def encode_source_ids(bundle: ExpertBundle, x: TokenSequence) -> list[int]:
    """Source ids + eos, right-padded to the fixed encoder length."""
    ids = list(x.tokens)
    if any(not 0 <= i < len(bundle.vocab) for i in ids):
        raise ValueError("token id out of vocabulary range")
    if len(ids) + 1 > bundle.l_input:
        raise ValueError(
            f"source length {len(ids)} exceeds encoder capacity {bundle.l_input - 1}"
        )
    ids = ids + [EOS_ID]
    return ids + [PAD_ID] * (bundle.l_input - len(ids))


@torch.no_grad()
def generate_all_patterns(
    bundle: ExpertBundle, x: TokenSequence, max_len: int | None = None
) -> GenerationSet:
    """Greedy-decode one output per pattern head for source ``x``.

    Each head k decodes its own sequence from the shared backbone; duplicates
    across heads are allowed.  Decoding stops at eos or after ``max_len``
    tokens (capped by the decoder's positional range), in which case the
    output is flagged as truncated.
    """
    bundle.eval()
    cap = bundle.l_output - 1
    if max_len is not None:
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        cap = min(cap, max_len)
    src = torch.tensor([encode_source_ids(bundle, x)], dtype=torch.long)
    memory = bundle.backbone.encode(src)
    outputs: list[str] = []
    truncated: list[bool] = []
    for k in range(bundle.n_experts):
        ids: list[int] = [BOS_ID]
        hit_eos = False
        for _ in range(cap):
            dec_in = torch.tensor([ids], dtype=torch.long)
            states = bundle.backbone.decode(dec_in, memory)
            logits = states[0, -1] @ bundle.heads[k]
            nxt = int(torch.argmax(logits).item())
            if nxt == EOS_ID:
                hit_eos = True
                break
            ids.append(nxt)
        generated = ids[1:]
        outputs.append(bundle.vocab.decode(generated))
        truncated.append(not hit_eos)
    return GenerationSet(source=x.text, outputs=tuple(outputs), truncated=tuple(truncated))
