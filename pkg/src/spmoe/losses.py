"""Mixture and load-balance losses over the expert bundle, plus training.

Loss structure for a batch B of (source, target) pairs:

* per-sample pattern logits from the pooler ->  sparse routing p  (B, K)
* per-expert token-summed cross-entropies    CE  (B, K)
* reconstruction loss  -log sum_j p_j exp(-CE_j), averaged over the batch
* load-balance loss    KL(mean_i p^i || uniform) over the batch
* final loss           L_rec + gamma * L_balance

The public scalar operations (``reconstruction_loss`` etc.) are the plain
numpy formulas; training uses the equivalent torch expressions so gradients
flow, including through the sparse projection's fixed-support Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from spmoe.corpus import BOS_ID, EOS_ID, PAD_ID, PatternCorpus, TokenSequence
from spmoe.model import ExpertBundle, PatternPooler, sparse_route

LOG_FLOOR = 1e-300  # clamp inside log() so masked zero-probability terms stay finite


class DivergedTrainingError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


# ---------------------------------------------------------------------------
# public scalar operations (numpy)
# ---------------------------------------------------------------------------


def pattern_logits(enc_states, dec_states, pooler: PatternPooler) -> np.ndarray:
    """Pool one sample's encoder/decoder states into K pattern logits."""
    enc = torch.as_tensor(np.asarray(enc_states, dtype=np.float64))
    dec = torch.as_tensor(np.asarray(dec_states, dtype=np.float64))
    if enc.dim() != 2 or dec.dim() != 2:
        raise ValueError("expected (positions, d_model) state matrices")
    with torch.no_grad():
        z = pooler(enc[None], dec[None])[0]
    return z.numpy().copy()


def reconstruction_loss(p, ce) -> float:
    """-log of the p-weighted mixture of exp(-CE_j), in log space.

    Experts with p_j = 0 are excluded from the mixture; their terms are
    exactly zero, so the value equals the mathematical definition.
    """
    p = np.asarray(p, dtype=np.float64)
    ce = np.asarray(ce, dtype=np.float64)
    if p.shape != ce.shape or p.ndim != 1:
        raise ValueError(f"mismatched shapes {p.shape} vs {ce.shape}")
    if not np.all(np.isfinite(ce)):
        raise ValueError("cross-entropies must be finite")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability distribution")
    support = p > 0
    if not support.any():
        raise RuntimeError("mixture distribution has empty support")
    vals = np.log(p[support]) - ce[support]
    shift = vals.max()
    return float(-(shift + np.log(np.exp(vals - shift).sum())))


def load_balance_loss(batch_probs) -> float:
    """KL divergence of the batch-mean expert distribution from uniform."""
    rows = np.asarray(batch_probs, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("need a non-empty batch of distributions")
    if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("every row must be a probability distribution")
    mean = rows.mean(axis=0)
    nz = mean > 0
    return float(np.sum(mean[nz] * np.log(mean[nz] * rows.shape[1])))


def final_loss(l_rec: float, l_balance: float, gamma: float) -> float:
    """Reconstruction plus gamma-weighted load balance."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return l_rec + gamma * l_balance


# ---------------------------------------------------------------------------
# batched torch path
# ---------------------------------------------------------------------------


@dataclass
class EncodedBatch:
    src: torch.Tensor  # (B, L_in) long: tokens + eos, padded
    dec_in: torch.Tensor  # (B, L_out) long: bos + target tokens, padded
    tgt_out: torch.Tensor  # (B, L_out) long: target tokens + eos, padded
    tgt_mask: torch.Tensor  # (B, L_out) bool: real target positions


def prepare_batch(
    bundle: ExpertBundle, pairs: list[tuple[TokenSequence, TokenSequence]]
) -> EncodedBatch:
    """Pad a batch of (source, target) pairs to the bundle's fixed lengths."""
    if not pairs:
        raise ValueError("batch must be non-empty")
    b = len(pairs)
    src = torch.full((b, bundle.l_input), PAD_ID, dtype=torch.long)
    dec_in = torch.full((b, bundle.l_output), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((b, bundle.l_output), PAD_ID, dtype=torch.long)
    tgt_mask = torch.zeros((b, bundle.l_output), dtype=torch.bool)
    vocab_size = len(bundle.vocab)
    for row, (x, y) in enumerate(pairs):
        for seq in (x, y):
            if any(not 0 <= t < vocab_size for t in seq.tokens):
                raise ValueError(f"token id out of vocabulary in {seq.text!r}")
        if len(x) + 1 > bundle.l_input:
            raise ValueError(
                f"source length {len(x)} exceeds encoder capacity {bundle.l_input - 1}"
            )
        if len(y) + 1 > bundle.l_output:
            raise ValueError(
                f"target length {len(y)} exceeds decoder capacity {bundle.l_output - 1}"
            )
        src[row, : len(x)] = torch.tensor(x.tokens, dtype=torch.long)
        src[row, len(x)] = EOS_ID
        dec_in[row, 0] = BOS_ID
        dec_in[row, 1 : len(y) + 1] = torch.tensor(y.tokens, dtype=torch.long)
        tgt_out[row, : len(y)] = torch.tensor(y.tokens, dtype=torch.long)
        tgt_out[row, len(y)] = EOS_ID
        tgt_mask[row, : len(y) + 1] = True
    return EncodedBatch(src, dec_in, tgt_out, tgt_mask)


def batch_cross_entropies(bundle: ExpertBundle, batch: EncodedBatch) -> torch.Tensor:
    """Token-summed per-expert cross-entropies, differentiable: (B, K)."""
    memory = bundle.backbone.encode(batch.src)
    dec_states = bundle.backbone.decode(batch.dec_in, memory)
    logits = bundle.head_logits(dec_states)  # (B, K, L, V)
    logp = torch.log_softmax(logits, dim=-1)
    idx = batch.tgt_out[:, None, :, None].expand(-1, bundle.n_experts, -1, -1)
    token_lp = logp.gather(-1, idx)[..., 0]  # (B, K, L)
    token_lp = token_lp * batch.tgt_mask[:, None, :]
    return -token_lp.sum(dim=-1)


@dataclass
class BatchLosses:
    l_rec: torch.Tensor
    l_balance: torch.Tensor
    l_final: torch.Tensor
    probs: torch.Tensor  # (B, K) routing distributions
    ce: torch.Tensor  # (B, K) per-expert cross-entropies


def batch_losses(bundle: ExpertBundle, batch: EncodedBatch) -> BatchLosses:
    """Full differentiable loss graph for one batch."""
    memory = bundle.backbone.encode(batch.src)
    dec_states = bundle.backbone.decode(batch.dec_in, memory)

    z = bundle.pooler(memory, dec_states)  # (B, K)
    probs = sparse_route(z, bundle.lam)

    logits = bundle.head_logits(dec_states)
    logp = torch.log_softmax(logits, dim=-1)
    idx = batch.tgt_out[:, None, :, None].expand(-1, bundle.n_experts, -1, -1)
    token_lp = logp.gather(-1, idx)[..., 0] * batch.tgt_mask[:, None, :]
    ce = -token_lp.sum(dim=-1)  # (B, K)

    mix = torch.where(
        probs > 0,
        torch.log(probs.clamp_min(LOG_FLOOR)) - ce,
        torch.full_like(ce, float("-inf")),
    )
    l_rec = (-torch.logsumexp(mix, dim=-1)).mean()

    mean = probs.mean(dim=0)
    l_balance = (mean * torch.log(mean.clamp_min(LOG_FLOOR) * bundle.n_experts)).sum()

    l_final = l_rec + bundle.gamma * l_balance
    return BatchLosses(l_rec, l_balance, l_final, probs, ce)


def expert_cross_entropies(
    bundle: ExpertBundle, x: TokenSequence, y: TokenSequence
) -> np.ndarray:
    """Per-expert cross-entropies CE_k for one (source, target) pair.

    One teacher-forced backbone pass shared by all heads; each CE_k sums the
    negative log-likelihood over the target tokens plus the terminal eos.
    """
    batch = prepare_batch(bundle, [(x, y)])
    with torch.no_grad():
        ce = batch_cross_entropies(bundle, batch)
    return ce[0].numpy().copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainReport:
    step: int
    l_rec: float
    l_balance: float
    l_final: float
    usage: np.ndarray  # fraction of samples routed (argmax) to each expert
    mean_probs: np.ndarray  # batch-mean routing distribution


def train_step(
    bundle: ExpertBundle,
    batch: list[tuple[TokenSequence, TokenSequence]],
    learning_rate: float | None = None,
) -> TrainReport:
    """One SGD step on the final loss; updates the bundle in place.

    Gradients flow through the sparse routing via the projection's
    fixed-support Jacobian.  Deterministic given the bundle state and batch.
    """
    lr = bundle.learning_rate if learning_rate is None else float(learning_rate)
    encoded = prepare_batch(bundle, batch)
    bundle.train()
    bundle.zero_grad()
    losses = batch_losses(bundle, encoded)
    if not torch.isfinite(losses.l_final):
        raise DivergedTrainingError(
            f"non-finite loss at step {bundle.step}: "
            f"l_rec={float(losses.l_rec)}, l_balance={float(losses.l_balance)}"
        )
    losses.l_final.backward()
    with torch.no_grad():
        for param in bundle.parameters():
            if param.grad is not None:
                param.add_(param.grad, alpha=-lr)
    bundle.step += 1
    probs = losses.probs.detach().numpy()
    usage = np.bincount(probs.argmax(axis=1), minlength=bundle.n_experts) / len(batch)
    return TrainReport(
        step=bundle.step,
        l_rec=float(losses.l_rec.detach()),
        l_balance=float(losses.l_balance.detach()),
        l_final=float(losses.l_final.detach()),
        usage=usage,
        mean_probs=probs.mean(axis=0),
    )


def expert_assignments(
    bundle: ExpertBundle,
    pairs: list[tuple[TokenSequence, TokenSequence]],
    batch_size: int = 64,
) -> list[tuple[int, int]]:
    """Argmax routing of every pair: (sample index, expert index)."""
    out: list[tuple[int, int]] = []
    bundle.eval()
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        encoded = prepare_batch(bundle, chunk)
        with torch.no_grad():
            memory = bundle.backbone.encode(encoded.src)
            dec_states = bundle.backbone.decode(encoded.dec_in, memory)
            z = bundle.pooler(memory, dec_states)
            probs = sparse_route(z, bundle.lam)
        for offset, expert in enumerate(probs.argmax(dim=1).tolist()):
            out.append((start + offset, expert))
    return out


def corpus_pairs(corpus: PatternCorpus) -> list[tuple[TokenSequence, TokenSequence]]:
    return [(pair.source, pair.target) for pair in corpus.pairs]


def run_training(
    bundle: ExpertBundle,
    pairs: list[tuple[TokenSequence, TokenSequence]],
    *,
    steps: int | None = None,
    epochs: int | None = None,
    batch_size: int = 32,
    learning_rate: float | None = None,
    seed: int = 0,
    shuffle: bool = True,
) -> list[TrainReport]:
    """Run SGD over the pairs for a step budget or a number of epochs.

    Batch order is drawn from a dedicated RNG seeded with ``seed``, so runs
    are reproducible.  Returns the per-step reports.
    """
    if (steps is None) == (epochs is None):
        raise ValueError("specify exactly one of steps / epochs")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(seed)
    reports: list[TrainReport] = []
    done = 0
    epoch = 0
    while True:
        if steps is not None and done >= steps:
            break
        if epochs is not None and epoch >= epochs:
            break
        order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
        for start in range(0, len(pairs), batch_size):
            if steps is not None and done >= steps:
                break
            batch = [pairs[i] for i in order[start : start + batch_size]]
            reports.append(train_step(bundle, batch, learning_rate))
            done += 1
        epoch += 1
    return reports
