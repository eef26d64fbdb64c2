"""Per-identity learnable text tokens spliced into a fixed template.

Each identity owns M learnable token embeddings inserted between the frozen
embeddings of "a photo of a" and "person". Setting M to zero switches to the
fixed-template baseline, where the learnable slots are replaced by a single
frozen class-name token per identity.
"""

from __future__ import annotations

import torch
from torch import nn, Tensor

from .errors import ValidationError

TEMPLATE_PREFIX = ("<start>", "a", "photo", "of", "a")
TEMPLATE_SUFFIX = ("person", "<end>")

# Seed of the frozen template vocabulary; independent from the bank init seed
# so that every bank of a given token width shares the same prefix/suffix.
_VOCAB_SEED = 911


def template_embeddings(token_dim: int) -> tuple[Tensor, Tensor]:
    """Frozen embeddings of the template words around the learnable slots."""
    gen = torch.Generator().manual_seed(_VOCAB_SEED)
    table = torch.normal(0.0, 0.02, (len(TEMPLATE_PREFIX) + len(TEMPLATE_SUFFIX), token_dim),
                         generator=gen)
    return table[: len(TEMPLATE_PREFIX)], table[len(TEMPLATE_PREFIX):]


class PromptBank(nn.Module):
    """N x M x D_tok learnable token embeddings plus the frozen template.

    The token tensor is the only parameter; prefix/suffix (and the class
    tokens of the fixed-template variant) are buffers and never updated.
    """

    def __init__(self, num_identities: int, num_tokens: int, token_dim: int, seed: int = 0):
        super().__init__()
        if num_identities <= 0:
            raise ValidationError(f"num_identities must be positive, got {num_identities}")
        if token_dim <= 0:
            raise ValidationError(f"token_dim must be positive, got {token_dim}")
        if num_tokens < 0:
            raise ValidationError(f"num_tokens must be >= 0, got {num_tokens}")
        self.num_identities = num_identities
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        gen = torch.Generator().manual_seed(seed)
        self.tokens = nn.Parameter(
            torch.normal(0.0, 0.02, (num_identities, num_tokens, token_dim), generator=gen))
        prefix, suffix = template_embeddings(token_dim)
        self.register_buffer("prefix", prefix)
        self.register_buffer("suffix", suffix)
        if num_tokens == 0:
            # fixed-template baseline: one frozen class-name token per identity
            self.register_buffer(
                "class_tokens",
                torch.normal(0.0, 0.02, (num_identities, 1, token_dim), generator=gen))
        else:
            self.class_tokens = None

    @property
    def sequence_length(self) -> int:
        slots = self.num_tokens if self.num_tokens > 0 else 1
        return self.prefix.shape[0] + slots + self.suffix.shape[0]

    def _check_ids(self, identity_ids: Tensor) -> None:
        if identity_ids.numel() == 0:
            raise ValidationError("empty identity batch")
        if identity_ids.min() < 0 or identity_ids.max() >= self.num_identities:
            raise ValidationError(
                f"identity id outside [0, {self.num_identities}): {identity_ids.tolist()}")

    def compose_batch(self, identity_ids) -> Tensor:
        """Token-embedding sequences (B, L, D_tok) for a batch of ids."""
        ids = torch.as_tensor(identity_ids, dtype=torch.long).reshape(-1)
        self._check_ids(ids)
        b = ids.shape[0]
        slots = self.class_tokens[ids] if self.num_tokens == 0 else self.tokens[ids]
        prefix = self.prefix.unsqueeze(0).expand(b, -1, -1)
        suffix = self.suffix.unsqueeze(0).expand(b, -1, -1)
        return torch.cat([prefix, slots, suffix], dim=1)

    def compose(self, identity_id: int) -> Tensor:
        """Token-embedding sequence (L, D_tok) for a single identity."""
        return self.compose_batch([identity_id])[0]


def init_prompt_bank(num_identities: int, num_tokens: int, token_dim: int, seed: int = 0) -> PromptBank:
    """Seeded bank construction; tokens drawn from N(0, 0.02)."""
    return PromptBank(num_identities, num_tokens, token_dim, seed)


def compose_prompt(bank: PromptBank, identity_id: int) -> Tensor:
    return bank.compose(identity_id)
