"""Transformer network: spectrum/peptide encoders, heads, joint scorer and decoder."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..chem import ModTable, parse_modification_table
from .features import N_EVIDENCE, N_RESIDUE_TOKENS

N_ION_CLASSES = 7
N_PRED_IONS = 6


@dataclass
class ModelConfig:
    """Hyperparameters plus the modification vocabulary the model was built for."""

    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_spectrum_layers: int = 2
    n_peptide_layers: int = 1
    n_joint_layers: int = 1
    n_decoder_layers: int = 2
    l_max: int = 45
    max_charge: int = 8
    fragment_tol_ppm: float = 20.0
    temperature: float = 0.1
    seed: int = 0
    mod_table_tsv: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    @property
    def mod_table(self) -> ModTable:
        return parse_modification_table(self.mod_table_tsv) if self.mod_table_tsv else ModTable()


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, key_mask, causal: bool = False, mem_index=None):
        """Attend from ``x`` over ``mem``; ``mem_index`` maps rows of ``x`` to rows of ``mem``."""
        B, Tq, d = x.shape
        Tk = mem.shape[1]
        dh = d // self.h
        q = self.q(x).view(B, Tq, self.h, dh).transpose(1, 2)
        k = self.k(mem).view(-1, Tk, self.h, dh).transpose(1, 2)
        v = self.v(mem).view(-1, Tk, self.h, dh).transpose(1, 2)
        if mem_index is not None:
            k, v, key_mask = k[mem_index], v[mem_index], key_mask[mem_index]
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        blocked = ~key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(Tq, Tk, dtype=torch.bool, device=x.device).triu(1)
            blocked = blocked | tri
        scores = scores.masked_fill(blocked, -1e9)
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, Tq, d))


class Block(nn.Module):
    """Pre-LN block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, d: int, heads: int, d_ff: int, cross: bool = False, self_attn: bool = True):
        super().__init__()
        self.self_attn = Attention(d, heads) if self_attn else None
        self.ln1 = nn.LayerNorm(d) if self_attn else None
        self.cross = Attention(d, heads) if cross else None
        self.ln_c = nn.LayerNorm(d) if cross else None
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)

    def forward(self, x, mask, mem=None, mem_mask=None, causal: bool = False, mem_index=None):
        if self.self_attn is not None:
            h = self.ln1(x)
            x = x + self.self_attn(h, h, mask, causal)
        if self.cross is not None:
            x = x + self.cross(self.ln_c(x), mem, mem_mask, mem_index=mem_index)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


def masked_mean(x, mask):
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(-2) / w.sum(-2).clamp_min(1.0)


def _mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


class PsmModel(nn.Module):
    """All trainable parameters of the scorer and the de novo decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        d = c.d_model
        self.mod_names: tuple[str, ...] = c.mod_table.token_names
        self.mod_index = {name: i + 1 for i, name in enumerate(self.mod_names)}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            # spectrum encoder
            self.intensity_proj = nn.Linear(1, d)
            self.charge_emb = nn.Embedding(c.max_charge + 1, d)
            self.precursor_proj = nn.Linear(d + 1, d)
            self.spec_layers = nn.ModuleList(
                Block(d, c.n_heads, c.d_ff) for _ in range(c.n_spectrum_layers)
            )
            self.spec_ln = nn.LayerNorm(d)
            # spectrum heads
            self.aa_head = nn.Linear(d, c.l_max + 1)
            self.ion_head = nn.Linear(d, N_ION_CLASSES)
            self.len_head = _mlp(d, d, c.l_max)
            # peptide encoder
            self.tok_emb = nn.Embedding(N_RESIDUE_TOKENS, d)
            self.mod_emb = nn.Embedding(len(self.mod_names) + 1, d)
            self.b_mass_proj = nn.Linear(d, d)
            self.y_mass_proj = nn.Linear(d, d)
            self.pep_layers = nn.ModuleList(
                Block(d, c.n_heads, c.d_ff) for _ in range(c.n_peptide_layers)
            )
            self.pep_ln = nn.LayerNorm(d)
            # spectrum prediction
            self.pred_charge = nn.Embedding(c.max_charge + 1, d)
            self.pred_mlp = _mlp(d, d, N_PRED_IONS)
            # joint scorer
            self.evidence_proj = nn.Linear(N_EVIDENCE, d)
            self.joint_layers = nn.ModuleList(
                Block(d, c.n_heads, c.d_ff, cross=True) for _ in range(c.n_joint_layers)
            )
            self.joint_ln = nn.LayerNorm(d)
            self.joint_out = _mlp(d, d, 1)
            self.evidence_score = nn.Linear(N_EVIDENCE, 1)
            # listwise ranker
            self.list_attn = Attention(d, c.n_heads)
            self.list_ln = nn.LayerNorm(d)
            self.list_out = nn.Linear(d, 1)
            # decoder
            self.len_emb = nn.Embedding(c.l_max + 1, d)
            self.prefix_proj = nn.Linear(d, d)
            self.remain_proj = nn.Linear(d + 1, d)
            self.dec_layers = nn.ModuleList(
                Block(d, c.n_heads, c.d_ff, cross=True) for _ in range(c.n_decoder_layers)
            )
            self.dec_ln = nn.LayerNorm(d)
            self.dec_out = nn.Linear(d, d)
            self.dec_res_bias = nn.Embedding(N_RESIDUE_TOKENS, 1)
            self.dec_mod_bias = nn.Embedding(len(self.mod_names) + 1, 1)
            self.dec_evidence = _mlp(N_EVIDENCE, 16, 1)
            nn.init.zeros_(self.dec_res_bias.weight)
            nn.init.zeros_(self.dec_mod_bias.weight)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def _t(self, array):
        if isinstance(array, torch.Tensor):
            return array.to(self.dtype)
        return torch.tensor(array, dtype=self.dtype)

    # -- encoders ---------------------------------------------------------

    def encode_spectra(self, sb):
        """Return per-peak rows ``(B, P, d)`` and pooled vectors ``(B, d)``."""
        x = self._t(sb.mz_enc) + self.intensity_proj(self._t(sb.intensity).unsqueeze(-1))
        mask = torch.as_tensor(sb.peak_mask)
        for layer in self.spec_layers:
            x = layer(x, mask)
        x = self.spec_ln(x)
        prec = torch.cat([self._t(sb.precursor_enc), self._t(sb.precursor_scaled).unsqueeze(-1)], -1)
        pooled = (
            masked_mean(x, mask)
            + self.charge_emb(torch.as_tensor(sb.charge))
            + self.precursor_proj(prec)
        )
        return x, pooled

    def spectrum_heads(self, per_peak, pooled):
        """Logits for residue counts, ion types (per peak) and length."""
        return self.aa_head(per_peak), self.ion_head(per_peak), self.len_head(pooled)

    def encode_peptides(self, pb):
        """Return per-token rows ``(N, T, d)`` and pooled (BOS) vectors ``(N, d)``."""
        tok = torch.as_tensor(pb.tokens)
        mask = torch.as_tensor(pb.mask)
        x = (
            self.tok_emb(tok)
            + self.mod_emb(torch.as_tensor(pb.mod_tokens))
            + self._t(pb.pos_enc)
            + self.b_mass_proj(self._t(pb.b_enc))
            + self.y_mass_proj(self._t(pb.y_enc))
        )
        for layer in self.pep_layers:
            x = layer(x, mask)
        x = self.pep_ln(x)
        return x, x[:, 0]

    # -- heads on peptide rows -------------------------------------------

    def predict_logits(self, per_token, charge):
        """Six ion-type logits per cleavage site: ``(N, T-1, 6)``.

        Site ``t`` uses token rows ``t`` and ``t+1``; only sites ``1..L-1``
        are meaningful.
        """
        h = per_token[:, :-1] + per_token[:, 1:]
        h = h + self.pred_charge(torch.as_tensor(charge)).unsqueeze(1)
        return self.pred_mlp(h)

    def joint(self, per_token, tok_mask, per_peak, peak_mask, evidence, spectrum_index=None):
        """Score ``(N,)`` and fused state ``(N, d)`` for peptide rows.

        Row ``i`` is paired with spectrum ``spectrum_index[i]`` (default: row ``i``).
        """
        ev = self._t(evidence)
        x = per_token + self.evidence_proj(ev)
        mask = torch.as_tensor(tok_mask)
        idx = None if spectrum_index is None else torch.as_tensor(spectrum_index)
        for layer in self.joint_layers:
            x = layer(x, mask, per_peak, torch.as_tensor(peak_mask), mem_index=idx)
        fused = masked_mean(self.joint_ln(x), mask)
        direct = self.evidence_score(ev.sum(1)).squeeze(-1)
        return self.joint_out(fused).squeeze(-1) + direct, fused

    def listwise_logits(self, states, mask):
        """Permutation-equivariant logits over candidate states ``(B, K, d)``."""
        mask = torch.as_tensor(mask)
        h = self.list_ln(states)
        x = states + self.list_attn(h, h, mask)
        logits = self.list_out(x).squeeze(-1)
        return logits.masked_fill(~mask, -1e9)

    # -- decoder -----------------------------------------------------------

    def decoder_states(self, per_peak, peak_mask, pooled, db):
        """Hidden states ``(B, S, d)`` of the length-conditioned decoder."""
        mask = torch.as_tensor(db.mask)
        rem = torch.cat([self._t(db.remain_enc), self._t(db.remain_scaled).unsqueeze(-1)], -1)
        x = (
            self.tok_emb(torch.as_tensor(db.prev_tokens))
            + self.mod_emb(torch.as_tensor(db.prev_mods))
            + self._t(db.pos_enc)
            + self.len_emb(torch.as_tensor(db.remaining_len))
            + self.prefix_proj(self._t(db.prefix_enc))
            + self.remain_proj(rem)
            + pooled.unsqueeze(1)
        )
        for layer in self.dec_layers:
            x = layer(x, mask, per_peak, torch.as_tensor(peak_mask), causal=True)
        return self.dec_ln(x)

    def combo_logits(self, states, vocab, evidence):
        """Logits ``(B, S, C)`` over residue/modification combos."""
        res = torch.as_tensor(vocab.residue_tokens)
        mod = torch.as_tensor(vocab.mod_tokens)
        table = self.tok_emb(res) + self.mod_emb(mod)
        logits = self.dec_out(states) @ table.T
        logits = logits + (self.dec_res_bias(res) + self.dec_mod_bias(mod)).squeeze(-1)
        return logits + self.dec_evidence(self._t(evidence)).squeeze(-1)
