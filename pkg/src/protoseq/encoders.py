"""Utterance encoders (AVG, CNN, token BiLSTM), the BiLSTM context encoder and the MLP head.

Batched routines take padded numpy token embeddings ``[U, T, D]`` (frozen,
so never differentiated) and return :class:`~protoseq.numcore.Tensor`
outputs.  The single-item ``encode_*`` functions wrap them for one utterance
or one conversation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor


def uniform_param(rng: np.random.Generator, shape: tuple, bound: float, name: str) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


class Module:
    """Minimal parameter container collecting Parameters from attributes."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = uniform_param(rng, (d_in, d_out), bound, "weight")
        self.bias = uniform_param(rng, (d_out,), bound, "bias")

    def __call__(self, x) -> Tensor:
        return nc.matmul(x, self.weight) + self.bias


# ---------------------------------------------------------------- AVG


def avg_batch(embeds: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Mean of the first ``lengths[u]`` token vectors of each utterance."""
    if np.any(lengths < 1):
        raise ValueError("cannot average an utterance with no unmasked tokens")
    mask = np.arange(embeds.shape[1])[None, :] < lengths[:, None]
    total = (embeds * mask[:, :, None]).sum(axis=1)
    return Tensor(total / lengths[:, None])


def encode_avg(token_embeds, mask: Sequence[bool] | None = None) -> Tensor:
    x = np.asarray(token_embeds.data if isinstance(token_embeds, Tensor) else token_embeds, dtype=float)
    m = np.ones(len(x), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("cannot average an utterance with no unmasked tokens")
    return Tensor(x[m].mean(axis=0))


# ---------------------------------------------------------------- CNN


class CNNEncoder(Module):
    """Text CNN: one filter bank per window width, relu, max over time."""

    def __init__(self, emb_dim: int, rng: np.random.Generator, widths: Sequence[int] = (3, 4, 5),
                 n_filters: int = 50):
        self.widths = tuple(widths)
        self.n_filters = n_filters
        self.emb_dim = emb_dim
        self.banks = [_FilterBank(w, emb_dim, n_filters, rng) for w in self.widths]

    @property
    def out_dim(self) -> int:
        return self.n_filters * len(self.widths)

    @property
    def min_len(self) -> int:
        return max(self.widths)

    def __call__(self, embeds: np.ndarray, lengths: np.ndarray) -> Tensor:
        n_utt, t_max, dim = embeds.shape
        eff = np.maximum(lengths, self.min_len)  # short utterances are zero-padded to the widest window
        if t_max < self.min_len:
            embeds = np.concatenate([embeds, np.zeros((n_utt, self.min_len - t_max, dim))], axis=1)
            t_max = self.min_len
        pooled = []
        for bank in self.banks:
            w = bank.width
            n_pos = t_max - w + 1
            windows = np.lib.stride_tricks.sliding_window_view(embeds, w, axis=1)  # [U, P, D, w]
            cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(n_utt * n_pos, w * dim)
            act = nc.relu(nc.matmul(cols, bank.weight) + bank.bias).reshape(n_utt, n_pos, self.n_filters)
            valid = (np.arange(n_pos)[None, :] <= (eff - w)[:, None]).astype(float)
            # relu output is >= 0, so zeroing invalid positions leaves the max unchanged
            pooled.append(nc.tmax(act * valid[:, :, None], axis=1))
        return nc.concat(pooled, axis=1)


class _FilterBank(Module):
    def __init__(self, width: int, emb_dim: int, n_filters: int, rng: np.random.Generator):
        self.width = width
        bound = 1.0 / np.sqrt(width * emb_dim)
        # rows ordered (offset, embedding dim) to match the im2col layout
        self.weight = uniform_param(rng, (width * emb_dim, n_filters), bound, "weight")
        self.bias = uniform_param(rng, (n_filters,), bound, "bias")


def encode_cnn(token_embeds, params: CNNEncoder) -> Tensor:
    x = np.asarray(token_embeds.data if isinstance(token_embeds, Tensor) else token_embeds, dtype=float)
    return params(x[None], np.array([len(x)]))[0]


# ---------------------------------------------------------------- LSTM


class LSTMCell(Module):
    """Gate layout in the fused matrices: input, forget, output, candidate."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_x = uniform_param(rng, (d_in, 4 * hidden), bound, "w_x")
        self.w_h = uniform_param(rng, (hidden, 4 * hidden), bound, "w_h")
        bias = rng.uniform(-bound, bound, size=4 * hidden)
        bias[hidden: 2 * hidden] = 1.0
        self.bias = Parameter(bias, name="bias")

    def run(self, x: Tensor, mask: np.ndarray, reverse: bool = False) -> list[Tensor]:
        """Run over ``x`` [B, T, d]; returns the hidden state at every position.

        Masked steps carry the previous state through unchanged, so a reverse
        pass over tail padding starts from zeros at the last real position.
        """
        b, t_len, d = x.shape
        hdim = self.hidden
        proj = nc.matmul(x.reshape(b * t_len, d), self.w_x).reshape(b, t_len, 4 * hdim)
        h = Tensor(np.zeros((b, hdim)))
        c = Tensor(np.zeros((b, hdim)))
        states: list[Tensor | None] = [None] * t_len
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in steps:
            gates = proj[:, t, :] + nc.matmul(h, self.w_h) + self.bias
            sig = nc.sigmoid(gates[:, : 3 * hdim])
            i_g, f_g, o_g = sig[:, :hdim], sig[:, hdim: 2 * hdim], sig[:, 2 * hdim:]
            cand = nc.tanh(gates[:, 3 * hdim:])
            c_new = f_g * c + i_g * cand
            h_new = o_g * nc.tanh(c_new)
            m = mask[:, t]
            if m.all():
                h, c = h_new, c_new
            else:
                keep = m[:, None].astype(float)
                h = h_new * keep + h * (1.0 - keep)
                c = c_new * keep + c * (1.0 - keep)
            states[t] = h
        return states


class BiLSTM(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.forward = LSTMCell(d_in, hidden, rng)
        self.backward = LSTMCell(d_in, hidden, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (per-position outputs [B, T, 2H], last forward state, first backward state)."""
        x = nc.as_tensor(x)
        fwd = self.forward.run(x, mask, reverse=False)
        bwd = self.backward.run(x, mask, reverse=True)
        outputs = nc.concat([nc.stack(fwd, axis=1), nc.stack(bwd, axis=1)], axis=2)
        return outputs, fwd[-1], bwd[0]


def encode_utterance_bilstm(token_embeds, mask: Sequence[bool] | None, params: BiLSTM) -> Tensor:
    x = nc.as_tensor(token_embeds)
    m = np.ones(x.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("utterance has no unmasked tokens")
    _, last_fwd, first_bwd = params(x.reshape(1, *x.shape), m[None])
    return nc.concat([last_fwd, first_bwd], axis=1)[0]


def encode_context(utt_vecs, mask: Sequence[bool] | None, params: BiLSTM) -> Tensor:
    x = nc.as_tensor(utt_vecs)
    m = np.ones(x.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    outputs, _, _ = params(x.reshape(1, *x.shape), m[None])
    return outputs[0] * m[:, None].astype(float)


# ---------------------------------------------------------------- MLP


class MLP(Module):
    """affine -> relu -> dropout -> affine."""

    def __init__(self, d_in: int, rng: np.random.Generator, hidden: int = 128, d_out: int = 128,
                 p_drop: float = 0.2):
        self.layer1 = Linear(d_in, hidden, rng)
        self.layer2 = Linear(hidden, d_out, rng)
        self.p_drop = p_drop

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        hid = nc.dropout(nc.relu(self.layer1(x)), self.p_drop, rng, training)
        return self.layer2(hid)


def mlp_project(v, params: MLP, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    return params(v, training=training, rng=rng)
