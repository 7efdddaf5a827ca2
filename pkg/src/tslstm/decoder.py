"""Stacked sentence generator: embedding, word LSTM, multi-modal LSTM and a
softmax head, with teacher-forced training and greedy / beam inference."""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .nn import LstmState
from .tensor import DTYPE, log_softmax
from .vocab import BOS, EOS, PAD, UNK

# never emitted at inference
BANNED = (PAD, BOS, UNK)


@dataclass
class DecoderState:
    word: LstmState  # (q, u)
    mm: LstmState    # (h', c')

    @classmethod
    def zeros(cls, params, batch: Optional[int] = None) -> "DecoderState":
        return cls(LstmState.zeros(params.word.hidden_size, batch),
                   LstmState.zeros(params.mm.hidden_size, batch))

    def take(self, rows) -> "DecoderState":
        return DecoderState(LstmState(self.word.h[rows], self.word.c[rows]),
                            LstmState(self.mm.h[rows], self.mm.c[rows]))


@dataclass
class StepCache:
    tokens: np.ndarray
    m_mask: Optional[np.ndarray]
    word: nn.CellCache
    q_mask: Optional[np.ndarray]
    mm: nn.CellCache
    h_mask: Optional[np.ndarray]
    h_out: np.ndarray  # dropped-out M-LSTM output fed to the softmax head
    log_probs: np.ndarray


@dataclass
class BeamHypothesis:
    tokens: List[int]
    log_prob: float
    state: Optional[DecoderState] = None
    finished: bool = False


def _mode_is_train(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def step(prev_token, state: DecoderState, y, params, mode: str = "eval",
         dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None):
    """One decoding step. Returns ``(next_state, prob_dist, cache)``.

    ``prev_token`` may be a single index or a batch of indices, in which case
    ``state`` and ``y`` carry a matching leading batch axis (``y`` may also be
    a single vector shared by the whole batch).
    """
    train = _mode_is_train(mode)
    m, m_mask = nn.dropout(nn.embed(prev_token, params.embed), dropout_rate, train, rng)
    word, word_cache = nn.lstm_forward(m, state.word, params.word)
    q, q_mask = nn.dropout(word.h, dropout_rate, train, rng)
    mm, mm_cache = nn.mlstm_forward(q, y, state.mm, params.mm)
    h_out, h_mask = nn.dropout(mm.h, dropout_rate, train, rng)
    logp = log_softmax(nn.logits(h_out, params.out))
    cache = StepCache(np.asarray(prev_token), m_mask, word_cache, q_mask, mm_cache, h_mask, h_out, logp)
    return DecoderState(word, mm), np.exp(logp), cache


def forward_sequence(inputs, y, params, mode: str = "eval", dropout_rate: float = 0.0,
                     rng: Optional[np.random.Generator] = None):
    """Teacher-forced unroll over ``inputs`` of shape ``(T,)`` or ``(batch, T)``.

    Returns the list of per-step caches; ``caches[t].log_probs`` is the
    log-distribution over the token following ``inputs[..., t]``.
    """
    inputs = np.asarray(inputs)
    batch = None if inputs.ndim == 1 else inputs.shape[0]
    state = DecoderState.zeros(params, batch)
    caches = []
    for t in range(inputs.shape[-1]):
        state, _, cache = step(inputs[..., t], state, y, params, mode, dropout_rate, rng)
        caches.append(cache)
    return caches


def target_log_probs(caches, targets) -> np.ndarray:
    """Gather ``log P(target_t)`` from a teacher-forced unroll."""
    targets = np.asarray(targets)
    cols = []
    for t, cache in enumerate(caches):
        lp = cache.log_probs
        tgt = targets[..., t]
        cols.append(lp[tgt] if lp.ndim == 1 else lp[np.arange(lp.shape[0]), tgt])
    return np.stack(cols, axis=-1)


def backward_sequence(caches, targets, weights, params, grads):
    """Backward pass of ``-sum_t weights[t] * log P(targets[t])``.

    ``weights`` has the shape of ``targets`` (zero on padded positions).
    Accumulates into ``grads`` (a ModelParams-shaped object) and returns the
    gradient w.r.t. the context ``y`` summed over all steps.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, DTYPE)
    first = caches[0]
    dword_h = np.zeros_like(first.word.c)
    dword_c = np.zeros_like(first.word.c)
    dmm_h = np.zeros_like(first.mm.c)
    dmm_c = np.zeros_like(first.mm.c)
    dy = 0.0
    for t in reversed(range(len(caches))):
        c = caches[t]
        w = weights[..., t]
        tgt = targets[..., t]
        dlogits = np.exp(c.log_probs)
        if dlogits.ndim == 1:
            dlogits[tgt] -= 1.0
            dlogits *= w
        else:
            dlogits[np.arange(dlogits.shape[0]), tgt] -= 1.0
            dlogits *= w[:, None]
        dh_out = nn.project_backward(dlogits, c.h_out, params.out, grads.out)
        dh = nn.dropout_backward(dh_out, c.h_mask) + dmm_h
        _, dq, dy_t, dprev = nn.mlstm_backward(dh, dmm_c, c.mm, params.mm, grads.mm)
        dy = dy + dy_t
        dmm_h, dmm_c = dprev.h, dprev.c
        dq = nn.dropout_backward(dq, c.q_mask) + dword_h
        _, dm, dprev = nn.lstm_backward(dq, dword_c, c.word, params.word, grads.word)
        dword_h, dword_c = dprev.h, dprev.c
        nn.embed_backward(c.tokens, nn.dropout_backward(dm, c.m_mask), grads.embed)
    return np.asarray(dy)


@dataclass
class CaptionLoss:
    loss: float
    token_log_probs: np.ndarray
    caches: list = field(repr=False)


def split_caption(caption: Sequence[int]):
    """Teacher-forcing shift: inputs ``BOS s_1..s_n``, targets ``s_1..s_n EOS``."""
    caption = list(caption)
    if len(caption) < 2 or caption[0] != BOS or caption[-1] != EOS:
        raise ShapeError(f"caption must start with BOS and end with EOS: {caption}")
    return np.asarray(caption[:-1]), np.asarray(caption[1:])


def teacher_forced_loss(caption, y, params, mode: str = "eval", dropout_rate: float = 0.0,
                        rng: Optional[np.random.Generator] = None) -> CaptionLoss:
    """Negative mean per-token log-likelihood of one caption given ``y``."""
    inputs, targets = split_caption(caption)
    caches = forward_sequence(inputs, y, params, mode, dropout_rate, rng)
    lp = target_log_probs(caches, targets)
    return CaptionLoss(float(-lp.mean()), lp, caches)


def teacher_forced_backward(caption, result: CaptionLoss, params, grads):
    _, targets = split_caption(caption)
    weights = np.full(len(targets), 1.0 / len(targets))
    return backward_sequence(result.caches, targets, weights, params, grads)


def _masked(logp, banned):
    logp = logp.copy()
    logp[..., list(banned)] = -np.inf
    return logp


def greedy_decode(y, params, max_len: int, banned=BANNED, with_score: bool = False):
    """Argmax decoding from BOS; stops at EOS or after ``max_len`` tokens."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    tokens = [BOS]
    score = 0.0
    # one-row batch: same arithmetic path as the beam search
    state = DecoderState.zeros(params, 1)
    for _ in range(max_len):
        state, _, cache = step(np.array([tokens[-1]]), state, y, params)
        total = score + _masked(cache.log_probs[0], banned)
        # argmax returns the lowest index among ties
        tok = int(np.argmax(total))
        score = float(total[tok])
        tokens.append(tok)
        if tok == EOS:
            break
    if with_score:
        return BeamHypothesis(tokens, score, state, tokens[-1] == EOS)
    return tokens


def _rank_key(h: BeamHypothesis, length_normalize: bool):
    n = len(h.tokens) - 1
    s = h.log_prob / n if length_normalize else h.log_prob
    return (-s, n, h.tokens)


def beam_search_ranked(y, params, width: int, max_len: int, banned=BANNED,
                       length_normalize: bool = False) -> List[BeamHypothesis]:
    """All final hypotheses of a beam search, best first.

    Each step extends every live hypothesis by every allowed token and keeps
    the ``width`` best candidates by summed log-probability (ties: lower token
    sequence first). Candidates ending in EOS leave the beam as finished;
    hypotheses still live after ``max_len`` steps are kept as truncated.
    """
    if width < 1:
        raise ConfigError("beam width must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    live = [BeamHypothesis([BOS], 0.0, DecoderState.zeros(params, 1))]
    final: List[BeamHypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        state = DecoderState(
            LstmState(np.concatenate([h.state.word.h for h in live]),
                      np.concatenate([h.state.word.c for h in live])),
            LstmState(np.concatenate([h.state.mm.h for h in live]),
                      np.concatenate([h.state.mm.c for h in live])))
        prev = np.array([h.tokens[-1] for h in live])
        state, _, cache = step(prev, state, y, params)
        prefix = np.array([h.log_prob for h in live])[:, None]
        scores = prefix + _masked(cache.log_probs, banned)
        flat = scores.ravel()
        n_ok = int(np.isfinite(flat).sum())
        k = min(width, n_ok)
        # everything tied with the k-th best score stays in the running
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        picked = np.flatnonzero(flat >= kth)
        vocab = scores.shape[1]
        cands = []
        for idx in picked:
            r, tok = divmod(int(idx), vocab)
            cands.append((-float(flat[idx]), live[r].tokens + [tok], r))
        cands.sort(key=lambda c: (c[0], c[1]))
        live = []
        for neg, toks, r in cands[:k]:
            hyp = BeamHypothesis(toks, -neg, state.take(slice(r, r + 1)), toks[-1] == EOS)
            (final if hyp.finished else live).append(hyp)
    final.extend(live)
    final.sort(key=lambda h: _rank_key(h, length_normalize))
    return final


def beam_search(y, params, width: int = 5, max_len: int = 30, banned=BANNED,
                length_normalize: bool = False) -> List[int]:
    return beam_search_ranked(y, params, width, max_len, banned, length_normalize)[0].tokens
