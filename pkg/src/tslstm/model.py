"""Full captioning model: parameter container and end-to-end loss/gradients."""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import decoder, encoder, nn
from .errors import ShapeError
from .nn import EmbeddingParams, LstmParams, MlstmParams, OutputParams
from .tensor import DTYPE, mean_columns
from .vocab import PAD


@dataclass
class ModelConfig:
    vocab_size: int
    feature_dim: int
    encoder_hidden: int = 512
    embed_dim: int = 512
    word_hidden: int = 512
    mm_hidden: int = 512

    @property
    def context_dim(self) -> int:
        return self.feature_dim + self.encoder_hidden


@dataclass
class ModelParams:
    embed: EmbeddingParams
    enc: LstmParams
    word: LstmParams
    mm: MlstmParams
    out: OutputParams

    _parts = ("embed", "enc", "word", "mm", "out")

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat name -> array mapping (the arrays themselves, not copies)."""
        named = {}
        for part in self._parts:
            for k, v in getattr(self, part).tensors().items():
                named[f"{part}.{k}"] = v
        return named

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(getattr(self, p).zeros_like() for p in self._parts))

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, p).copy() for p in self._parts))

    @classmethod
    def from_tensors(cls, named: Dict[str, np.ndarray]) -> "ModelParams":
        groups = {p: {} for p in cls._parts}
        for name, arr in named.items():
            part, key = name.split(".", 1)
            groups[part][key] = np.asarray(arr, DTYPE)
        return cls(EmbeddingParams(**groups["embed"]), LstmParams(**groups["enc"]),
                   LstmParams(**groups["word"]), MlstmParams(**groups["mm"]),
                   OutputParams(**groups["out"]))

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.out.W_f.shape[0],
            feature_dim=self.enc.input_size,
            encoder_hidden=self.enc.hidden_size,
            embed_dim=self.embed.W_s.shape[0],
            word_hidden=self.word.hidden_size,
            mm_hidden=self.mm.hidden_size,
        )


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-0.08, 0.08) weights, zero biases, forget-gate bias 1."""
    u = lambda *shape: rng.uniform(-nn.INIT_RANGE, nn.INIT_RANGE, size=shape)
    return ModelParams(
        embed=EmbeddingParams(u(cfg.embed_dim, cfg.vocab_size)),
        enc=nn.init_lstm(rng, cfg.feature_dim, cfg.encoder_hidden),
        word=nn.init_lstm(rng, cfg.embed_dim, cfg.word_hidden),
        mm=nn.init_mlstm(rng, cfg.word_hidden, cfg.mm_hidden, cfg.context_dim),
        out=OutputParams(u(cfg.vocab_size, cfg.mm_hidden), np.zeros(cfg.vocab_size, DTYPE)),
    )


def context(features, n_e: int, params: ModelParams) -> np.ndarray:
    """Fused video vector ``y`` for one ``(d_v, n_v)`` feature matrix (eval mode)."""
    h_seq, _ = encoder.encode(features, n_e, params.enc)
    return encoder.fuse(features, h_seq)


@dataclass
class Batch:
    segments: np.ndarray  # (B, n_e, d_v) segment means
    vbar: np.ndarray      # (B, d_v) mean frame feature
    inputs: np.ndarray    # (B, T) BOS s_1 .. s_n, PAD-padded
    targets: np.ndarray   # (B, T) s_1 .. s_n EOS, PAD-padded
    mask: np.ndarray      # (B, T) 1.0 on real positions

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def make_batch(segments: Sequence[np.ndarray], vbars: Sequence[np.ndarray],
               captions: Sequence[Sequence[int]], pad_to: Optional[int] = None) -> Batch:
    """Stack per-video inputs; captions are full BOS..EOS index lists.

    ``segments[k]`` is ``(n_e, d_v)`` (already pooled), ``vbars[k]`` is ``(d_v,)``.
    """
    if not (len(segments) == len(vbars) == len(captions)) or not captions:
        raise ShapeError("batch components must be non-empty and of equal length")
    steps = [len(c) - 1 for c in captions]
    T = max(steps) if pad_to is None else pad_to
    if T < max(steps):
        raise ShapeError(f"pad_to={pad_to} shorter than the longest caption")
    B = len(captions)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    mask = np.zeros((B, T), DTYPE)
    for k, cap in enumerate(captions):
        inp, tgt = decoder.split_caption(cap)
        inputs[k, :len(inp)] = inp
        targets[k, :len(tgt)] = tgt
        mask[k, :len(tgt)] = 1.0
    return Batch(np.stack(segments).astype(DTYPE), np.stack(vbars).astype(DTYPE), inputs, targets, mask)


@dataclass
class LossResult:
    loss: float               # mean over captions of per-caption mean NLL
    nll_sum: float            # summed NLL over every real token
    n_tokens: int
    caption_nll: np.ndarray   # (B,) per-caption mean NLL
    grads: Optional[ModelParams] = None
    grad_segments: Optional[np.ndarray] = None
    grad_vbar: Optional[np.ndarray] = None


def loss_and_grads(params: ModelParams, batch: Batch, *, train: bool = False,
                   dropout_rate: float = 0.0, encoder_dropout: bool = True,
                   rng: Optional[np.random.Generator] = None, need_grads: bool = True) -> LossResult:
    """Teacher-forced loss on a batch, and its gradient w.r.t. every parameter.

    Each caption contributes its mean per-token NLL; captions are averaged,
    so the gradient is a batch mean.
    """
    mode = "train" if train else "eval"
    enc_rate = dropout_rate if encoder_dropout else 0.0
    h_seq, enc_cache = encoder.encode_segments(batch.segments, params.enc, dropout_rate=enc_rate,
                                               train=train, rng=rng)
    y = np.concatenate([batch.vbar, encoder.mean_hidden(h_seq)], axis=-1)
    caches = decoder.forward_sequence(batch.inputs, y, params, mode, dropout_rate, rng)
    lp = decoder.target_log_probs(caches, batch.targets) * batch.mask
    lengths = batch.mask.sum(axis=1)
    caption_nll = -lp.sum(axis=1) / lengths
    result = LossResult(float(caption_nll.mean()), float(-lp.sum()), batch.n_tokens, caption_nll)
    if not need_grads:
        return result
    B = len(lengths)
    weights = batch.mask / lengths[:, None] / B
    grads = params.zeros_like()
    dy = decoder.backward_sequence(caches, batch.targets, weights, params, grads)
    d_v = batch.vbar.shape[1]
    result.grad_segments = encoder.encode_backward(dy[:, d_v:], enc_cache, params.enc, grads.enc)
    result.grad_vbar = dy[:, :d_v]
    result.grads = grads
    return result


def sample_loss(params: ModelParams, features, n_e: int, caption: Sequence[int],
                need_grads: bool = True):
    """Eval-mode loss of one (video, caption) pair straight from raw features.

    Returns ``(LossResult, grad_features)``; ``grad_features`` is the gradient
    w.r.t. the ``(d_v, n_v)`` frame matrix (None without gradients).
    """
    features = np.asarray(features, DTYPE)
    segs = encoder.temporal_pool(features, n_e).T
    batch = make_batch([segs], [mean_columns(features)], [caption])
    res = loss_and_grads(params, batch, need_grads=need_grads)
    if not need_grads:
        return res, None
    n_v = features.shape[1]
    gf = encoder.temporal_pool_backward(res.grad_segments[0].T, n_v)
    gf += res.grad_vbar[0][:, None] / n_v
    return res, gf


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
