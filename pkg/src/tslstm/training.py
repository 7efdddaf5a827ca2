"""Optimization: adadelta with element-wise clipping, mini-batch BPTT with
early stopping, checkpoints, and the finite-difference gradient check."""

import base64
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, decoder, metrics
from .data import Dataset
from .encoder import temporal_pool
from .errors import ConfigError, LoadError, ShapeError, TrainingError
from .model import Batch, ModelConfig, ModelParams, init_params, loss_and_grads, make_batch, sample_loss
from .tensor import DTYPE, mean_columns
from .vocab import BOS, EOS, Vocabulary, build_vocab, decode_tokens, encode_caption, tokenize

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tslstm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    clip_threshold: float = 10.0
    dropout_rate: float = 0.5
    encoder_dropout: bool = True
    n_e: int = 3
    encoder_hidden: int = 512
    embed_dim: int = 512
    word_hidden: int = 512
    mm_hidden: int = 512
    max_caption_len: int = 30
    min_count: int = 2
    rho: float = 0.95
    epsilon: float = 1e-6
    lr_scale: float = 1.0
    early_stop_metric: str = "loss"  # or "bleu4"
    clip_after_averaging: bool = True
    stop_perplexity: Optional[float] = None  # stop once val perplexity drops below this
    seed: int = 0

    def validate(self) -> "TrainConfig":
        counts = ("batch_size", "max_epochs", "n_e", "encoder_hidden", "embed_dim",
                  "word_hidden", "mm_hidden", "max_caption_len")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 0 or self.min_count < 0:
            raise ConfigError("patience and min_count must be >= 0")
        if not self.clip_threshold > 0:
            raise ConfigError("clip_threshold must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if not 0.0 < self.rho < 1.0 or not self.epsilon > 0 or not self.lr_scale > 0:
            raise ConfigError("adadelta needs 0 < rho < 1, epsilon > 0, lr_scale > 0")
        if self.early_stop_metric not in ("loss", "bleu4"):
            raise ConfigError(f"early_stop_metric must be 'loss' or 'bleu4', got {self.early_stop_metric!r}")
        if self.stop_perplexity is not None and not self.stop_perplexity > 1.0:
            raise ConfigError("stop_perplexity must be > 1")
        if not self.clip_after_averaging:
            raise ConfigError("only clipping after batch averaging is implemented")
        return self

    def model_config(self, vocab_size: int, feature_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size, feature_dim, self.encoder_hidden, self.embed_dim,
                           self.word_hidden, self.mm_hidden)


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdadeltaState:
    sq_grad: Dict[str, np.ndarray]   # E[g^2]
    sq_delta: Dict[str, np.ndarray]  # E[dx^2]
    rho: float = 0.95
    epsilon: float = 1e-6
    lr_scale: float = 1.0

    @classmethod
    def zeros(cls, params: ModelParams, rho=0.95, epsilon=1e-6, lr_scale=1.0) -> "AdadeltaState":
        t = params.tensors()
        return cls({k: np.zeros_like(v) for k, v in t.items()},
                   {k: np.zeros_like(v) for k, v in t.items()}, rho, epsilon, lr_scale)


def clip_gradients(grads: ModelParams, threshold: float) -> ModelParams:
    """Clamp every gradient entry into ``[-threshold, threshold]`` (in place)."""
    if not threshold > 0:
        raise ConfigError("clip threshold must be > 0")
    for g in grads.tensors().values():
        np.clip(g, -threshold, threshold, out=g)
    return grads


def adadelta_step(params: ModelParams, grads: ModelParams, state: AdadeltaState):
    """One in-place adadelta update.

    ``dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``; the parameter moves
    by ``lr_scale * dx`` and ``E[dx^2]`` accumulates the unscaled ``dx``.
    """
    p, g = params.tensors(), grads.tensors()
    if p.keys() != g.keys() or p.keys() != state.sq_grad.keys():
        raise ShapeError("parameter, gradient and optimizer tensors do not line up")
    rho, eps = state.rho, state.epsilon
    for name, x in p.items():
        gx = g[name]
        if gx.shape != x.shape:
            raise ShapeError(f"{name}: gradient shape {gx.shape} != parameter shape {x.shape}")
        eg = state.sq_grad[name]
        ed = state.sq_delta[name]
        eg *= rho
        eg += (1.0 - rho) * gx * gx
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * gx
        ed *= rho
        ed += (1.0 - rho) * dx * dx
        x += state.lr_scale * dx
    return params, state


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    for name, x in params.tensors().items():
        x -= lr * grads.tensors()[name]
    return params


# --- checkpoints -------------------------------------------------------------

def _pack(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(DTYPE)


def _pack_all(named: Dict[str, np.ndarray]) -> dict:
    return {k: _pack(v) for k, v in named.items()}


def _unpack_all(obj: dict) -> Dict[str, np.ndarray]:
    return {k: _unpack(v) for k, v in obj.items()}


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: AdadeltaState
    vocab: Vocabulary
    config: TrainConfig
    epoch: int                       # epochs completed
    best_score: float
    best_epoch: int
    bad_epochs: int
    rng_state: dict
    best_params: Optional[ModelParams] = None

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "code_version": __version__,
            "config": asdict(self.config),
            "model": asdict(self.params.config),
            "vocab": self.vocab.to_json(),
            "epoch": self.epoch,
            "best_score": self.best_score,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "rng_state": self.rng_state,
            "params": _pack_all(self.params.tensors()),
            "best_params": None if self.best_params is None else _pack_all(self.best_params.tensors()),
            "optimizer": {
                "rho": self.optimizer.rho, "epsilon": self.optimizer.epsilon,
                "lr_scale": self.optimizer.lr_scale,
                "sq_grad": _pack_all(self.optimizer.sq_grad),
                "sq_delta": _pack_all(self.optimizer.sq_delta),
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise LoadError(f"not a checkpoint (format={obj.get('format')!r})")
        if obj.get("version") != CHECKPOINT_VERSION:
            raise LoadError(f"unsupported checkpoint version {obj.get('version')}")
        opt = obj["optimizer"]
        best = obj.get("best_params")
        return cls(
            params=ModelParams.from_tensors(_unpack_all(obj["params"])),
            optimizer=AdadeltaState(_unpack_all(opt["sq_grad"]), _unpack_all(opt["sq_delta"]),
                                    opt["rho"], opt["epsilon"], opt["lr_scale"]),
            vocab=Vocabulary.from_json(obj["vocab"]),
            config=config_from_dict(TrainConfig, obj["config"]),
            epoch=obj["epoch"], best_score=obj["best_score"], best_epoch=obj["best_epoch"],
            bad_epochs=obj["bad_epochs"], rng_state=obj["rng_state"],
            best_params=None if best is None else ModelParams.from_tensors(_unpack_all(best)),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise LoadError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: malformed checkpoint JSON at offset {exc.pos}") from exc
        return cls.from_json(obj)

    @property
    def model(self) -> ModelParams:
        """Parameters to decode with: the best-validation ones when known."""
        return self.best_params if self.best_params is not None else self.params


def config_from_dict(cls, obj: dict, where: str = "config"):
    """Build a config dataclass, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return cls(**obj)


# --- training loop -----------------------------------------------------------

@dataclass
class Example:
    video_id: str
    segments: np.ndarray  # (n_e, d_v)
    vbar: np.ndarray      # (d_v,)
    caption: List[int]


def prepare_examples(videos, vocab: Vocabulary, n_e: int, max_len: int) -> List[Example]:
    """One example per (video, caption); captions over ``max_len`` words are dropped."""
    out = []
    for v in videos:
        n_v = v.features.shape[1]
        if n_e > n_v:
            raise ConfigError(f"n_e={n_e} exceeds the frame count {n_v} of video {v.id!r}")
        segs = temporal_pool(v.features, n_e).T.copy()
        vbar = mean_columns(v.features)
        for cap in v.captions:
            toks = tokenize(cap)
            if len(toks) > max_len:
                continue
            out.append(Example(v.id, segs, vbar, encode_caption(toks, vocab)))
    return out


def _batch(examples: Sequence[Example]) -> Batch:
    return make_batch([e.segments for e in examples], [e.vbar for e in examples],
                      [e.caption for e in examples])


def bucket_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator):
    """Shuffle, group captions of similar length, shuffle the batch order."""
    order = rng.permutation(len(examples))
    order = sorted(order, key=lambda k: len(examples[k].caption))  # stable
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[k] for k in rng.permutation(len(batches))]


def evaluate_loss(params: ModelParams, examples: Sequence[Example], batch_size: int = 64):
    """Eval-mode mean per-caption loss and per-token perplexity."""
    total_loss = nll = 0.0
    tokens = 0
    ordered = sorted(range(len(examples)), key=lambda k: len(examples[k].caption))
    for i in range(0, len(ordered), batch_size):
        chunk = [examples[k] for k in ordered[i:i + batch_size]]
        res = loss_and_grads(params, _batch(chunk), need_grads=False)
        total_loss += float(res.caption_nll.sum())
        nll += res.nll_sum
        tokens += res.n_tokens
    return total_loss / len(examples), math.exp(nll / tokens)


def decode_videos(params: ModelParams, videos, n_e: int, vocab: Vocabulary,
                  beam_width: int = 1, max_len: int = 30) -> Dict[str, str]:
    from .model import context
    out = {}
    for v in videos:
        y = context(v.features, n_e, params)
        toks = (decoder.greedy_decode(y, params, max_len) if beam_width == 1
                else decoder.beam_search(y, params, beam_width, max_len))
        out[v.id] = decode_tokens(toks, vocab)
    return out


def _check_finite(res, where: str):
    if not math.isfinite(res.loss):
        raise TrainingError(f"non-finite loss {res.loss} at {where}")
    for name, g in res.grads.tensors().items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in tensor {name} at {where}")


@dataclass
class TrainResult:
    params: ModelParams       # best-validation parameters
    log: List[dict]
    checkpoint: Checkpoint
    vocab: Vocabulary


def train(dataset: Dataset, config: TrainConfig, *, resume: Optional[Checkpoint] = None,
          checkpoint_path=None, on_epoch=None) -> TrainResult:
    """Train from scratch (or continue ``resume``) until early stopping.

    The checkpoint written after every epoch holds everything needed to
    continue the exact same trajectory.
    """
    config.validate()
    train_videos = dataset.split("train")
    val_videos = dataset.split("val")
    if not train_videos or not val_videos:
        raise ConfigError("dataset needs non-empty train and val splits")

    if resume is None:
        vocab = build_vocab([c for v in train_videos for c in v.captions], config.min_count)
    else:
        vocab = resume.vocab
    train_ex = prepare_examples(train_videos, vocab, config.n_e, config.max_caption_len)
    val_ex = prepare_examples(val_videos, vocab, config.n_e, config.max_caption_len)
    if not train_ex or not val_ex:
        raise ConfigError("no captions left after the length filter")

    rng = np.random.default_rng(config.seed)
    if resume is None:
        params = init_params(config.model_config(len(vocab), dataset.feature_dim), rng)
        opt = AdadeltaState.zeros(params, config.rho, config.epsilon, config.lr_scale)
        epoch, best_score, best_epoch, bad = 0, -math.inf, 0, 0
        best_params = params.copy()
    else:
        params, opt = resume.params.copy(), resume.optimizer
        rng.bit_generator.state = resume.rng_state
        epoch, best_score, best_epoch, bad = resume.epoch, resume.best_score, resume.best_epoch, resume.bad_epochs
        best_params = (resume.best_params or resume.params).copy()
        # optimizer settings follow the (possibly updated) config
        opt.rho, opt.epsilon, opt.lr_scale = config.rho, config.epsilon, config.lr_scale

    history: List[dict] = []
    ckpt = None
    while epoch < config.max_epochs and bad <= config.patience:
        t0 = time.perf_counter()
        epoch += 1
        run_loss = run_nll = 0.0
        run_tokens = 0
        for b, idx in enumerate(bucket_batches(train_ex, config.batch_size, rng)):
            res = loss_and_grads(params, _batch([train_ex[k] for k in idx]), train=True,
                                 dropout_rate=config.dropout_rate,
                                 encoder_dropout=config.encoder_dropout, rng=rng)
            _check_finite(res, f"epoch {epoch}, batch {b}")
            clip_gradients(res.grads, config.clip_threshold)
            adadelta_step(params, res.grads, opt)
            run_loss += float(res.caption_nll.sum())
            run_nll += res.nll_sum
            run_tokens += res.n_tokens
        val_loss, val_ppl = evaluate_loss(params, val_ex, config.batch_size)
        entry = {"epoch": epoch, "train_loss": run_loss / len(train_ex),
                 "train_perplexity": math.exp(run_nll / run_tokens),
                 "val_loss": val_loss, "val_perplexity": val_ppl}
        if config.early_stop_metric == "bleu4":
            outs = decode_videos(params, val_videos, config.n_e, vocab, 1, config.max_caption_len + 1)
            entry["val_bleu4"] = metrics.evaluate(outs, dataset.captions("val")).bleu[3]
            score = entry["val_bleu4"]
        else:
            score = -val_loss
        if score > best_score:
            best_score, best_epoch, bad = score, epoch, 0
            best_params = params.copy()
        else:
            bad += 1
        entry["best_epoch"] = best_epoch
        entry["wall_time"] = time.perf_counter() - t0
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f ppl %.4f", epoch, entry["train_loss"], val_loss, val_ppl)
        ckpt = Checkpoint(params.copy(), opt, vocab, config, epoch, best_score, best_epoch, bad,
                          rng.bit_generator.state, best_params)
        if checkpoint_path is not None:
            ckpt.save(checkpoint_path)
        if on_epoch is not None:
            on_epoch(entry)
        if config.stop_perplexity is not None and val_ppl < config.stop_perplexity:
            break
    if ckpt is None:
        ckpt = Checkpoint(params.copy(), opt, vocab, config, epoch, best_score, best_epoch, bad,
                          rng.bit_generator.state, best_params)
    return TrainResult(best_params, history, ckpt, vocab)


# --- gradient check ----------------------------------------------------------

@dataclass
class GradCheckConfig:
    feature_dim: int = 6
    hidden: int = 3
    vocab_size: int = 8
    n_v: int = 6
    n_e: int = 3
    caption_len: int = 4
    eps: float = 1e-5
    tolerance: float = 1e-4
    floor: float = 1e-6
    param_scale: float = 0.5
    seed: int = 0

    def validate(self) -> "GradCheckConfig":
        if self.hidden > 4 or self.vocab_size > 8:
            raise ConfigError("gradient check is meant for miniature models (hidden <= 4, vocab <= 8)")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must leave room for at least one word after the reserved tokens")
        if not 1 <= self.n_e <= self.n_v:
            raise ConfigError("need 1 <= n_e <= n_v")
        return self


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float
    eps: float
    n_e: int
    loss: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e < self.tolerance for e in self.errors.values())

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "eps": self.eps,
                "n_e": self.n_e, "loss": self.loss, "max_relative_error": self.errors}

    def format(self) -> str:
        lines = [f"gradient check n_e={self.n_e} eps={self.eps:g} tol={self.tolerance:g}"]
        for name, err in self.errors.items():
            lines.append(f"  {name:<16} {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps entries whose true gradient is at the level of finite
    difference round-off (about 1e-11 here) from dominating the maximum.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f()
        x[idx] = old - eps
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * eps)
    return grad


def miniature_sample(cfg: GradCheckConfig):
    """Random parameters, features and caption for a gradient check."""
    rng = np.random.default_rng(cfg.seed)
    mcfg = ModelConfig(cfg.vocab_size, cfg.feature_dim, cfg.hidden, cfg.hidden, cfg.hidden, cfg.hidden)
    params = init_params(mcfg, rng)
    for arr in params.tensors().values():
        arr[...] = rng.uniform(-cfg.param_scale, cfg.param_scale, size=arr.shape)
    features = rng.normal(size=(cfg.feature_dim, cfg.n_v))
    words = rng.integers(4, cfg.vocab_size, size=cfg.caption_len).tolist()
    return params, features, [BOS] + words + [EOS]


def gradient_check(cfg: GradCheckConfig, sample=None) -> GradCheckReport:
    """Compare analytic gradients with central differences for every tensor
    (and for the input features)."""
    cfg.validate()
    params, features, caption = miniature_sample(cfg) if sample is None else sample
    features = np.array(features, dtype=DTYPE)
    res, grad_features = sample_loss(params, features, cfg.n_e, caption)
    f = lambda: sample_loss(params, features, cfg.n_e, caption, need_grads=False)[0].loss
    errors = {}
    analytic = res.grads.tensors()
    for name, arr in params.tensors().items():
        num = numeric_gradient(f, arr, cfg.eps)
        errors[name] = float(relative_error(analytic[name], num, cfg.floor).max())
    num = numeric_gradient(f, features, cfg.eps)
    errors["input.features"] = float(relative_error(grad_features, num, cfg.floor).max())
    return GradCheckReport(errors, cfg.tolerance, cfg.eps, cfg.n_e, res.loss)
