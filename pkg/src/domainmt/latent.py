"""Discrete target-side domain: posterior, annealing, mixing and the regularised loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Batch
from .nets import ContractError, Seq2Seq
from .optim import Adam
from .tensor import Tensor

MODES = ("soft", "hard", "gumbel")


@dataclass
class AnnealSchedule:
    total_steps: int
    t_min: float = 1e-3
    p_hard: float = 0.25
    frozen: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.p_hard <= 1.0:
            raise ValueError(f"p_hard must be in [0, 1], got {self.p_hard}")

    def advance(self, step: int) -> float:
        """Temperature at ``step``; latches ``frozen`` once it hits zero."""
        t = temperature(step, self)
        if t == 0.0:
            self.frozen = True
        return t


def temperature(step: int, schedule: AnnealSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(0.0, 1.0 - step / schedule.total_steps)


def sample_mode(rng: np.random.Generator, schedule: AnnealSchedule) -> str:
    # exactly one draw per call, frozen or not
    x = rng.random()
    if schedule.frozen:
        return "hard"
    return "hard" if x < schedule.p_hard else "soft"


@dataclass
class DomainPosterior:
    p: Tensor  # B x N
    mode: str

    @property
    def probs(self) -> np.ndarray:
        return self.p.data


def domain_scores(h: Tensor, M: Tensor) -> Tensor:
    """s = h M^T, no bias."""
    if h.shape[-1] != M.shape[-1]:
        raise ContractError(f"latent width {h.shape[-1]} does not match score projection {M.shape}")
    return h @ T.transpose(M, (1, 0))


def one_hot(idx: np.ndarray, n: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(idx), n), dtype=dtype)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def domain_posterior(s: Tensor, temp: float, mode: str,
                     gumbel_rng: np.random.Generator | None = None) -> DomainPosterior:
    if mode == "hard":
        # np.argmax returns the lowest index on ties; constant, so no gradient flows back
        return DomainPosterior(Tensor(one_hot(np.argmax(s.data, axis=-1), s.shape[-1], s.dtype)), mode)
    if temp <= 0:
        raise ContractError(f"{mode} posterior needs a positive temperature, got {temp}")
    if mode == "soft":
        return DomainPosterior(T.softmax(s * (1.0 / temp), axis=-1), mode)
    if mode == "gumbel":
        if gumbel_rng is None:
            raise ContractError("gumbel mode needs an rng")
        g = -np.log(-np.log(gumbel_rng.uniform(1e-12, 1.0, size=s.shape)))
        return DomainPosterior(T.softmax((s + g.astype(s.dtype)) * (1.0 / temp), axis=-1), mode)
    raise ContractError(f"unknown posterior mode {mode!r}")


def mix_domain_embedding(E: Tensor, p: Tensor) -> Tensor:
    """e = E p per row of ``p``: (B x N) -> (B x d)."""
    if p.shape[-1] != E.shape[1]:
        raise ContractError(f"posterior over {p.shape[-1]} domains vs embeddings {E.shape}")
    return p @ T.transpose(E, (1, 0))


def entropy_regularizer(p: Tensor) -> Tensor:
    """Entropy of the batch-mean posterior, with 0 log 0 = 0."""
    if p.ndim != 2 or p.shape[0] < 1:
        raise ContractError(f"expected a non-empty B x N posterior batch, got {p.shape}")
    pbar = p.mean(axis=0)
    safe = np.where(pbar.data > 0, pbar.data, 1.0)
    logp = np.log(safe)
    val = -(pbar.data * logp).sum()

    def backward(g):
        # d/dq of -q log q; zero-mass entries get the finite limit of the clipped log
        T._accum(pbar, -(logp + 1.0) * g)

    return T._make(np.asarray(val, dtype=p.dtype), (pbar,), backward, "entropy")


def total_loss(nll, l_xe, lam: float):
    return nll - lam * l_xe


@dataclass
class LossReport:
    step: int
    nll: float
    l_xe: float
    loss: float
    mode: str
    temperature: float
    histogram: list[int] = field(default_factory=list)
    lr: float = 0.0
    decoder_forwards: int = 0

    def record(self) -> dict:
        return {
            "step": self.step, "nll": self.nll, "l_xe": self.l_xe, "loss": self.loss,
            "mode": self.mode, "T": self.temperature, "domain_histogram": self.histogram,
            "lr": self.lr, "decoder_forwards": self.decoder_forwards,
        }


def _check_finite(loss: Tensor, step: int, **parts) -> None:
    if not np.isfinite(loss.data):
        detail = ", ".join(f"{k}={float(v.data) if isinstance(v, Tensor) else v}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss at step {step}: {detail}")


def latent_input(model: Seq2Seq, batch: Batch) -> np.ndarray:
    return batch.tgt_full if model.latent_input == "target" else batch.src_with_start


def domain_forward(model: Seq2Seq, batch: Batch, temp: float, mode: str,
                   gumbel_rng: np.random.Generator | None = None):
    """Scores and posterior for a batch (the target-encoder half of a step)."""
    h = model.encode_target_latent(latent_input(model, batch))
    s = domain_scores(h, model.p("latent.M"))
    return s, domain_posterior(s, temp, mode, gumbel_rng)


def train_step(batch: Batch, model: Seq2Seq, schedule: AnnealSchedule, optimizer: Adam,
               step: int, mode_rng: np.random.Generator, lam: float = 0.1, gumbel: bool = False,
               regularize_hard_steps: bool = False) -> LossReport:
    """One forward, one backward and one Adam update of the target-encoder model.

    ``step`` counts from 0. Steps whose temperature is below ``t_min`` run in
    hard mode. With ``regularize_hard_steps`` the entropy term still sends
    gradient to the target encoder on hard steps (the decoder input stays
    one-hot either way).
    """
    model.train()
    optimizer.zero_grad()
    temp = schedule.advance(step)
    mode = sample_mode(mode_rng, schedule)
    if mode == "soft" and temp < schedule.t_min:
        mode = "hard"
    if mode == "soft" and gumbel:
        mode = "gumbel"
    N = model.config.n_domains
    s, post = domain_forward(model, batch, temp, mode, mode_rng if mode == "gumbel" else None)
    if mode == "hard":
        soft = T.softmax(s * (1.0 / max(temp, schedule.t_min)), axis=-1)
        if not regularize_hard_steps:
            soft = soft.detach()
        l_xe = entropy_regularizer(soft)
    else:
        l_xe = entropy_regularizer(post.p)
    e = mix_domain_embedding(model.p("dec.domain_emb"), post.p)
    enc = model.encode_source(batch.src, batch.src_mask)
    before = model.decoder_forwards
    logits = model.decode_teacher_forced(enc, e, batch.tgt_in)
    nll = T.cross_entropy(logits, batch.tgt_out, batch.tgt_mask)
    loss = total_loss(nll, l_xe, lam)
    _check_finite(loss, step, nll=nll, l_xe=l_xe)
    T.backward(loss)
    lr = optimizer.step()
    hist = np.bincount(np.argmax(s.data, axis=-1), minlength=N)
    return LossReport(step, float(nll.data), float(l_xe.data), float(loss.data), mode, temp,
                      hist.tolist(), lr, model.decoder_forwards - before)


def vanilla_step(batch: Batch, model: Seq2Seq, optimizer: Adam, step: int) -> LossReport:
    """Plain seq2seq step: the decoder starts from the start-symbol embedding."""
    model.train()
    optimizer.zero_grad()
    enc = model.encode_source(batch.src, batch.src_mask)
    before = model.decoder_forwards
    logits = model.decode_teacher_forced(enc, None, batch.tgt_in)
    nll = T.cross_entropy(logits, batch.tgt_out, batch.tgt_mask)
    _check_finite(nll, step, nll=nll)
    T.backward(nll)
    lr = optimizer.step()
    return LossReport(step, float(nll.data), 0.0, float(nll.data), "none", 0.0, [], lr,
                      model.decoder_forwards - before)


def assign_domains(model: Seq2Seq, batch: Batch) -> np.ndarray:
    """Argmax domain the target encoder picks for each pair (inference-style)."""
    model.eval()
    with T.no_grad():
        h = model.encode_target_latent(latent_input(model, batch))
        s = domain_scores(h, model.p("latent.M"))
    return np.argmax(s.data, axis=-1)
