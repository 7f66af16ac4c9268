"""Hard-EM mixture-of-experts baseline with shared parameters.

The E-step scores every target under each of the N domain embeddings (N
teacher-forced decoder passes, no gradient) and keeps the most likely domain;
the M-step trains on that assignment.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .corpus import Batch
from .latent import LossReport, _check_finite
from .nets import Seq2Seq
from .optim import Adam


def sentence_logprobs(model: Seq2Seq, batch: Batch, enc, k: int) -> np.ndarray:
    """Summed target log-probability of every pair under domain ``k``."""
    B = batch.size
    logits = model.decode_teacher_forced(enc, model.domain_embedding(np.full(B, k)), batch.tgt_in).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    tok = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    return (tok * batch.tgt_mask).sum(axis=1)


def score_all_domains(model: Seq2Seq, batch: Batch) -> np.ndarray:
    """N x B matrix of sentence log-likelihoods (eval mode, no graph)."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            enc = model.encode_source(batch.src, batch.src_mask)
            return np.stack([sentence_logprobs(model, batch, enc, k) for k in range(model.config.n_domains)])
    finally:
        model.training = was_training


def moe_e_step(batch: Batch, model: Seq2Seq) -> np.ndarray:
    """Most likely domain per pair; ties go to the lowest index."""
    return np.argmax(score_all_domains(model, batch), axis=0)


def moe_m_step(batch: Batch, assignment: np.ndarray, model: Seq2Seq, optimizer: Adam, step: int) -> LossReport:
    model.train()
    optimizer.zero_grad()
    enc = model.encode_source(batch.src, batch.src_mask)
    logits = model.decode_teacher_forced(enc, model.domain_embedding(assignment), batch.tgt_in)
    nll = T.cross_entropy(logits, batch.tgt_out, batch.tgt_mask)
    _check_finite(nll, step, nll=nll)
    T.backward(nll)
    lr = optimizer.step()
    hist = np.bincount(assignment, minlength=model.config.n_domains).tolist()
    return LossReport(step, float(nll.data), 0.0, float(nll.data), "em", 0.0, hist, lr)


def moe_train_step(batch: Batch, model: Seq2Seq, optimizer: Adam, step: int) -> LossReport:
    before = model.decoder_forwards
    assignment = moe_e_step(batch, model)
    report = moe_m_step(batch, assignment, model, optimizer, step)
    report.decoder_forwards = model.decoder_forwards - before
    return report
