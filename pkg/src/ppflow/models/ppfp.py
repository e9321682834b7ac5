"""Latent-variable flow model.

A recurrent prior ``p(z_n | tau_{1:n-1})`` and posterior ``q(z_n | tau_{1:n})``
produce diagonal Gaussians over a latent code.  Two MLP decoders turn a code
into the mean and log-std of the flow's Gaussian base, so the marginal
density of a gap is a continuous mixture of flow densities.
"""

from __future__ import annotations

import math

import numpy as np

from ..diffkit import (
    LstmCellSpec,
    MlpSpec,
    ParameterStore,
    Tape,
    init_linear,
    init_lstm,
    init_mlp,
    linear,
    mlp_forward,
)
from ..diffkit import ops as T
from ..flow import CHUNK, inverse_with_logdet, log_density_nodes, transform
from .base import SequenceModel
from .common import (
    Batch,
    SampleCounts,
    clamp_log_std,
    encoder_features,
    gaussian_logpdf,
    kl_diag_nodes,
    mark_loglik_nodes,
    mode_lowest,
    run_lstm,
    sequence_key,
    stack_time,
)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


class PpfP(SequenceModel):
    kind = "ppfp"

    @property
    def encoder_spec(self) -> LstmCellSpec:
        return LstmCellSpec(1 + (self.cfg.num_categories or 0), self.cfg.hidden)

    @property
    def decoder_spec(self) -> MlpSpec:
        return MlpSpec(self.cfg.latent, self.cfg.decoder_hidden, 1)

    @property
    def mark_spec(self) -> MlpSpec:
        return MlpSpec(self.cfg.latent, self.cfg.decoder_hidden[:1], self.cfg.num_categories or 1)

    def _init_params(self, store: ParameterStore, rng) -> None:
        h, lat = self.cfg.hidden, self.cfg.latent
        init_lstm(store, self.encoder_spec, "prior_enc", rng)
        init_lstm(store, self.encoder_spec, "post_enc", rng)
        # zero output weights: prior and posterior both start at N(0, I), so KL = 0
        init_linear(store, h, 2 * lat, "prior_head", rng, scale=0.0)
        init_linear(store, h, 2 * lat, "post_head", rng, scale=0.0)
        init_mlp(store, self.decoder_spec, "dec_mu", rng)
        init_mlp(store, self.decoder_spec, "dec_ls", rng)
        self.flow.init(store, rng)
        if self.marked:
            init_mlp(store, self.mark_spec, "mark", rng)

    # --- encoders -------------------------------------------------------

    def _latent_params(self, tape, params, batch: Batch):
        lat, bound = self.cfg.latent, self.cfg.log_std_clamp
        feats = encoder_features(batch, self.omap, self.cfg.num_categories)
        prior_states = run_lstm(self.encoder_spec, params, "prior_enc", feats[:-1], tape)
        post_states = run_lstm(self.encoder_spec, params, "post_enc", feats, tape)[1:]
        ph = linear(params, "prior_head", stack_time(prior_states))
        qh = linear(params, "post_head", stack_time(post_states))
        return (ph[:, :lat], clamp_log_std(ph[:, lat:], bound),
                qh[:, :lat], clamp_log_std(qh[:, lat:], bound))

    def _decode(self, params, zv):
        mean = mlp_forward(self.decoder_spec, params, zv, "dec_mu")
        log_std = clamp_log_std(mlp_forward(self.decoder_spec, params, zv, "dec_ls"), self.cfg.log_std_clamp)
        return mean, log_std

    def objective(self, tape, params, batch: Batch, rng=None, eps=None, kl_weight: float = 1.0, **kw):
        """Per-event ELBO with one reparameterized draw and the closed-form KL."""
        mu_p, ls_p, mu_q, ls_q = self._latent_params(tape, params, batch)
        if eps is None:
            rng = np.random.default_rng() if rng is None else rng
            eps = rng.normal(size=mu_q.shape)
        zv = mu_q + T.exp(ls_q) * eps
        dec_mean, dec_ls = self._decode(params, zv)
        field = self.flow.field(params)
        recon = log_density_nodes(field, batch.taus.reshape(-1), dec_mean, dec_ls, self.cfg.integration, self.omap)
        extras = {"time": recon}
        if self.marked:
            ll_mark = mark_loglik_nodes(mlp_forward(self.mark_spec, params, zv, "mark"), batch.marks,
                                        self.cfg.num_categories)
            extras["mark"] = ll_mark
            recon = recon + ll_mark
        kl = kl_diag_nodes(mu_q, ls_q, mu_p, ls_p)
        extras["recon"] = recon
        extras["kl"] = kl
        return recon - kl * kl_weight, extras

    def elbo(self, batch: Batch, rng=None, eps=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(recon, kl, elbo)`` per event, each ``(T, B)``."""
        elbo, extras = self._eval_objective(batch, rng, eps=eps)
        return extras["recon"], extras["kl"], elbo

    # --- importance weighting ---------------------------------------------

    def latent_params(self, batch: Batch) -> tuple[np.ndarray, ...]:
        tape = Tape(record=False)
        return tuple(x.value for x in self._latent_params(tape, self.const_params(tape), batch))

    def flow_inverse(self, taus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(z0, log|d z0 / d tau|)`` for each value, including the output map Jacobian."""
        flat = np.asarray(taus, dtype=np.float64).reshape(-1)
        z0 = np.empty_like(flat)
        logdet = np.empty_like(flat)
        for lo in range(0, flat.size, CHUNK):
            part = flat[lo:lo + CHUNK]
            tape = Tape(record=False)
            field = self.flow.field(self.const_params(tape))
            z, ld = inverse_with_logdet(field, tape.const(self.omap.to_flow(part)[:, None]), self.cfg.integration)
            z0[lo:lo + CHUNK] = z.value[:, 0]
            logdet[lo:lo + CHUNK] = ld.value[:, 0] + self.omap.log_abs_det(part)
        return z0, logdet

    def decode(self, zv: np.ndarray, chunk: int = 32768) -> tuple[np.ndarray, np.ndarray]:
        """Base mean / log-std for rows of latent codes ``(..., L)``."""
        shape = zv.shape[:-1]
        flat = zv.reshape(-1, self.cfg.latent)
        mean = np.empty(flat.shape[0])
        log_std = np.empty(flat.shape[0])
        for lo in range(0, flat.shape[0], chunk):
            tape = Tape(record=False)
            params = {k: tape.const(self.store[k]) for k in self.store if k.startswith("dec_")}
            m, ls = self._decode(params, tape.const(flat[lo:lo + chunk]))
            mean[lo:lo + chunk] = m.value[:, 0]
            log_std[lo:lo + chunk] = ls.value[:, 0]
        return mean.reshape(shape), log_std.reshape(shape)

    def mark_logits(self, zv: np.ndarray, chunk: int = 32768) -> np.ndarray:
        shape = zv.shape[:-1]
        flat = zv.reshape(-1, self.cfg.latent)
        out = np.empty((flat.shape[0], self.cfg.num_categories))
        for lo in range(0, flat.shape[0], chunk):
            tape = Tape(record=False)
            params = {k: tape.const(self.store[k]) for k in self.store if k.startswith("mark.")}
            out[lo:lo + chunk] = mlp_forward(self.mark_spec, params, tape.const(flat[lo:lo + chunk]), "mark").value
        return out.reshape(shape + (self.cfg.num_categories,))

    def log_weights(self, batch: Batch, eps: np.ndarray, max_rows: int = 65536) -> np.ndarray:
        """``log p(tau|z) + log p(z) - log q(z)`` for posterior draws; eps is ``(T*B, K, L)``."""
        mu_p, ls_p, mu_q, ls_q = self.latent_params(batch)
        z0, logdet = self.flow_inverse(batch.taus)
        n, k, _ = eps.shape
        out = np.empty((n, k))
        step = max(1, max_rows // k)
        marks = None if batch.marks is None else batch.marks.reshape(-1)
        for lo in range(0, n, step):
            sl = slice(lo, lo + step)
            zv = mu_q[sl, None, :] + np.exp(ls_q[sl, None, :]) * eps[sl]
            dec_mean, dec_ls = self.decode(zv)
            log_lik = gaussian_logpdf(z0[sl, None], dec_mean, dec_ls) + logdet[sl, None]
            if self.marked:
                logits = self.mark_logits(zv)
                m = logits.max(axis=-1, keepdims=True)
                logp = logits - (m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)))
                log_lik = log_lik + np.take_along_axis(logp, marks[sl, None, None], axis=-1)[..., 0]
            log_prior = np.sum(gaussian_logpdf(zv, mu_p[sl, None, :], ls_p[sl, None, :]), axis=-1)
            log_post = np.sum(gaussian_logpdf(zv, mu_q[sl, None, :], ls_q[sl, None, :]), axis=-1)
            out[sl] = log_lik + log_prior - log_post
        return out

    def elbo_estimate(self, batch: Batch, eps: np.ndarray) -> np.ndarray:
        """Single-draw ELBO estimate ``(T, B)`` with a sampled KL term; eps is ``(T*B, L)``.

        Its expectation is the analytic-KL objective used for training.
        """
        return self.log_weights(batch, eps[:, None, :])[:, 0].reshape(batch.shape)

    def iwae_from_log_weights(self, lw: np.ndarray) -> np.ndarray:
        k = lw.shape[-1]
        return _logsumexp(lw, axis=-1) - math.log(k)

    def iwae(self, batch: Batch, k: int, rng: np.random.Generator | None = None, eps=None) -> np.ndarray:
        """Per-event IWAE bound ``(T, B)`` with ``k`` posterior samples."""
        if k < 1:
            raise ValueError("IWAE needs K >= 1")
        if eps is None:
            rng = np.random.default_rng() if rng is None else rng
            eps = rng.normal(size=(batch.taus.size, k, self.cfg.latent))
        return self.iwae_from_log_weights(self.log_weights(batch, eps)).reshape(batch.shape)

    def sequence_iwae(self, seq, k: int, seed: int = 0) -> np.ndarray:
        """Per-step IWAE for one sequence with its content-keyed draws."""
        batch = self.make_batch([seq])
        rng = sequence_key(seed, seq.id, stream=1)
        return self.iwae(batch, k, rng)[:, 0]

    # --- generation ---------------------------------------------------------

    def prior_draws(self, batch: Batch, n: int, rng) -> np.ndarray:
        mu_p, ls_p, _, _ = self.latent_params(batch)
        eps = rng.normal(size=(mu_p.shape[0], n, self.cfg.latent))
        return mu_p[:, None, :] + np.exp(ls_p)[:, None, :] * eps

    def predictive_samples(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        """Two-stage draws: ``counts.prior`` codes, then ``counts.decoder`` gaps per code."""
        zv = self.prior_draws(batch, counts.prior, rng)
        mean, log_std = self.decode(zv)
        z = mean[..., None] + np.exp(log_std)[..., None] * rng.normal(size=mean.shape + (counts.decoder,))
        taus = transform(z, self.flow, self.cfg.integration, self.omap)
        return taus.reshape(batch.shape + (counts.prior * counts.decoder,))

    def mark_predictions(self, batch: Batch, counts: SampleCounts, rng) -> np.ndarray:
        zv = self.prior_draws(batch, counts.prior, rng)
        votes = np.argmax(self.mark_logits(zv), axis=-1)
        return mode_lowest(votes, self.cfg.num_categories).reshape(batch.shape)
