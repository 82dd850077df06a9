"""Fused numeric kernels for the weight VAE and the MLP classifier.

The VAE parameters live in one flat float64 vector described by
:class:`VaeLayout`. Per-chunk training (batch size 1, tens of thousands of
steps per task) is the hot loop: :func:`vae_train_epoch` runs a whole epoch in
one numba call, or falls back to a vectorised numpy step per row when numba is
disabled. Batched ELBO evaluation (consolidation, auxiliary loss) and the MLP
are BLAS-bound and stay in numpy on both paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit, use_numba
from .autodiff import MASK_VALUE

_VAE_BLOCKS = ("enc_w1", "enc_b1", "enc_wm", "enc_bm", "enc_wv", "enc_bv",
               "dec_w1", "dec_b1", "dec_w2", "dec_b2", "prior_mu", "prior_lv")


@dataclass(frozen=True)
class VaeLayout:
    chunk: int      # C: chunk length
    cond: int       # Q: conditioning width (chunk code, plus task one-hot if enabled)
    hidden: int     # H
    latent: int     # L
    tasks: int      # T: rows of the prior maps

    def shapes(self) -> dict[str, tuple[int, ...]]:
        C, Q, H, L, T = self.chunk, self.cond, self.hidden, self.latent, self.tasks
        return {
            "enc_w1": (C + Q, H), "enc_b1": (H,),
            "enc_wm": (H, L), "enc_bm": (L,),
            "enc_wv": (H, L), "enc_bv": (L,),
            "dec_w1": (L + Q, H), "dec_b1": (H,),
            "dec_w2": (H, C), "dec_b2": (C,),
            "prior_mu": (T, L), "prior_lv": (T, L),
        }

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for name, shp in self.shapes().items():
            n = int(np.prod(shp))
            out[name] = (pos, pos + n)
            pos += n
        return out

    @property
    def size(self) -> int:
        return self.offsets()["prior_lv"][1]

    def views(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        shapes = self.shapes()
        return {k: theta[a:b].reshape(shapes[k]) for k, (a, b) in self.offsets().items()}

    def prior_slice(self) -> slice:
        offs = self.offsets()
        return slice(offs["prior_mu"][0], offs["prior_lv"][1])

    def offset_array(self) -> np.ndarray:
        offs = self.offsets()
        return np.array([offs[k][0] for k in _VAE_BLOCKS], dtype=np.int64)


# --------------------------------------------------------------------------
# batched numpy ELBO


def vae_encode(v: dict, x: np.ndarray, cond: np.ndarray):
    a1 = x @ v["enc_w1"][: x.shape[1]] + cond @ v["enc_w1"][x.shape[1]:] + v["enc_b1"]
    h = np.maximum(a1, 0.0)
    return h @ v["enc_wm"] + v["enc_bm"], h @ v["enc_wv"] + v["enc_bv"], a1, h


def vae_decode(v: dict, z: np.ndarray, cond: np.ndarray):
    L = z.shape[1]
    ad = z @ v["dec_w1"][:L] + cond @ v["dec_w1"][L:] + v["dec_b1"]
    hd = np.maximum(ad, 0.0)
    return hd @ v["dec_w2"] + v["dec_b2"], ad, hd


def kl_rows(mq, lq, mp, lp) -> np.ndarray:
    return np.sum(0.5 * (lp - lq) + (np.exp(lq) + (mq - mp) ** 2) / (2.0 * np.exp(lp)) - 0.5, axis=1)


def vae_elbo_batch(theta, layout: VaeLayout, x, cond, pm, plv, eps, prior_rows=None,
                   grad: np.ndarray | None = None, ext_dr: np.ndarray | None = None):
    """Summed negative ELBO over rows; accumulates d/dtheta into ``grad`` if given.

    ``pm``/``plv`` are per-row prior parameters. Rows with ``prior_rows[i] >= 0``
    send their prior gradient to that row of the prior maps; others treat the
    prior as a constant. ``ext_dr`` is an extra gradient on the decoder output
    (used by the auxiliary classification loss).
    Returns ``(loss, kl_per_row, rec_per_row, recon)``.
    """
    v = layout.views(theta)
    C = x.shape[1]
    L = layout.latent
    mq, lq, a1, h = vae_encode(v, x, cond)
    sd = np.exp(0.5 * lq)
    z = mq + sd * eps
    r, ad, hd = vae_decode(v, z, cond)
    diff = r - x
    rec = 0.5 * np.sum(diff * diff, axis=1)
    kl = kl_rows(mq, lq, pm, plv)
    loss = float(kl.sum() + rec.sum())
    if grad is None:
        return loss, kl, rec, r
    g = layout.views(grad)
    dr = diff if ext_dr is None else diff + ext_dr
    g["dec_b2"] += dr.sum(0)
    g["dec_w2"] += hd.T @ dr
    dad = (dr @ v["dec_w2"].T) * (ad > 0)
    g["dec_b1"] += dad.sum(0)
    g["dec_w1"][:L] += z.T @ dad
    g["dec_w1"][L:] += cond.T @ dad
    dz = dad @ v["dec_w1"][:L].T
    inv = np.exp(-plv)
    dm = mq - pm
    dmq = dz + dm * inv
    dlq = dz * 0.5 * sd * eps + 0.5 * np.exp(lq) * inv - 0.5
    g["enc_bm"] += dmq.sum(0)
    g["enc_wm"] += h.T @ dmq
    g["enc_bv"] += dlq.sum(0)
    g["enc_wv"] += h.T @ dlq
    da1 = (dmq @ v["enc_wm"].T + dlq @ v["enc_wv"].T) * (a1 > 0)
    g["enc_b1"] += da1.sum(0)
    g["enc_w1"][:C] += x.T @ da1
    g["enc_w1"][C:] += cond.T @ da1
    if prior_rows is not None:
        live = prior_rows >= 0
        if live.any():
            dpm = -dm * inv
            dplv = 0.5 - 0.5 * (np.exp(lq) + dm * dm) * inv
            np.add.at(g["prior_mu"], prior_rows[live], dpm[live])
            np.add.at(g["prior_lv"], prior_rows[live], dplv[live])
    return loss, kl, rec, r


# --------------------------------------------------------------------------
# per-chunk AdaGrad epoch


@njit(cache=True)
def _vae_epoch_nb(theta, acc, offs, C, Q, H, L, X, COND, rows, prow, eps,
                  fixed_pm, fixed_plv, lr, ada_eps, losses):
    o_ew1, o_eb1, o_ewm, o_ebm, o_ewv, o_ebv = offs[0], offs[1], offs[2], offs[3], offs[4], offs[5]
    o_dw1, o_db1, o_dw2, o_db2, o_pm, o_plv = offs[6], offs[7], offs[8], offs[9], offs[10], offs[11]
    grad = np.zeros(theta.size)
    a1 = np.empty(H)
    h = np.empty(H)
    dh = np.empty(H)
    ad = np.empty(H)
    hd = np.empty(H)
    dad = np.empty(H)
    mq = np.empty(L)
    lq = np.empty(L)
    pm = np.empty(L)
    plv = np.empty(L)
    sd = np.empty(L)
    z = np.empty(L)
    dz = np.empty(L)
    dmq = np.empty(L)
    dlq = np.empty(L)
    r = np.empty(C)
    for s in range(rows.size):
        grad[:] = 0.0
        i = rows[s]
        # encoder
        for j in range(H):
            a1[j] = theta[o_eb1 + j]
        for k in range(C):
            xk = X[i, k]
            if xk != 0.0:
                base = o_ew1 + k * H
                for j in range(H):
                    a1[j] += xk * theta[base + j]
        for k in range(Q):
            ck = COND[i, k]
            if ck != 0.0:
                base = o_ew1 + (C + k) * H
                for j in range(H):
                    a1[j] += ck * theta[base + j]
        for j in range(H):
            h[j] = a1[j] if a1[j] > 0.0 else 0.0
        for l in range(L):
            mq[l] = theta[o_ebm + l]
            lq[l] = theta[o_ebv + l]
        for j in range(H):
            if h[j] != 0.0:
                for l in range(L):
                    mq[l] += h[j] * theta[o_ewm + j * L + l]
                    lq[l] += h[j] * theta[o_ewv + j * L + l]
        t = prow[s]
        for l in range(L):
            if t >= 0:
                pm[l] = theta[o_pm + t * L + l]
                plv[l] = theta[o_plv + t * L + l]
            else:
                pm[l] = fixed_pm[l]
                plv[l] = fixed_plv[l]
            sd[l] = np.exp(0.5 * lq[l])
            z[l] = mq[l] + sd[l] * eps[s, l]
        # decoder
        for j in range(H):
            ad[j] = theta[o_db1 + j]
        for l in range(L):
            base = o_dw1 + l * H
            for j in range(H):
                ad[j] += z[l] * theta[base + j]
        for k in range(Q):
            ck = COND[i, k]
            if ck != 0.0:
                base = o_dw1 + (L + k) * H
                for j in range(H):
                    ad[j] += ck * theta[base + j]
        for j in range(H):
            hd[j] = ad[j] if ad[j] > 0.0 else 0.0
        for m in range(C):
            r[m] = theta[o_db2 + m]
        for j in range(H):
            hj = hd[j]
            if hj != 0.0:
                base = o_dw2 + j * C
                for m in range(C):
                    r[m] += hj * theta[base + m]
        # loss
        kl = 0.0
        for l in range(L):
            dm = mq[l] - pm[l]
            kl += 0.5 * (plv[l] - lq[l]) + (np.exp(lq[l]) + dm * dm) / (2.0 * np.exp(plv[l])) - 0.5
        rec = 0.0
        for m in range(C):
            r[m] -= X[i, m]          # r now holds d(rec)/dr
            rec += 0.5 * r[m] * r[m]
        losses[s] = kl + rec
        # backward: decoder
        for m in range(C):
            grad[o_db2 + m] += r[m]
        for j in range(H):
            acc_h = 0.0
            base = o_dw2 + j * C
            hj = hd[j]
            for m in range(C):
                acc_h += theta[base + m] * r[m]
                if hj != 0.0:
                    grad[base + m] += hj * r[m]
            dh[j] = acc_h
        for j in range(H):
            dad[j] = dh[j] if ad[j] > 0.0 else 0.0
            grad[o_db1 + j] += dad[j]
        for l in range(L):
            base = o_dw1 + l * H
            acc_z = 0.0
            for j in range(H):
                grad[base + j] += z[l] * dad[j]
                acc_z += theta[base + j] * dad[j]
            dz[l] = acc_z
        for k in range(Q):
            ck = COND[i, k]
            if ck != 0.0:
                base = o_dw1 + (L + k) * H
                for j in range(H):
                    grad[base + j] += ck * dad[j]
        # reparameterisation + KL
        for l in range(L):
            inv = np.exp(-plv[l])
            dm = mq[l] - pm[l]
            elq = np.exp(lq[l])
            dmq[l] = dz[l] + dm * inv
            dlq[l] = dz[l] * 0.5 * sd[l] * eps[s, l] + 0.5 * elq * inv - 0.5
            if t >= 0:
                grad[o_pm + t * L + l] += -dm * inv
                grad[o_plv + t * L + l] += 0.5 - 0.5 * (elq + dm * dm) * inv
            grad[o_ebm + l] += dmq[l]
            grad[o_ebv + l] += dlq[l]
        # encoder
        for j in range(H):
            acc_h = 0.0
            for l in range(L):
                grad[o_ewm + j * L + l] += h[j] * dmq[l]
                grad[o_ewv + j * L + l] += h[j] * dlq[l]
                acc_h += theta[o_ewm + j * L + l] * dmq[l] + theta[o_ewv + j * L + l] * dlq[l]
            dh[j] = acc_h if a1[j] > 0.0 else 0.0
            grad[o_eb1 + j] += dh[j]
        for k in range(C):
            xk = X[i, k]
            if xk != 0.0:
                base = o_ew1 + k * H
                for j in range(H):
                    grad[base + j] += xk * dh[j]
        for k in range(Q):
            ck = COND[i, k]
            if ck != 0.0:
                base = o_ew1 + (C + k) * H
                for j in range(H):
                    grad[base + j] += ck * dh[j]
        # AdaGrad; zero-gradient coordinates are untouched, as in the dense update
        for p in range(theta.size):
            g = grad[p]
            if g != 0.0:
                acc[p] += g * g
                theta[p] -= lr * g / (np.sqrt(acc[p]) + ada_eps)


def vae_train_epoch(theta: np.ndarray, acc: np.ndarray, layout: VaeLayout, X: np.ndarray,
                    COND: np.ndarray, rows: np.ndarray, prior_rows: np.ndarray, eps: np.ndarray,
                    lr: float, ada_eps: float = 1e-10, fixed_prior=None, force_numpy: bool = False) -> np.ndarray:
    """One AdaGrad step per entry of ``rows`` (batch size 1). Returns per-step losses.

    ``prior_rows[s]`` is the task whose learned prior row is used (and trained)
    at step ``s``; ``-1`` uses ``fixed_prior = (mean, log_var)`` instead.
    """
    L = layout.latent
    fpm, fplv = (np.zeros(L), np.zeros(L)) if fixed_prior is None else map(np.asarray, fixed_prior)
    fpm, fplv = np.ascontiguousarray(fpm, dtype=np.float64), np.ascontiguousarray(fplv, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    prior_rows = np.ascontiguousarray(prior_rows, dtype=np.int64)
    losses = np.empty(rows.size)
    if use_numba() and not force_numpy:
        _vae_epoch_nb(theta, acc, layout.offset_array(), layout.chunk, layout.cond, layout.hidden, L,
                      X, COND, rows, prior_rows, np.ascontiguousarray(eps), fpm, fplv, lr, ada_eps, losses)
        return losses
    v = layout.views(theta)
    grad = np.zeros_like(theta)
    for s, i in enumerate(rows):
        grad[:] = 0.0
        t = prior_rows[s]
        if t >= 0:
            pm, plv = v["prior_mu"][t:t + 1].copy(), v["prior_lv"][t:t + 1].copy()
        else:
            pm, plv = fpm[None, :], fplv[None, :]
        losses[s], *_ = vae_elbo_batch(theta, layout, X[i:i + 1], COND[i:i + 1], pm, plv,
                                       eps[s:s + 1], prior_rows=prior_rows[s:s + 1], grad=grad)
        acc += grad * grad
        theta -= lr * grad / (np.sqrt(acc) + ada_eps)
    return losses


# --------------------------------------------------------------------------
# MLP classifier


def mlp_forward(layers, x: np.ndarray):
    """Logits and cached activations. ``layers`` is ``[(W, b), ...]`` with W as (in, out)."""
    acts = [x]
    h = x
    for li, (w, b) in enumerate(layers):
        h = h @ w + b
        if li < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mask_logits(logits: np.ndarray, seen: np.ndarray | None) -> np.ndarray:
    if seen is None:
        return logits
    return np.where(np.asarray(seen, dtype=bool)[None, :], logits, MASK_VALUE)


def masked_xent_grad(logits: np.ndarray, y: np.ndarray, seen) -> tuple[float, np.ndarray]:
    z = mask_logits(logits, seen)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(np.log(p[np.arange(n), y] + 1e-300)))
    p[np.arange(n), y] -= 1.0
    return loss, p / n


def mlp_loss_grad(layers, grads, x, y, seen) -> float:
    """Mean masked cross-entropy; writes per-layer gradients into ``grads`` (same structure)."""
    logits, acts = mlp_forward(layers, x)
    loss, d = masked_xent_grad(logits, y, seen)
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        gw, gb = grads[li]
        gw[...] = acts[li].T @ d
        gb[...] = d.sum(axis=0)
        if li > 0:
            d = (d @ w.T) * (acts[li] > 0)
    return loss

