"""Tiny compound model and a quadrature oracle for log p(x) with a 1-dim latent."""
import math
import warnings

import numpy as np
from scipy import integrate

from grammar_induction.chart import inside_batch
from grammar_induction.grammar import GrammarSpec
from grammar_induction.model import PCFGModel


def tiny_compound(seed=0, N=2, P=2, V=3, D=4, Z=1, H=3, scale=1.0):
    rng = np.random.default_rng(seed)
    model = PCFGModel.initialize("compound", GrammarSpec(N, P, V, D, Z), rng, encoder_embed_dim=3,
                                 encoder_hidden=H)
    r = np.random.default_rng(seed + 1000)
    for _, t in model.named_parameters():
        t.data[...] = r.normal(size=t.shape) * scale
    return model


def log_conditional(model, words, zs):
    """log p(x | z) for each row of zs (K, 1)."""
    zs = np.asarray(zs, dtype=float).reshape(-1, model.spec.z_dim)
    batch = np.repeat(np.asarray(words)[None, :], len(zs), axis=0)
    return inside_batch(batch, model.rules(zs)).data


def quadrature_log_marginal(model, words, lo=-12.0, hi=12.0):
    """log of the integral of p(x|z) N(z; 0, 1) dz by adaptive Gauss-Kronrod quadrature.

    The integrand has kinks (ReLU layers), so a fixed Gauss-Hermite rule converges slowly.
    """
    grid = np.linspace(lo, hi, 241)
    shift = float(np.max(log_conditional(model, words, grid) - 0.5 * grid * grid))

    def f(z):
        return math.exp(log_conditional(model, words, [z])[0] - 0.5 * z * z - shift)

    with warnings.catch_warnings():
        # roundoff warnings near the requested 1e-9; the trapezoid route cross-checks the value
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, lo, hi, limit=500, epsabs=0, epsrel=1e-9)
    return shift + math.log(val) - 0.5 * math.log(2 * math.pi)


def trapezoid_log_marginal(model, words, lo=-12.0, hi=12.0, n=4001):
    """Second route: dense trapezoid rule on a uniform grid."""
    z = np.linspace(lo, hi, n)
    lc = log_conditional(model, words, z) - 0.5 * z * z - 0.5 * math.log(2 * math.pi)
    m = lc.max()
    return float(m + math.log(np.trapezoid(np.exp(lc - m), z)))


def posterior_moments(model, words, lo=-12.0, hi=12.0, n=16001):
    """Mean and variance of the exact p(z | x) on a dense grid."""
    z = np.linspace(lo, hi, n)
    lc = log_conditional(model, words, z) - 0.5 * z * z
    w = np.exp(lc - lc.max())
    w /= np.trapezoid(w, z)
    mean = float(np.trapezoid(w * z, z))
    return mean, float(np.trapezoid(w * (z - mean) ** 2, z))


def set_posterior(model, mean, variance):
    """Make the encoder output a fixed Gaussian for every sentence."""
    model.encoder["head.W"].data[...] = 0.0
    model.encoder["head.b"].data[...] = [mean, math.log(variance)]
