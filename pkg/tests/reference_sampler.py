"""Independent dense Gibbs sampler for the plain (single-group) factor model.

Written element by element from the model definition, sharing no code with
the package.  Used as an oracle for the coupled sampler at g=1, rho=1.
"""

import numpy as np


def reference_gibbs(y, k, sweeps, burn_in, thin, seed, nu=3.0, a1=2.1, a2=3.1, a_sigma=1.0, b_sigma=0.3):
    """Return the retained draws of the implied covariance, shape (draws, p, p)."""
    rng = np.random.default_rng(seed)
    n, p = y.shape
    lam = np.zeros((p, k))
    sig2 = y.var(axis=0)
    phi = np.ones((p, k))
    delta = np.ones(k)
    draws = []
    for t in range(1, sweeps + 1):
        tau = np.array([np.prod(delta[:h + 1]) for h in range(k)])
        # factors: eta_i ~ N(V lam' Om^-1 y_i, V), V = (I + lam' Om^-1 lam)^-1
        prec = np.eye(k) + lam.T @ np.diag(1.0 / sig2) @ lam
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        eta = np.empty((n, k))
        for i in range(n):
            mean = cov @ lam.T @ np.diag(1.0 / sig2) @ y[i]
            eta[i] = rng.multivariate_normal(mean, cov)
        # loadings rows
        for j in range(p):
            prec_j = np.diag(phi[j] * tau) + eta.T @ eta / sig2[j]
            cov_j = np.linalg.inv(prec_j)
            cov_j = 0.5 * (cov_j + cov_j.T)
            lam[j] = rng.multivariate_normal(cov_j @ eta.T @ y[:, j] / sig2[j], cov_j)
        # local precisions
        for j in range(p):
            for h in range(k):
                phi[j, h] = rng.gamma(nu / 2 + 1.0, 1.0 / ((nu + tau[h] * lam[j, h] ** 2) / 2))
        # column multipliers, one at a time
        for h in range(k):
            rate = 1.0
            for l in range(h, k):
                tau_wo = np.prod([delta[t2] for t2 in range(l + 1) if t2 != h])
                rate += 0.5 * tau_wo * np.sum(phi[:, l] * lam[:, l] ** 2)
            shape = (a1 if h == 0 else a2) + 0.5 * p * (k - h)
            delta[h] = rng.gamma(shape, 1.0 / rate)
        # noise
        for j in range(p):
            rss = np.sum((y[:, j] - eta @ lam[j]) ** 2)
            sig2[j] = 1.0 / rng.gamma(a_sigma + n / 2, 1.0 / (b_sigma + rss / 2))
        if t > burn_in and (t - burn_in) % thin == 0:
            draws.append(lam @ lam.T + np.diag(sig2))
    return np.array(draws)
