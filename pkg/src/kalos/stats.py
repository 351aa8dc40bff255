"""Statistical estimation and hypothesis-testing primitives.

Fitters are deterministic for fixed input and seed. Each parametric family
comes with a plain dataclass carrying the fitted parameters so results can
be serialized into the noise-model file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats as sps

TWO_PI = 2.0 * math.pi

NU_MAX = 200.0
WINSOR_Q_LO = 0.001
WINSOR_Q_HI = 0.999


class FitError(ValueError):
    """Raised on degenerate input that cannot support the requested fit."""


# ---------------------------------------------------------------------------
# Student's t


@dataclass
class StudentTFit:
    nu: float
    mu: float
    sigma: float
    loglik: float
    ks_gof: float
    converged: bool = True

    def pdf(self, x):
        return sps.t.pdf(x, df=self.nu, loc=self.mu, scale=self.sigma)

    def logpdf(self, x):
        return sps.t.logpdf(x, df=self.nu, loc=self.mu, scale=self.sigma)

    def ppf(self, q: float) -> float:
        return float(sps.t.ppf(q, df=self.nu, loc=self.mu, scale=self.sigma))

    def sample(self, rng: np.random.Generator, size: int):
        return self.mu + self.sigma * rng.standard_t(self.nu, size=size)

    def to_dict(self) -> dict:
        return {"nu": self.nu, "mu": self.mu, "sigma": self.sigma, "loglik": self.loglik,
                "ks_gof": self.ks_gof, "converged": self.converged}

    @classmethod
    def from_dict(cls, d: dict) -> "StudentTFit":
        return cls(**d)


def _t_nll(params: np.ndarray, x: np.ndarray) -> float:
    nu, mu, sigma = params
    if sigma <= 0 or nu <= 0:
        return np.inf
    return -float(np.sum(sps.t.logpdf(x, df=nu, loc=mu, scale=sigma)))


def fit_student_t(samples) -> StudentTFit:
    """Maximum-likelihood Student's t fit with nu bounded to [1, 200]."""
    x = np.asarray(samples, dtype=float)
    if x.size < 20:
        raise FitError(f"need at least 20 samples for a t fit, got {x.size}")
    if np.ptp(x) < 1e-12:
        raise FitError("degenerate (constant) samples")
    mu0 = float(np.median(x))
    sigma0 = max(float(np.std(x)) * 0.8, 1e-9)
    best = None
    for nu0 in (5.0, 2.0, 30.0):
        res = optimize.minimize(
            _t_nll,
            x0=np.array([nu0, mu0, sigma0]),
            args=(x,),
            method="L-BFGS-B",
            bounds=[(1.0, NU_MAX), (None, None), (1e-12, None)],
        )
        if best is None or res.fun < best.fun:
            best = res
    nu, mu, sigma = best.x
    ks = float(sps.kstest(x, lambda v: sps.t.cdf(v, df=nu, loc=mu, scale=sigma)).statistic)
    return StudentTFit(nu=float(nu), mu=float(mu), sigma=float(sigma),
                       loglik=-float(best.fun), ks_gof=ks, converged=bool(best.success))


def normal_loglik(samples) -> float:
    """Gaussian MLE log-likelihood, the comparison baseline for heavy tails."""
    x = np.asarray(samples, dtype=float)
    sigma = max(float(np.std(x)), 1e-12)
    return float(np.sum(sps.norm.logpdf(x, loc=float(np.mean(x)), scale=sigma)))


# ---------------------------------------------------------------------------
# Linear trend with Student's t residuals


@dataclass
class LinearTModel:
    intercept: float
    slope: float
    residual: StudentTFit
    winsor_lo: float
    winsor_hi: float
    q_lo: float = WINSOR_Q_LO
    q_hi: float = WINSOR_Q_HI
    degenerate: bool = False

    def predict(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)

    def sample_residual(self, rng: np.random.Generator, size: int = 1, lam: float = 1.0):
        draw = self.residual.sample(rng, size)
        return np.clip(draw, self.winsor_lo, self.winsor_hi) * lam

    def residual_pdf(self, r):
        return self.residual.pdf(r)

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "slope": self.slope,
                "residual": self.residual.to_dict(), "winsor_lo": self.winsor_lo,
                "winsor_hi": self.winsor_hi, "q_lo": self.q_lo, "q_hi": self.q_hi,
                "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearTModel":
        d = dict(d)
        d["residual"] = StudentTFit.from_dict(d["residual"])
        return cls(**d)


def linear_t_from_params(intercept: float, slope: float, nu: float, sigma: float,
                         mu: float = 0.0) -> LinearTModel:
    """Build a LinearTModel directly from known parameters (no fitting)."""
    resid = StudentTFit(nu=nu, mu=mu, sigma=sigma, loglik=0.0, ks_gof=0.0)
    return LinearTModel(intercept=intercept, slope=slope, residual=resid,
                        winsor_lo=resid.ppf(WINSOR_Q_LO), winsor_hi=resid.ppf(WINSOR_Q_HI))


def fit_linear_t(x, y) -> LinearTModel:
    """Least-squares trend, then a Student's t fit on the residuals."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.size != ya.size:
        raise FitError("x and y must have equal length")
    if xa.size < 20:
        raise FitError(f"need at least 20 observations, got {xa.size}")
    if np.ptp(xa) < 1e-12:
        raise FitError("constant predictor")
    slope, intercept = np.polyfit(xa, ya, 1)
    resid = ya - (intercept + slope * xa)
    if np.ptp(resid) < 1e-12:
        t = StudentTFit(nu=NU_MAX, mu=0.0, sigma=1e-12, loglik=float("inf"), ks_gof=0.0)
        return LinearTModel(intercept=float(intercept), slope=float(slope), residual=t,
                            winsor_lo=0.0, winsor_hi=0.0, degenerate=True)
    t = fit_student_t(resid)
    return LinearTModel(
        intercept=float(intercept),
        slope=float(slope),
        residual=t,
        winsor_lo=t.ppf(WINSOR_Q_LO),
        winsor_hi=t.ppf(WINSOR_Q_HI),
    )


# ---------------------------------------------------------------------------
# von Mises mixtures

CARDINAL_MEANS = (0.0, math.pi / 2.0, math.pi, 3.0 * math.pi / 2.0)


def _vm_logpdf(theta, mu, kappa):
    # log I0 via the exponentially scaled Bessel function to avoid overflow.
    log_i0 = np.log(special.ive(0, kappa)) + kappa
    return kappa * np.cos(theta - mu) - math.log(TWO_PI) - log_i0


def _kappa_from_r(r: float) -> float:
    """Invert A(kappa) = I1/I0 with the usual piecewise approximation."""
    r = min(max(r, 1e-8), 1.0 - 1e-8)
    if r < 0.53:
        k = 2 * r + r**3 + 5 * r**5 / 6
    elif r < 0.85:
        k = -0.4 + 1.39 * r + 0.43 / (1 - r)
    else:
        k = 1.0 / (r**3 - 4 * r**2 + 3 * r)
    return float(min(max(k, 1e-3), 1e6))


@dataclass
class VonMisesMixture:
    mode: str  # axis_centered | unimodal_doubled | free_k
    means: tuple[float, ...]
    kappas: tuple[float, ...]
    weights: tuple[float, ...]
    loglik: float
    aic: float
    n: int
    converged: bool = True

    def n_params(self) -> int:
        k = len(self.means)
        if self.mode == "axis_centered":
            return 2 * k - 1
        if self.mode == "unimodal_doubled":
            return 2
        return 3 * k - 1

    def logpdf(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.mode == "unimodal_doubled":
            return _vm_logpdf(np.mod(2.0 * theta, TWO_PI), self.means[0], self.kappas[0])
        parts = [math.log(max(w, 1e-300)) + _vm_logpdf(theta, m, k)
                 for m, k, w in zip(self.means, self.kappas, self.weights)]
        return special.logsumexp(np.stack(parts, axis=0), axis=0)

    def pdf(self, theta):
        return np.exp(self.logpdf(theta))

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        if self.mode == "unimodal_doubled":
            psi = rng.vonmises(self.means[0], self.kappas[0], size=size)
            theta = np.mod(psi, TWO_PI) / 2.0
            theta = theta + np.where(rng.random(size) < 0.5, 0.0, math.pi)
            return np.mod(theta, TWO_PI)
        comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        out = np.empty(size)
        for k in range(len(self.weights)):
            mask = comp == k
            if mask.any():
                out[mask] = rng.vonmises(self.means[k], self.kappas[k], size=int(mask.sum()))
        return np.mod(out, TWO_PI)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "means": list(self.means), "kappas": list(self.kappas),
                "weights": list(self.weights), "loglik": self.loglik, "aic": self.aic,
                "n": self.n, "converged": self.converged}

    @classmethod
    def from_dict(cls, d: dict) -> "VonMisesMixture":
        d = dict(d)
        for key in ("means", "kappas", "weights"):
            d[key] = tuple(d[key])
        return cls(**d)


def vonmises_mixture_from_params(mode: str, means, kappas, weights) -> VonMisesMixture:
    weights = tuple(float(w) for w in weights)
    total = sum(weights)
    weights = tuple(w / total for w in weights)
    return VonMisesMixture(mode=mode, means=tuple(float(m) for m in means),
                           kappas=tuple(float(k) for k in kappas), weights=weights,
                           loglik=0.0, aic=0.0, n=0)


def _em_vonmises(theta: np.ndarray, means: np.ndarray, free_means: bool, rng: np.random.Generator,
                 max_iter: int = 500, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, bool]:
    k = len(means)
    n = theta.size
    means = means.copy()
    kappas = rng.uniform(0.5, 4.0, size=k)
    weights = rng.dirichlet(np.ones(k))
    prev = -np.inf
    converged = False
    for _ in range(max_iter):
        logp = np.stack([np.log(np.maximum(weights[j], 1e-300)) + _vm_logpdf(theta, means[j], kappas[j])
                         for j in range(k)], axis=0)
        norm = special.logsumexp(logp, axis=0)
        loglik = float(np.sum(norm))
        gamma = np.exp(logp - norm[None, :])
        nk = gamma.sum(axis=1)
        weights = np.maximum(nk / n, 1e-12)
        weights = weights / weights.sum()
        for j in range(k):
            if nk[j] < 1e-12:
                kappas[j] = 1e-3
                continue
            c = float(np.sum(gamma[j] * np.cos(theta - means[j])) / nk[j]) if not free_means else 0.0
            if free_means:
                sx = float(np.sum(gamma[j] * np.cos(theta)))
                sy = float(np.sum(gamma[j] * np.sin(theta)))
                means[j] = math.atan2(sy, sx) % TWO_PI
                c = math.hypot(sx, sy) / nk[j]
            kappas[j] = _kappa_from_r(c)
        if abs(loglik - prev) < tol * max(1.0, abs(loglik)):
            converged = True
            prev = loglik
            break
        prev = loglik
    return means, kappas, weights, prev, converged


def fit_vonmises_mixture(angles, mode: str = "axis_centered", n_components: int = 4,
                         n_restarts: int = 5, seed: int = 0) -> VonMisesMixture:
    """Fit a von Mises mixture by EM (or closed form for the doubled-angle model).

    ``axis_centered`` fixes component means to the four cardinal directions;
    ``unimodal_doubled`` fits a single component on doubled angles (an axial,
    bimodal density on the original circle); ``free_k`` lets EM move the means.
    """
    theta = np.mod(np.asarray(angles, dtype=float), TWO_PI)
    if theta.size < 50:
        raise FitError(f"need at least 50 angles, got {theta.size}")

    if mode == "unimodal_doubled":
        psi = np.mod(2.0 * theta, TWO_PI)
        sx, sy = float(np.sum(np.cos(psi))), float(np.sum(np.sin(psi)))
        mu = math.atan2(sy, sx) % TWO_PI
        kappa = _kappa_from_r(math.hypot(sx, sy) / psi.size)
        loglik = float(np.sum(_vm_logpdf(psi, mu, kappa)))
        fit = VonMisesMixture(mode=mode, means=(mu,), kappas=(kappa,), weights=(1.0,),
                              loglik=loglik, aic=0.0, n=int(theta.size))
        fit.aic = aic(loglik, fit.n_params())
        return fit

    if mode == "axis_centered":
        means0 = np.asarray(CARDINAL_MEANS)
        free = False
    elif mode == "free_k":
        means0 = np.linspace(0.0, TWO_PI, n_components, endpoint=False)
        free = True
    else:
        raise FitError(f"unknown mixture mode {mode!r}")

    best = None
    for restart in range(n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, restart]))
        means, kappas, weights, loglik, conv = _em_vonmises(theta, means0, free, rng)
        if best is None or loglik > best[3]:
            best = (means, kappas, weights, loglik, conv)
    means, kappas, weights, loglik, conv = best
    fit = VonMisesMixture(mode=mode, means=tuple(float(m) for m in means),
                          kappas=tuple(float(k) for k in kappas),
                          weights=tuple(float(w) for w in weights),
                          loglik=float(loglik), aic=0.0, n=int(theta.size), converged=bool(conv))
    fit.aic = aic(fit.loglik, fit.n_params())
    return fit


# ---------------------------------------------------------------------------
# Beta


@dataclass
class BetaFit:
    alpha: float
    beta: float
    loglik: float
    boundary: bool = False

    def pdf(self, x):
        return sps.beta.pdf(x, self.alpha, self.beta)

    def sample(self, rng: np.random.Generator, size: int = 1):
        return rng.beta(self.alpha, self.beta, size=size)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "loglik": self.loglik,
                "boundary": self.boundary}

    @classmethod
    def from_dict(cls, d: dict) -> "BetaFit":
        return cls(**d)


def fit_beta(samples) -> BetaFit:
    """Maximum-likelihood Beta fit on samples clamped into the open unit interval.

    Mass piled against an endpoint comes back as a sharply concentrated fit
    flagged ``boundary``; constant interior samples are degenerate.
    """
    x = np.clip(np.asarray(samples, dtype=float), 1e-6, 1.0 - 1e-6)
    if x.size < 20:
        raise FitError(f"need at least 20 samples, got {x.size}")
    if np.ptp(x) < 1e-9:
        m = float(np.mean(x))
        if min(m, 1.0 - m) > 0.01:
            raise FitError("degenerate (constant) samples")
        conc = 1e6
        return BetaFit(alpha=m * conc, beta=(1.0 - m) * conc, loglik=float("inf"),
                       boundary=True)
    a, b, _, _ = sps.beta.fit(x, floc=0.0, fscale=1.0)
    loglik = float(np.sum(sps.beta.logpdf(x, a, b)))
    return BetaFit(alpha=float(a), beta=float(b), loglik=loglik)


# ---------------------------------------------------------------------------
# Logistic / Poisson regression (single scalar predictor)

COEF_CAP = 20.0


@dataclass
class LogisticModel:
    intercept: float
    slope: float
    separation: bool = False

    def prob(self, x):
        z = self.intercept + self.slope * np.asarray(x, dtype=float)
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "slope": self.slope, "separation": self.separation}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(**d)


@dataclass
class PoissonModel:
    intercept: float
    slope: float
    loglik: float = 0.0

    def rate(self, x):
        z = self.intercept + self.slope * np.asarray(x, dtype=float)
        return np.exp(np.clip(z, -500, 50))

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "slope": self.slope, "loglik": self.loglik}

    @classmethod
    def from_dict(cls, d: dict) -> "PoissonModel":
        return cls(**d)


def _irls(x: np.ndarray, y: np.ndarray, kind: str, max_iter: int = 100,
          tol: float = 1e-8) -> tuple[np.ndarray, bool]:
    X = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    for _ in range(max_iter):
        eta = np.clip(X @ beta, -500, 500)
        if kind == "logistic":
            mu = 1.0 / (1.0 + np.exp(-eta))
            w = np.maximum(mu * (1.0 - mu), 1e-12)
        else:
            mu = np.exp(np.clip(eta, -500, 50))
            w = np.maximum(mu, 1e-12)
        grad = X.T @ (y - mu)
        if float(np.linalg.norm(grad)) < tol:
            return beta, True
        hess = X.T @ (w[:, None] * X)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(beta)) > COEF_CAP * 5:
            return np.clip(beta, -COEF_CAP, COEF_CAP), False
    return beta, False


def fit_logistic(x, labels) -> LogisticModel:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(labels, dtype=float)
    if xa.size != ya.size or xa.size < 20:
        raise FitError("need at least 20 paired observations")
    if len(np.unique(ya)) < 2:
        raise FitError("both label values must be present")
    beta, converged = _irls(xa, ya, "logistic")
    separation = not converged or np.max(np.abs(beta)) >= COEF_CAP
    beta = np.clip(beta, -COEF_CAP, COEF_CAP)
    return LogisticModel(intercept=float(beta[0]), slope=float(beta[1]), separation=bool(separation))


def fit_poisson(x, counts) -> PoissonModel:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(counts, dtype=float)
    if xa.size != ya.size or xa.size < 20:
        raise FitError("need at least 20 paired observations")
    beta, _ = _irls(xa, ya, "poisson")
    mu = np.exp(np.clip(beta[0] + beta[1] * xa, -500, 50))
    loglik = float(np.sum(ya * np.log(np.maximum(mu, 1e-300)) - mu - special.gammaln(ya + 1)))
    return PoissonModel(intercept=float(beta[0]), slope=float(beta[1]), loglik=loglik)


# ---------------------------------------------------------------------------
# Model comparison and hypothesis tests


def aic(loglik: float, k_params: int) -> float:
    return 2.0 * k_params - 2.0 * loglik


def circular_uniformity(angles) -> tuple[float, float, float]:
    """Rayleigh mean resultant + p-value and the Kuiper V statistic.

    Rayleigh tests unimodal departure from circular uniformity and cannot
    see symmetric multi-modal structure (opposing clusters cancel); Kuiper
    compares the full empirical CDF against uniform and catches it.
    """
    theta = np.mod(np.asarray(angles, dtype=float), TWO_PI)
    n = theta.size
    if n < 10:
        raise FitError(f"need at least 10 angles, got {n}")
    r = float(np.hypot(np.sum(np.cos(theta)), np.sum(np.sin(theta))) / n)
    z = n * r * r
    p = math.exp(-z) * (1 + (2 * z - z * z) / (4 * n)
                        - (24 * z - 132 * z**2 + 76 * z**3 - 9 * z**4) / (288 * n * n))
    p = min(max(p, 0.0), 1.0)
    u = np.sort(theta / TWO_PI)
    i = np.arange(1, n + 1)
    d_plus = float(np.max(i / n - u))
    d_minus = float(np.max(u - (i - 1) / n))
    return r, p, d_plus + d_minus


def _chi2_stat(table: np.ndarray) -> float:
    total = table.sum()
    if total <= 0:
        return 0.0
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / total
    mask = expected > 0
    return float(np.sum((table[mask] - expected[mask]) ** 2 / expected[mask]))


def chi2_permutation(confusion, n_perms: int = 1000, seed: int = 0) -> float:
    """Chi-squared independence test with a permutation null (one margin shuffled)."""
    table = np.asarray(confusion, dtype=float)
    if table.ndim != 2 or table.shape[0] < 2 or table.sum() < 20:
        raise FitError("need a 2D table with at least 2 rows and total count >= 20")
    observed = _chi2_stat(table)
    rows, cols = [], []
    for (i, j), count in np.ndenumerate(table):
        rows.extend([i] * int(round(count)))
        cols.extend([j] * int(round(count)))
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    rng = np.random.default_rng(seed)
    n_rows, n_cols = table.shape
    hits = 0
    for _ in range(n_perms):
        perm_cols = rng.permutation(cols)
        perm_table = np.zeros((n_rows, n_cols))
        np.add.at(perm_table, (rows, perm_cols), 1.0)
        if _chi2_stat(perm_table) >= observed - 1e-12:
            hits += 1
    return hits / n_perms


def mantel(mat_a, mat_b, n_perms: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mantel test: correlation between two square symmetric matrices with a
    permutation p-value from simultaneous row/column shuffles of the second."""
    a = np.asarray(mat_a, dtype=float)
    b = np.asarray(mat_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 3:
        raise FitError("matrices must be square, equal-sized and at least 3x3")
    iu = np.triu_indices(a.shape[0], k=1)
    va = a[iu]
    if np.ptp(va) < 1e-15 or np.ptp(b[iu]) < 1e-15:
        raise FitError("constant off-diagonal entries")
    r_obs = float(np.corrcoef(va, b[iu])[0, 1])
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perms):
        perm = rng.permutation(a.shape[0])
        vb = b[np.ix_(perm, perm)][iu]
        if np.ptp(vb) < 1e-15:
            continue
        if abs(float(np.corrcoef(va, vb)[0, 1])) >= abs(r_obs) - 1e-12:
            hits += 1
    return r_obs, hits / n_perms


# ---------------------------------------------------------------------------
# Kernel density estimation

KDE_BANDWIDTH_FLOOR = 1e-3


def silverman_bandwidth(samples: np.ndarray) -> float:
    n = samples.size
    std = float(np.std(samples))
    iqr = float(np.subtract(*np.percentile(samples, [75, 25])))
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        spread = max(std, 0.0)
    bw = 0.9 * spread * n ** (-0.2)
    return max(bw, KDE_BANDWIDTH_FLOOR)


@dataclass
class GaussianKde:
    samples: np.ndarray
    bandwidth: float

    def evaluate(self, grid) -> np.ndarray:
        g = np.asarray(grid, dtype=float)
        z = (g[:, None] - self.samples[None, :]) / self.bandwidth
        dens = np.exp(-0.5 * z * z).sum(axis=1)
        return dens / (self.samples.size * self.bandwidth * math.sqrt(TWO_PI))


def kde(samples, bandwidth: float | str = "auto") -> GaussianKde:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise FitError(f"need at least 2 samples for a KDE, got {x.size}")
    bw = silverman_bandwidth(x) if bandwidth == "auto" else max(float(bandwidth), KDE_BANDWIDTH_FLOOR)
    return GaussianKde(samples=x, bandwidth=bw)
