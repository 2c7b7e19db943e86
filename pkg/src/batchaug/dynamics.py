"""Linearized SGD on per-sample quadratic losses.

Each sample carries a PSD curvature H_n = G_n G_n^T (PSD is structural: only
the factor is stored).  Training draws a batch index k uniformly with
replacement and applies w <- (I - eta * mean of H_n over batch k) w.  The
module computes the spectral quantities that govern this recursion:

  lam_max      max over batches of the top eigenvalue of the batch mean
  lam_bar_max  top eigenvalue of the overall mean curvature
  lam_min      smallest nonzero eigenvalue of the mean curvature
  mean_sq      the mean over batches of (batch mean)^2, which drives the
               second-moment recursion

The stability rule is: the recursion converges on the complement of the
null space whenever lam_max < 2/eta, and on adversarial instances (all
curvature packed into one batch) that threshold is exact.  Everything here
is 64-bit; boundary sweeps near eta = 2/lam_max are too ill-conditioned for
less.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericalError
from .rng import RngStream
from .tensor import fold_mean, matmul

NULL_THRESHOLD_FACTOR = 1e-10
DIVERGE_FACTOR = 1e8
CONVERGE_FACTOR = 1e-8
DEFAULT_STEPS = 100_000


@dataclass
class QuadraticProblem:
    """N samples of dimension-d quadratic curvature, in contiguous batches.

    factors has shape (N, d, r); sample n's curvature is
    factors[n] @ factors[n].T.  batch k covers samples [k*B, (k+1)*B).
    """

    factors: np.ndarray
    batch_size: int

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.float64)
        if self.factors.ndim != 3:
            raise ContractViolation(
                f"factors must be (N, d, r), got {self.factors.shape}")
        n = self.factors.shape[0]
        if self.batch_size < 1 or n % self.batch_size != 0:
            raise ContractViolation(
                f"batch size {self.batch_size} must divide sample count {n}")

    @property
    def n_samples(self):
        return self.factors.shape[0]

    @property
    def dim(self):
        return self.factors.shape[1]

    @property
    def num_batches(self):
        return self.n_samples // self.batch_size

    def sample_hessian(self, n: int) -> np.ndarray:
        g = self.factors[n]
        return matmul(g, g.T)


def random_problem(dim: int, n_samples: int, batch_size: int, rank: int,
                   seed: int, scale: float = 1.0) -> QuadraticProblem:
    stream = RngStream(seed).split("quadratic")
    factors = stream.normal((n_samples, dim, rank)) * (scale / np.sqrt(rank))
    return QuadraticProblem(factors, batch_size)


def batch_hessian(p: QuadraticProblem, k: int) -> np.ndarray:
    """Mean curvature of batch k: (1/B) * sum of H_n over the batch."""
    if not 0 <= k < p.num_batches:
        raise ContractViolation(f"batch index {k} out of range")
    start = k * p.batch_size
    acc = p.sample_hessian(start)
    for n in range(start + 1, start + p.batch_size):
        acc += p.sample_hessian(n)
    return acc / p.batch_size


# ---------------------------------------------------------------------------
# spectral statistics

def power_iter_top(mat: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 50_000):
    """Top eigenvalue/vector of a symmetric PSD matrix by power iteration."""
    d = mat.shape[0]
    v = np.full(d, 1.0 / np.sqrt(d))
    v += np.arange(d) * (1e-6 / max(d, 1))  # break symmetry deterministically
    v /= np.linalg.norm(v)
    lam = 0.0
    for i in range(max_iter):
        av = mat @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            return 0.0, v
        v_new = av / norm
        lam_new = float(v_new @ (mat @ v_new))
        residual = np.linalg.norm(mat @ v_new - lam_new * v_new)
        if residual <= tol * max(lam_new, 1.0):
            return lam_new, v_new
        v, lam = v_new, lam_new
    raise NumericalError(
        f"power iteration stalled after {max_iter} rounds: "
        f"eigenvalue estimate {lam:.6e}, residual {residual:.3e}")


def top_eigenvalue(mat: np.ndarray) -> float:
    """Top eigenvalue of a symmetric matrix; dense solve at small d."""
    if mat.shape[0] <= 64:
        return float(np.linalg.eigvalsh(mat)[-1])
    return power_iter_top(mat)[0]


@dataclass
class SpectralStats:
    per_batch: np.ndarray       # (K, d, d) batch-mean curvatures
    mean_h: np.ndarray          # (d, d)
    mean_sq: np.ndarray         # (d, d) mean over k of per_batch[k]^2
    lam_max: float
    lam_bar_max: float
    lam_min: float
    null_basis: np.ndarray      # (d, d_null)
    projector: np.ndarray       # (d, d) onto the complement of the null space
    threshold: float


def spectral_stats(p: QuadraticProblem) -> SpectralStats:
    per_batch = np.stack([batch_hessian(p, k) for k in range(p.num_batches)])
    mean_h = fold_mean(list(per_batch))
    mean_sq = fold_mean([matmul(h, h) for h in per_batch])

    lam_max = max(top_eigenvalue(h) for h in per_batch)
    evals, evecs = np.linalg.eigh(mean_h)
    lam_bar_max = float(evals[-1])
    threshold = NULL_THRESHOLD_FACTOR * lam_bar_max if lam_bar_max > 0 \
        else np.inf
    null_mask = evals < threshold
    null_basis = evecs[:, null_mask]
    keep = evecs[:, ~null_mask]
    lam_min = float(evals[~null_mask][0]) if keep.size else 0.0
    projector = keep @ keep.T if keep.size else np.zeros((p.dim, p.dim))
    return SpectralStats(per_batch=per_batch, mean_h=mean_h, mean_sq=mean_sq,
                         lam_max=lam_max, lam_bar_max=lam_bar_max,
                         lam_min=lam_min, null_basis=null_basis,
                         projector=projector, threshold=threshold)


# ---------------------------------------------------------------------------
# simulation

@dataclass
class SimResult:
    verdict: str                # converged | diverged | undecided
    steps_run: int
    norms: np.ndarray           # ||w_t|| for t = 0..steps_run
    proj_norms: np.ndarray      # ||P w_t||
    eta: float


def simulate(p: QuadraticProblem, eta: float, w0: np.ndarray,
             t_steps: int = DEFAULT_STEPS, stream: RngStream = None,
             stats: SpectralStats = None) -> SimResult:
    """Iterate one trajectory with uniformly sampled batch indices.

    Diverged when ||w|| passes 1e8 * ||w0||; converged when the projection
    onto the complement of the null space falls below 1e-8 of its start.
    """
    if eta <= 0:
        raise ContractViolation("step size must be positive")
    stats = stats or spectral_stats(p)
    stream = stream or RngStream(0).split("sim")
    w = np.asarray(w0, dtype=np.float64).copy()
    if w.shape != (p.dim,):
        raise ContractViolation(f"w0 must have shape ({p.dim},)")

    ops = np.eye(p.dim) - eta * stats.per_batch    # (K, d, d)
    proj = stats.projector
    norm0 = np.linalg.norm(w)
    proj0 = np.linalg.norm(proj @ w)
    diverge_at = DIVERGE_FACTOR * norm0
    converge_at = CONVERGE_FACTOR * proj0

    norms = [norm0]
    proj_norms = [proj0]
    if proj0 == 0.0:
        return SimResult("converged", 0, np.array(norms),
                         np.array(proj_norms), eta)

    block = 4096
    t = 0
    while t < t_steps:
        ks = stream.randint(min(block, t_steps - t), 0, p.num_batches)
        for k in ks:
            w = ops[k] @ w
            t += 1
            norm = np.linalg.norm(w)
            pnorm = np.linalg.norm(proj @ w)
            norms.append(norm)
            proj_norms.append(pnorm)
            if norm > diverge_at:
                return SimResult("diverged", t, np.array(norms),
                                 np.array(proj_norms), eta)
            if pnorm < converge_at:
                return SimResult("converged", t, np.array(norms),
                                 np.array(proj_norms), eta)
    return SimResult("undecided", t, np.array(norms), np.array(proj_norms),
                     eta)


def simulate_ensemble(p: QuadraticProblem, eta: float, w0: np.ndarray,
                      t_steps: int, n_trajectories: int,
                      stream: RngStream = None,
                      stats: SpectralStats = None) -> dict:
    """Evolve many independent trajectories from the same start in lockstep.

    Returns per-step ensemble means: mean_w (T+1, d), mean_sq_norm (T+1,),
    mean_sq_proj (T+1,).  Batch draws are grouped per step, so the cost is
    one (rows x d) matmul per batch value per step.
    """
    if eta <= 0:
        raise ContractViolation("step size must be positive")
    stats = stats or spectral_stats(p)
    stream = stream or RngStream(0).split("ensemble")
    w0 = np.asarray(w0, dtype=np.float64)
    big = np.tile(w0, (n_trajectories, 1))
    ops_t = np.transpose(np.eye(p.dim) - eta * stats.per_batch, (0, 2, 1))
    proj_t = stats.projector.T

    mean_w = np.empty((t_steps + 1, p.dim))
    mean_sq_norm = np.empty(t_steps + 1)
    mean_sq_proj = np.empty(t_steps + 1)

    def record(t):
        mean_w[t] = big.mean(axis=0)
        mean_sq_norm[t] = float(np.mean(np.sum(big * big, axis=1)))
        pw = big @ proj_t
        mean_sq_proj[t] = float(np.mean(np.sum(pw * pw, axis=1)))

    record(0)
    for t in range(1, t_steps + 1):
        ks = stream.randint(n_trajectories, 0, p.num_batches)
        for k in range(p.num_batches):
            rows = ks == k
            if rows.any():
                big[rows] = big[rows] @ ops_t[k]
        record(t)
    return {"mean_w": mean_w, "mean_sq_norm": mean_sq_norm,
            "mean_sq_proj": mean_sq_proj}


# ---------------------------------------------------------------------------
# theorem machinery

def theorem_check(p: QuadraticProblem, eta: float,
                  stats: SpectralStats = None) -> str:
    """'stable' when lam_max < 2/eta strictly, else 'unstable-possible'."""
    if eta <= 0:
        raise ContractViolation("step size must be positive")
    stats = stats or spectral_stats(p)
    return "stable" if stats.lam_max < 2.0 / eta else "unstable-possible"


def tightness_construct(dim: int, batch_size: int, n_samples: int,
                        lam: float, seed: int) -> QuadraticProblem:
    """Adversarial instance: all curvature packed into the first batch.

    Every sample of batch 0 carries lam * u u^T for one unit vector u, all
    other samples are flat.  Then lam_max = lam exactly, the overall mean
    curvature is lam/K * u u^T (K batches), and stability flips exactly at
    eta = 2/lam.
    """
    if lam <= 0:
        raise ContractViolation("target eigenvalue must be positive")
    if n_samples % batch_size != 0:
        raise ContractViolation("batch size must divide sample count")
    u = RngStream(seed).split("tightness").normal((dim,))
    u /= np.linalg.norm(u)
    factors = np.zeros((n_samples, dim, 1))
    factors[:batch_size, :, 0] = np.sqrt(lam) * u
    return QuadraticProblem(factors, batch_size)


def second_moment_form(p: QuadraticProblem, eta: float, w: np.ndarray,
                       stats: SpectralStats = None) -> float:
    """Exact one-step expectation of ||w'||^2 from state w:
    w^T (I - 2 eta <H> + eta^2 <H^2>) w."""
    stats = stats or spectral_stats(p)
    w = np.asarray(w, dtype=np.float64)
    m = np.eye(p.dim) - 2 * eta * stats.mean_h + eta ** 2 * stats.mean_sq
    return float(w @ (m @ w))


def second_moment_condition(p: QuadraticProblem, eta: float,
                            stats: SpectralStats = None) -> bool:
    """Whether the second-moment recursion contracts on the complement of
    the null space: max unit-vector value of the quadratic form < 1."""
    stats = stats or spectral_stats(p)
    if stats.null_basis.shape[1] == p.dim:
        return True     # nothing outside the null space to contract
    m = np.eye(p.dim) - 2 * eta * stats.mean_h + eta ** 2 * stats.mean_sq
    evals, evecs = np.linalg.eigh(stats.mean_h)
    keep = evecs[:, evals >= stats.threshold]
    restricted = keep.T @ m @ keep
    restricted = (restricted + restricted.T) / 2.0
    return float(np.linalg.eigvalsh(restricted)[-1]) < 1.0


def rate_bound(p: QuadraticProblem, eta: float, t: int, w0: np.ndarray,
               stats: SpectralStats = None) -> float:
    """Upper bound on the expected squared projected norm after t steps:
    (1 - eta (2 - eta lam_max) lam_min)^t * ||P w0||^2."""
    stats = stats or spectral_stats(p)
    if not stats.lam_max < 2.0 / eta:
        raise ContractViolation(
            f"rate bound needs lam_max {stats.lam_max:.6g} < 2/eta "
            f"{2.0 / eta:.6g}")
    if t < 0:
        raise ContractViolation("step count cannot be negative")
    w0 = np.asarray(w0, dtype=np.float64)
    proj0 = float(np.linalg.norm(stats.projector @ w0) ** 2)
    factor = 1.0 - eta * (2.0 - eta * stats.lam_max) * stats.lam_min
    return factor ** t * proj0


def boundary_bisect(p: QuadraticProblem, w0: np.ndarray, eta_lo: float,
                    eta_hi: float, rounds: int = 12, seed: int = 0,
                    t_steps: int = DEFAULT_STEPS,
                    stats: SpectralStats = None) -> float:
    """Bisect the step size at which trajectories flip from converging to
    diverging.  Requires a converging lower edge and a diverging upper edge;
    'undecided' is treated as not yet diverged."""
    stats = stats or spectral_stats(p)

    def diverges(eta, tag):
        res = simulate(p, eta, w0, t_steps=t_steps,
                       stream=RngStream(seed).split("bisect", tag),
                       stats=stats)
        return res.verdict == "diverged"

    if diverges(eta_lo, 0):
        raise ContractViolation(f"lower edge {eta_lo} already diverges")
    if not diverges(eta_hi, 1):
        raise ContractViolation(f"upper edge {eta_hi} does not diverge")
    lo, hi = eta_lo, eta_hi
    for i in range(rounds):
        mid = (lo + hi) / 2.0
        if diverges(mid, 2 + i):
            hi = mid
        else:
            lo = mid
    return (lo + hi) / 2.0


# ---------------------------------------------------------------------------
# reporting helpers

def trajectory_csv_rows(trial: int, result: SimResult, thin: int = 1):
    """Rows for the `trial,t,norm,proj_norm` trajectory table."""
    rows = []
    for t in range(0, len(result.norms), thin):
        rows.append(f"{trial},{t},{result.norms[t]:.12g},"
                    f"{result.proj_norms[t]:.12g}")
    return rows


def verdict_summary(eta: float, stats: SpectralStats,
                    result: SimResult) -> dict:
    return {"eta": eta, "lambda_max": stats.lam_max,
            "predicted": "stable" if stats.lam_max < 2.0 / eta
            else "unstable-possible",
            "observed": result.verdict}
