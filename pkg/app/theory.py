"""Numerical checks of forgetting in the two-layer linear model y = v^T B x.

B (k x d) is the shared feature extractor and v (k) a task head, with
1 <= k < n < d so every task underdetermines B. The module provides:

- linear probing (least squares for the head on frozen features) and full
  fine-tuning by full-batch gradient descent;
- the closed-form worst-case loss over unit inputs between two models;
- the lower bound on that loss after fine-tuning from a previous task's
  solution, and a seeded sweep comparing it with simulations;
- the probe-then-fine-tune experiment in which a realizing extractor never
  moves, with a random-head control run;
- the multi-head relaxation term and its triangle-inequality check.

The bound's distance term needs the spectral-norm-optimal rotation, which has
no closed form; the Frobenius-optimal (Procrustes) rotation is used instead.
Its residual can only be larger than the optimum, so the reported bound is
never stronger than the true one. The residual's spectral norm s enters as
max(s, s**2), which is conservative whether the distance term is read squared
or not.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import null_space, orth, orthogonal_procrustes, svdvals

from errors import SetupError, ShapeError
from utils import atomic_write_json, write_csv

logger = logging.getLogger(__name__)

LOSS_TOL = 1e-10
GRAD_TOL = 1e-8
MAX_ITERATIONS = 200_000
PRECONDITION_TOL = 1e-6
REPORT_FIELDS = ("seed", "sigma_k", "phi", "eps_hat", "bound", "measured_sqrt_loss",
                 "converged", "precondition", "satisfied")


@dataclass
class LinearTask:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"task needs x (n, d) and y (n,), got {self.x.shape}, {self.y.shape}")


@dataclass
class LinearCLInstance:
    features: np.ndarray
    heads: list[np.ndarray]
    tasks: list[LinearTask]

    def __post_init__(self):
        k, d = self.features.shape
        for task in self.tasks:
            n = task.x.shape[0]
            if not 1 <= k < n < d:
                raise SetupError(f"dimensions must satisfy 1 <= k < n < d, got k={k} n={n} d={d}")
            if task.x.shape[1] != d:
                raise SetupError(f"task inputs have {task.x.shape[1]} dims, features expect {d}")
        if len(self.heads) != len(self.tasks):
            raise SetupError("one head per task is required")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.features.shape[0], self.tasks[0].x.shape[0], self.features.shape[1]


def task_loss(B, v, task: LinearTask) -> float:
    residual = task.x @ (B.T @ v) - task.y
    return float(np.mean(residual ** 2))


def _loss_and_grads(B, v, task: LinearTask):
    n = task.x.shape[0]
    features = task.x @ B.T
    residual = features @ v - task.y
    back = task.x.T @ residual
    return (float(np.mean(residual ** 2)), (2.0 / n) * np.outer(v, back),
            (2.0 / n) * (features.T @ residual))


def linear_probe(B, task: LinearTask) -> np.ndarray:
    """Least-squares head on frozen features; minimum-norm when rank deficient."""
    head, *_ = np.linalg.lstsq(task.x @ B.T, task.y, rcond=None)
    return head


@dataclass
class FineTuneResult:
    B: np.ndarray
    v: np.ndarray
    losses: list[float]
    iterations: int
    converged: bool

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def fine_tune(B, v, task: LinearTask, lr=None, tol=LOSS_TOL, grad_tol=GRAD_TOL,
              max_iterations=MAX_ITERATIONS) -> FineTuneResult:
    """Full-batch gradient descent on (B, v) from the given start.

    A step that would raise the loss is rejected and the step size halved, so
    the recorded loss sequence never increases. Stops once the loss is below
    ``tol`` and the gradient norm below ``grad_tol``.
    """
    B, v = B.copy(), v.copy()
    loss, grad_B, grad_v = _loss_and_grads(B, v, task)
    if lr is None:
        scale = np.linalg.norm(task.x, 2) ** 2 / task.x.shape[0]
        lr = 0.5 / (2.0 * scale * (np.linalg.norm(B, 2) ** 2 + v @ v + 1.0))
    losses = [loss]
    iterations = 0
    while iterations < max_iterations:
        grad_norm = np.sqrt(np.sum(grad_B ** 2) + grad_v @ grad_v)
        if loss < tol and grad_norm < grad_tol:
            break
        candidate_B, candidate_v = B - lr * grad_B, v - lr * grad_v
        candidate = _loss_and_grads(candidate_B, candidate_v, task)
        if candidate[0] > loss:
            lr /= 2.0
            if lr < 1e-300:
                break
            continue
        B, v = candidate_B, candidate_v
        loss, grad_B, grad_v = candidate
        losses.append(loss)
        iterations += 1
    converged = loss < tol
    if not converged:
        logger.warning("fine-tuning stopped after %d iterations at loss %.3e", iterations, loss)
    return FineTuneResult(B, v, losses, iterations, converged)


def worst_case_loss(B, v, B_ref, v_ref) -> float:
    """max over ||x|| <= 1 of (v^T B x - v_ref^T B_ref x)^2, in closed form."""
    if B.shape != B_ref.shape or v.shape != v_ref.shape:
        raise ShapeError("worst-case loss needs matching shapes")
    gap = B.T @ v - B_ref.T @ v_ref
    return float(gap @ gap)


def gram_deviation(basis) -> float:
    """max |Q^T Q - I|; zero for a matrix with orthonormal columns."""
    if basis.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(basis.T @ basis - np.eye(basis.shape[1]))))


def procrustes_distance(B_prev, B_star) -> tuple[float, np.ndarray]:
    """Conservative distance between extractors up to a rotation of feature space.

    Returns (max(s, s**2), U) where U is the Frobenius-optimal rotation and s
    the spectral norm of B_prev - U B_star.
    """
    rotation, _ = orthogonal_procrustes(B_star.T, B_prev.T)
    U = rotation.T
    spectral = float(np.linalg.norm(B_prev - U @ B_star, 2))
    return max(spectral, spectral ** 2), U


@dataclass
class BoundComponents:
    sigma_k: float
    phi: float
    eps_hat: float
    bound: float
    S: np.ndarray
    R: np.ndarray
    S_perp: np.ndarray

    @property
    def precondition(self) -> bool:
        return self.sigma_k > PRECONDITION_TOL

    def max_gram_deviation(self) -> float:
        return max(gram_deviation(self.S), gram_deviation(self.R), gram_deviation(self.S_perp))


def lower_bound(task: LinearTask, B_prev, v_prev, B_star, v_star) -> BoundComponents:
    """Lower bound on the worst-case loss gap after fine-tuning from (B_prev, v_prev).

    (B_star, v_star) is the joint optimum of the previous and the current task.
    """
    k = B_prev.shape[0]
    S = orth(task.x.T)
    S_perp = null_space(task.x)
    R = orth(B_prev.T)
    singular = svdvals(R.T @ S_perp) if S_perp.shape[1] else np.zeros(0)
    sigma_k = float(singular[k - 1]) if singular.size >= k else 0.0
    phi = float(np.sqrt(abs((v_prev @ v_star) ** 2 - (v_star @ v_star) ** 2)))
    target_norm = float(np.linalg.norm(B_star.T @ v_star))
    alignment = phi if target_norm == 0 else min(phi, phi ** 2 / target_norm)
    eps_hat, _ = procrustes_distance(B_prev, B_star)
    bound = sigma_k / np.sqrt(k) * alignment / (1.0 + target_norm) ** 2 - eps_hat
    return BoundComponents(sigma_k, phi, eps_hat, float(bound), S, R, S_perp)


def random_orthonormal_rows(rng, k, d) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return Q.T


def random_rotation(rng, k) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((k, k)))
    return Q * np.sign(np.diag(R))


@dataclass
class BoundRecord:
    seed: int
    sigma_k: float
    phi: float
    eps_hat: float
    bound: float
    measured_sqrt_loss: float
    converged: bool
    precondition: bool
    satisfied: bool

    @property
    def counted(self) -> bool:
        return self.converged and self.precondition


def bound_instance(seed, k=3, n=10, d=50, perturbation=0.02) -> BoundRecord:
    """Fine-tune from a near-optimal extractor with a misaligned head and compare with the bound.

    Both tasks share the ground truth (B_star, v_star), rows of B_star are
    orthonormal, and the previous extractor is a rotated B_star plus a
    perturbation of spectral norm ``perturbation``.
    """
    if not 1 <= k < n < d:
        raise SetupError(f"dimensions must satisfy 1 <= k < n < d, got k={k} n={n} d={d}")
    rng = np.random.default_rng(seed)
    B_star = random_orthonormal_rows(rng, k, d)
    v_star = rng.standard_normal(k)
    noise = rng.standard_normal((k, d))
    B_prev = random_rotation(rng, k) @ B_star + perturbation * noise / np.linalg.norm(noise, 2)
    v_prev = rng.standard_normal(k)
    x = rng.standard_normal((n, d)) / np.sqrt(d)
    task = LinearTask(x, x @ (B_star.T @ v_star))
    result = fine_tune(B_prev, v_prev, task)
    measured = float(np.sqrt(worst_case_loss(result.B, result.v, B_star, v_star)))
    parts = lower_bound(task, B_prev, v_prev, B_star, v_star)
    return BoundRecord(seed, parts.sigma_k, parts.phi, parts.eps_hat, parts.bound, measured,
                       result.converged, parts.precondition, measured >= parts.bound - 1e-12)


def bound_sweep(instances=100, seed=0, k=3, n=10, d=50, perturbation=0.02) -> list[BoundRecord]:
    records = [bound_instance(seed + offset, k, n, d, perturbation) for offset in range(instances)]
    counted = [record for record in records if record.counted]
    logger.info("bound sweep: %d instances, %d counted, %d violations", len(records),
                len(counted), sum(not record.satisfied for record in counted))
    return records


def realizable_instance(seed, k=3, n=10, d=50, num_tasks=5) -> LinearCLInstance:
    """Tasks y_t = v0_t^T B0 x that the extractor B0 solves exactly."""
    rng = np.random.default_rng(seed)
    if not 1 <= k < n < d:
        raise SetupError(f"dimensions must satisfy 1 <= k < n < d, got k={k} n={n} d={d}")
    features = random_orthonormal_rows(rng, k, d)
    heads, tasks = [], []
    for _ in range(num_tasks):
        head = rng.standard_normal(k)
        x = rng.standard_normal((n, d)) / np.sqrt(d)
        heads.append(head)
        tasks.append(LinearTask(x, x @ (features.T @ head)))
    return LinearCLInstance(features, heads, tasks)


@dataclass
class DriftReport:
    head_init: str
    drifts: list[float] = field(default_factory=list)
    previous_losses: list[list[float]] = field(default_factory=list)

    @property
    def max_drift(self) -> float:
        return max(self.drifts, default=0.0)

    @property
    def max_previous_loss(self) -> float:
        return max((loss for row in self.previous_losses for loss in row), default=0.0)

    def satisfied(self, tol=1e-8) -> bool:
        return self.max_drift < tol and self.max_previous_loss < tol

    def to_dict(self) -> dict:
        return {**asdict(self), "max_drift": self.max_drift,
                "max_previous_loss": self.max_previous_loss}


def drift_experiment(instance: LinearCLInstance, head_init="probe", seed=0) -> DriftReport:
    """Learn the tasks in order, each from the previous extractor, tracking ||B_t - B0||_F.

    ``probe`` starts each task from the least-squares head, ``random`` from a
    small uniform random head.
    """
    B0 = instance.features
    for index, task in enumerate(instance.tasks):
        residual = task_loss(B0, linear_probe(B0, task), task)
        if residual > LOSS_TOL:
            raise SetupError(f"task {index + 1} is not realizable by the initial extractor "
                             f"(probe loss {residual:.3e})")
    rng = np.random.default_rng(seed)
    report = DriftReport(head_init)
    B, heads = B0.copy(), []
    for index, task in enumerate(instance.tasks):
        if head_init == "probe":
            start = linear_probe(B, task)
        elif head_init == "random":
            start = rng.uniform(-0.1, 0.1, B.shape[0])
        else:
            raise SetupError(f"unknown head init {head_init!r}")
        result = fine_tune(B, start, task)
        B = result.B
        heads.append(result.v)
        report.drifts.append(float(np.linalg.norm(B - B0)))
        report.previous_losses.append(
            [task_loss(B, heads[earlier], instance.tasks[earlier]) for earlier in range(index)])
    return report


def multi_head_relaxation(B_t, v_t, v_other) -> float:
    """||v_t^T B_t - v_other^T B_t||: what a private head saves over the shared one."""
    return float(np.linalg.norm(B_t.T @ (v_t - v_other)))


def multi_head_check(B_t, v_t, v_other, B_other) -> dict:
    """Check sqrt(L(B_t, v_other)) >= sqrt(L(B_t, v_t)) - eps_mh against (B_other, v_other)."""
    eps_mh = multi_head_relaxation(B_t, v_t, v_other)
    own = np.sqrt(worst_case_loss(B_t, v_other, B_other, v_other))
    shared = np.sqrt(worst_case_loss(B_t, v_t, B_other, v_other))
    return {"eps_mh": eps_mh, "own_head": float(own), "shared_head": float(shared),
            "satisfied": bool(own >= shared - eps_mh - 1e-12)}


def multi_head_sweep(instances=20, seed=0, k=3, n=10, d=50) -> list[dict]:
    """Two tasks learned in sequence with random heads; check the relaxation after the second."""
    checks = []
    for offset in range(instances):
        instance = realizable_instance(seed + offset, k, n, d, num_tasks=2)
        rng = np.random.default_rng(seed + offset)
        first = fine_tune(instance.features, rng.uniform(-0.1, 0.1, k), instance.tasks[0])
        second = fine_tune(first.B, rng.uniform(-0.1, 0.1, k), instance.tasks[1])
        checks.append({"seed": seed + offset,
                       **multi_head_check(second.B, second.v, first.v, first.B)})
    return checks


def write_theory_report(directory, records, drift_probe=None, drift_random=None,
                        multi_head=None):
    directory = Path(directory)
    rows = [asdict(record) for record in records]
    counted = [record for record in records if record.counted]
    report = {
        "instances": rows,
        "summary": {
            "instances": len(records),
            "counted": len(counted),
            "violations": sum(not record.satisfied for record in counted),
        },
    }
    if drift_probe is not None:
        report["drift_probe"] = drift_probe.to_dict()
    if drift_random is not None:
        report["drift_random"] = drift_random.to_dict()
    if multi_head is not None:
        report["multi_head"] = multi_head
    atomic_write_json(directory / "theory_report.json", report)
    write_csv(directory / "theory_report.csv", list(REPORT_FIELDS),
              [[row[name] for name in REPORT_FIELDS] for row in rows])
    return report
