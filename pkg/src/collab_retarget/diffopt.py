"""Adam on torch float64 tensors, finite-difference gradient checking, loss-trace export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NonFiniteLoss


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.01
    iterations: int = 1000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class OptimResult:
    x: np.ndarray
    trace: np.ndarray                    # (iterations, *loss_shape): loss at the iterate before each step
    terms: dict = field(default_factory=dict)  # name -> (iterations, *loss_shape)
    final_loss: np.ndarray | float = None
    best_iteration: np.ndarray | int | None = None  # set when keep_best was requested

    def to_csv(self, path):
        write_trace_csv(self, path)


def _evaluate(objective, x):
    out = objective(x)
    if isinstance(out, tuple):
        return out[0], out[1]
    return out, {}


def minimize(objective, x0, cfg=OptimConfig(), project=None, keep_best=False, anchor=None):
    """Run ``cfg.iterations`` Adam steps from ``x0``.

    ``objective(x)`` maps a float64 tensor to a loss tensor, or to ``(loss, terms)``
    with ``terms`` a dict of named parts. A non-scalar loss is treated as a batch of
    independent problems: the gradient of its sum is the per-problem gradient and
    the trace keeps the per-problem values. ``project(x)`` may modify ``x`` in place
    after every step (used for box constraints).

    ``anchor=(ref, lam)`` adds sum(lam * |x - ref|) to the objective and handles its
    kink with the minimum-norm subgradient: a coordinate sitting exactly on ``ref``
    gets zero gradient while the other forces on it stay within ``lam``.

    With ``keep_best`` the returned ``x`` is, per problem, the lowest-loss iterate
    seen along the trace (the start and the final iterate included), so the
    returned loss never exceeds the initial one.
    """
    x = torch.tensor(np.asarray(x0, dtype=float)) if not torch.is_tensor(x0) else x0.detach().clone().double()
    b1, b2 = cfg.betas
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    trace, terms = [], {}
    best_x = best_loss = best_it = None
    if anchor is not None:
        ref = torch.as_tensor(np.asarray(anchor[0], dtype=float))
        lam = torch.as_tensor(np.broadcast_to(np.asarray(anchor[1], dtype=float), ref.shape).copy())
    for it in range(int(cfg.iterations)):
        x.requires_grad_(True)
        loss, parts = _evaluate(objective, x)
        if anchor is not None:
            l1 = _anchor_value(x, ref, lam, loss)
            loss = loss + l1
            parts = dict(parts, anchor=l1)
        total = loss.sum()
        if not torch.isfinite(total):
            raise NonFiniteLoss(it, float(total.detach()))
        (g,) = torch.autograd.grad(total, x)
        if anchor is not None:
            g = _min_norm_subgradient(g, x.detach(), ref, lam)
        if not torch.isfinite(g).all():
            raise NonFiniteLoss(it, float("nan"))
        trace.append(loss.detach().numpy().copy())
        if keep_best:
            best_x, best_loss, best_it = _track_best(x.detach(), loss.detach(), it, best_x, best_loss, best_it)
        for k, val in parts.items():
            terms.setdefault(k, []).append(val.detach().numpy().copy())
        with torch.no_grad():
            x = x.detach()
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            mhat = m / (1 - b1 ** (it + 1))
            vhat = v / (1 - b2 ** (it + 1))
            x -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps)
            if project is not None:
                project(x)
    with torch.no_grad():
        final, _ = _evaluate(objective, x)
        if anchor is not None:
            final = final + _anchor_value(x, ref, lam, final)
    if not torch.isfinite(final).all():
        raise NonFiniteLoss(int(cfg.iterations), float(final.sum()))
    best = None
    if keep_best:
        x, final, best = _track_best(x, final, int(cfg.iterations), best_x, best_loss, best_it)
        best = best.numpy() if best.ndim else int(best)
    return OptimResult(x.numpy(), np.array(trace), {k: np.array(v_) for k, v_ in terms.items()},
                       final.numpy() if final.ndim else float(final), best)


def _anchor_value(x, ref, lam, like):
    """sum(lam |x - ref|) reduced to the shape of the loss tensor ``like``."""
    val = lam * (x - ref).abs()
    return val.sum(dim=tuple(range(like.ndim, val.ndim)))


def _min_norm_subgradient(g, x, ref, lam):
    # autograd already used sign(0) = 0 for the anchor, so g holds the other forces there
    on = x == ref
    return torch.where(on, g - g.clamp(-lam, lam), g)


def _track_best(x, loss, it, best_x, best_loss, best_it):
    """Per-problem running argmin; the leading axes of x match the loss shape."""
    if best_x is None:
        return x.clone(), loss.clone(), torch.full(loss.shape, it)
    better = loss < best_loss
    mask = better.reshape(better.shape + (1,) * (x.ndim - better.ndim))
    return (torch.where(mask, x, best_x), torch.where(better, loss, best_loss),
            torch.where(better, torch.full_like(best_it, it), best_it))


def write_trace_csv(result, path):
    names = sorted(result.terms)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total"] + names)
        for i, tot in enumerate(result.trace):
            row = [i, repr(float(np.sum(tot)))]
            row += [repr(float(np.sum(result.terms[n][i]))) for n in names]
            w.writerow(row)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    failures: list      # (coordinate, analytic, numeric, rel_err)
    nonsmooth: list     # coordinates excluded as kinks

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"{state} max_rel_err={self.max_rel_error:.3e} checked={self.checked} "
                f"failures={len(self.failures)} nonsmooth={len(self.nonsmooth)}")


def _as_scalar_fn(objective):
    def f(xt):
        out, _ = _evaluate(objective, xt)
        return out.sum()
    return f


def grad_check(objective, x, rel_tol=1e-3, h=1e-5, abs_floor=1e-8, grad=None, coords=None, seed=None):
    """Compare the analytic gradient at ``x`` against central differences.

    A coordinate passes when |g - fd| <= abs_floor or |g - fd| / max(|g|, |fd|) < rel_tol.
    A failing coordinate whose one-sided slopes disagree at step h and still
    disagree at h/10 is reported as a non-smooth point and excluded.
    ``coords`` may be an int (random subset drawn with ``seed``) or an index array.
    """
    f = _as_scalar_fn(objective)
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    if grad is None:
        xt = torch.tensor(x, requires_grad=True)
        (g,) = torch.autograd.grad(f(xt), xt)
        g = g.numpy().ravel()
    else:
        g = np.asarray(grad(x), dtype=float).ravel()
    if coords is None:
        idx = np.arange(flat.size)
    elif np.isscalar(coords):
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(flat.size, size=min(int(coords), flat.size), replace=False))
    else:
        idx = np.asarray(coords)

    def at(i, step):
        y = flat.copy()
        y[i] += step
        with torch.no_grad():
            return float(f(torch.tensor(y.reshape(x.shape))))

    with torch.no_grad():
        base = float(f(torch.tensor(x)))
    failures, kinks, worst = [], [], 0.0
    for i in idx:
        fp, fm = at(i, h), at(i, -h)
        fd = (fp - fm) / (2 * h)
        # one-sided slope mismatch; for smooth f it shrinks linearly with h
        d1 = abs((fp - base) - (base - fm)) / h
        if d1 > 1e-6 * max(1.0, abs(fd)):
            d2 = abs((at(i, h / 10) - base) - (base - at(i, -h / 10))) / (h / 10)
            if d2 > 0.5 * d1:
                kinks.append(int(i))
                continue
        diff = abs(g[i] - fd)
        rel = diff / max(abs(g[i]), abs(fd)) if diff > abs_floor else 0.0
        worst = max(worst, rel)
        if rel >= rel_tol:
            failures.append((int(i), float(g[i]), float(fd), float(rel)))
    return GradCheckReport(not failures, float(worst), len(idx), failures, kinks)
