"""Norm-bounded adversarial attacks against differentiable classifiers.

All attacks take a callable `model(x) -> logits` over [0,1] image batches and
return an AttackOutcome whose images satisfy the threat-model ball and pixel
box.  Attacks are bit-reproducible: every random draw comes from a
counter-based generator keyed by (seed, sample id), so running a sample alone
or inside a batch gives the same perturbation.

Models that carry per-sample state (e.g. a frozen noise draw per sample) may
expose `.subset(positions)`; the AutoAttack ensemble uses it when skipping
already-broken samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class AttackError(RuntimeError):
    """Unrecoverable attack-level failure (per-sample errors are collected)."""


@dataclass(frozen=True)
class ThreatModel:
    norm: str = "linf"
    eps: float = 8 / 255
    box: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unsupported norm {self.norm!r}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    def to_dict(self) -> dict:
        return {"norm": self.norm, "eps": self.eps, "box": list(self.box)}


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    steps: int = 20
    step_size: float | None = 2 / 255
    restarts: int = 1
    random_start: bool = True
    loss: str = "ce"
    query_budget: int = 1000
    seed: int = 0
    name: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind in ("pgd", "bim", "apgd", "cw", "fab"):
            return f"{self.kind}-{self.steps}"
        return self.kind

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "steps": self.steps, "step_size": self.step_size,
            "restarts": self.restarts, "random_start": self.random_start,
            "loss": self.loss, "query_budget": self.query_budget,
            "seed": self.seed, "name": self.name, "extras": dict(self.extras),
        }


@dataclass
class AttackOutcome:
    x_adv: torch.Tensor
    success: np.ndarray
    norms: np.ndarray
    iterations: np.ndarray
    best_loss: np.ndarray
    errors: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


def _flat(v: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape[0], -1)


def perturbation_norm(delta: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "linf":
        return _flat(delta).abs().amax(dim=1)
    return _flat(delta).norm(dim=1)


def project(delta: torch.Tensor, x: torch.Tensor, tm: ThreatModel) -> torch.Tensor:
    """Project delta into the norm ball, then adjust so x + delta stays in the box."""
    if tuple(delta.shape) != tuple(x.shape):
        raise ValueError("delta shape must match x")
    if tm.norm == "linf":
        delta = delta.clamp(-tm.eps, tm.eps)
    else:
        norms = perturbation_norm(delta, "l2").clamp_min(1e-12)
        factor = torch.where(
            norms > tm.eps, tm.eps / norms, torch.ones_like(norms)
        )
        delta = delta * factor.view(-1, *([1] * (delta.dim() - 1)))
    return torch.clamp(x + delta, tm.box[0], tm.box[1]) - x


def _clip_to_threat(x_adv, x, tm):
    """Ball clamp then box clamp of the point x_adv around x (box never grows the norm)."""
    if tm.norm == "linf":
        x_adv = torch.min(torch.max(x_adv, x - tm.eps), x + tm.eps)
    else:
        delta = x_adv - x
        norms = perturbation_norm(delta, "l2").clamp_min(1e-12)
        factor = torch.where(
            norms > tm.eps, tm.eps / norms, torch.ones_like(norms)
        )
        x_adv = x + delta * factor.view(-1, *([1] * (delta.dim() - 1)))
    return torch.clamp(x_adv, tm.box[0], tm.box[1])


def cw_margin_loss(logits, y, kappa: float = 0.0):
    """max(z_y - max_{i != y} z_i, -kappa); positive iff correctly classified.

    Attacks ascend the unfloored negative margin (kappa = inf) internally so
    the objective keeps discriminating after the flip.
    """
    logits = torch.as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits[None]
        y = torch.as_tensor([int(y)])
    else:
        y = torch.as_tensor(y)
    z_y = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, y[:, None], float("-inf"))
    margin = z_y - masked.amax(dim=1)
    out = torch.clamp(margin, min=-float(kappa))
    return float(out[0]) if single else out


def dlr_loss(logits, y):
    """Difference-of-logits-ratio loss; scale-invariant, needs C >= 3."""
    logits = torch.as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits[None]
        y = torch.as_tensor([int(y)])
    else:
        y = torch.as_tensor(y)
    if logits.shape[1] < 3:
        raise ValueError("DLR loss requires at least 3 classes")
    z_sorted, _ = logits.sort(dim=1, descending=True)
    z_y = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, y[:, None], float("-inf"))
    z_other = masked.amax(dim=1)
    denom = (z_sorted[:, 0] - z_sorted[:, 2]).clamp_min(1e-12)
    out = -(z_y - z_other) / denom
    return float(out[0]) if single else out


def dlr_loss_targeted(logits, y, y_target):
    """Targeted DLR: -(z_y - z_t) / (z_p1 - (z_p3 + z_p4)/2)."""
    logits = torch.as_tensor(logits)
    y = torch.as_tensor(y)
    y_target = torch.as_tensor(y_target)
    if logits.shape[1] < 3:
        raise ValueError("targeted DLR loss requires at least 3 classes")
    z_sorted, _ = logits.sort(dim=1, descending=True)
    z_y = logits.gather(1, y[:, None]).squeeze(1)
    z_t = logits.gather(1, y_target[:, None]).squeeze(1)
    if logits.shape[1] >= 4:
        denom = z_sorted[:, 0] - 0.5 * (z_sorted[:, 2] + z_sorted[:, 3])
    else:
        denom = z_sorted[:, 0] - z_sorted[:, 2]
    return -(z_y - z_t) / denom.clamp_min(1e-12)


def _loss_vector(kind, logits, y, y_target=None):
    """Per-sample objective that attacks ascend."""
    if kind == "ce":
        return F.cross_entropy(logits, y, reduction="none")
    if kind == "cw":
        return -cw_margin_loss(logits, y, kappa=float("inf"))
    if kind == "dlr":
        return dlr_loss(logits, y)
    if kind == "dlr-targeted":
        return dlr_loss_targeted(logits, y, y_target)
    raise ValueError(f"unknown loss kind {kind!r}")


def _as_long(y):
    return torch.as_tensor(y, dtype=torch.long)


def _ids(x, sample_ids):
    if sample_ids is None:
        return list(range(x.shape[0]))
    return [int(i) for i in sample_ids]


def _rng(seed, sid, tag):
    return np.random.default_rng((int(seed), int(sid), int(tag)))


def _random_delta(x, tm, seed, sample_ids, tag):
    rows = []
    d = int(np.prod(x.shape[1:]))
    for sid in sample_ids:
        rng = _rng(seed, sid, tag)
        if tm.norm == "linf":
            rows.append(rng.uniform(-tm.eps, tm.eps, size=x.shape[1:]))
        else:
            v = rng.standard_normal(x.shape[1:])
            v /= max(np.linalg.norm(v), 1e-12)
            rows.append(v * tm.eps * rng.uniform() ** (1.0 / d))
    return torch.from_numpy(np.stack(rows)).to(x.dtype)


class _BestTracker:
    """Keeps, per sample, the highest-loss iterate, preferring misclassifying ones."""

    def __init__(self, x, y):
        self.y = y
        self.best_x = x.clone()
        self.best_loss = torch.full((x.shape[0],), -float("inf"), dtype=torch.float64)
        self.succ_x = x.clone()
        self.succ_loss = torch.full((x.shape[0],), -float("inf"), dtype=torch.float64)
        self.found = torch.zeros(x.shape[0], dtype=torch.bool)
        self.any_seen = False
        self.history = []

    def update(self, x_cand, loss, pred):
        loss = loss.detach().double()
        succ = pred != self.y
        better = loss > self.best_loss
        self.best_x[better] = x_cand[better]
        self.best_loss[better] = loss[better]
        succ_better = succ & (loss > self.succ_loss)
        self.succ_x[succ_better] = x_cand[succ_better]
        self.succ_loss[succ_better] = loss[succ_better]
        self.found |= succ
        self.any_seen = True
        self.history.append(self.best_loss.clone().numpy())

    def final(self, x_clean):
        if not self.any_seen:
            return x_clean.clone(), np.full(x_clean.shape[0], -np.inf)
        out = torch.where(
            self.found.view(-1, *([1] * (x_clean.dim() - 1))), self.succ_x, self.best_x
        )
        return out, self.best_loss.numpy()


def _finalize(model, x, y, x_adv, tm, iterations, best_loss, errors):
    with torch.no_grad():
        pred = model(x_adv).argmax(dim=1)
    success = (pred != y).numpy()
    norms = perturbation_norm(x_adv - x, tm.norm).numpy()
    return AttackOutcome(
        x_adv=x_adv.detach(),
        success=success,
        norms=np.asarray(norms, dtype=np.float64),
        iterations=np.asarray(iterations, dtype=np.int64),
        best_loss=np.asarray(best_loss, dtype=np.float64),
        errors=errors,
    )


def _grad_of(model, x_point, y, loss_kind, y_target=None, need_grad=True):
    x_in = x_point.detach().requires_grad_(need_grad)
    logits = model(x_in)
    lvec = _loss_vector(loss_kind, logits, y, y_target)
    g = None
    if need_grad:
        (g,) = torch.autograd.grad(lvec.sum(), x_in)
        g = g.detach()
    return logits.detach(), lvec.detach(), g


def pgd(model, x, y, tm: ThreatModel, steps: int = 20, step_size: float = 2 / 255,
        random_start: bool = True, restarts: int = 1, loss: str = "ce",
        seed: int = 0, sample_ids=None) -> AttackOutcome:
    """Projected gradient ascent on the loss within the threat ball.

    Keeps the best post-step iterate per sample (misclassifying ones
    preferred), so extra steps never weaken the attack.  steps=0 returns the
    clean images.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    tracker = _BestTracker(x, y)
    errors = {}
    grad_steps = np.zeros(x.shape[0], dtype=np.int64)

    for r in range(restarts):
        if random_start:
            delta0 = _random_delta(x, tm, seed, ids, 1000 + r)
            x_adv = _clip_to_threat(x + delta0, x, tm)
        else:
            x_adv = x.clone()
        for i in range(steps + 1):
            need_grad = i < steps
            logits, lvec, g = _grad_of(model, x_adv, y, loss, need_grad=need_grad)
            if i > 0:
                tracker.update(x_adv, lvec, logits.argmax(dim=1))
            if not need_grad:
                break
            bad = ~torch.isfinite(_flat(g)).all(dim=1)
            if bad.any():
                for pos in bad.nonzero().flatten().tolist():
                    errors.setdefault(ids[pos], "non-finite gradient")
                g = torch.where(torch.isfinite(g), g, torch.zeros_like(g))
            with torch.no_grad():
                if tm.norm == "linf":
                    x_new = x_adv + step_size * g.sign()
                else:
                    gn = perturbation_norm(g, "l2").clamp_min(1e-12)
                    x_new = x_adv + step_size * g / gn.view(-1, *([1] * (x.dim() - 1)))
                x_adv = _clip_to_threat(x_new, x, tm)
            grad_steps += 1

    x_hat, best_loss = tracker.final(x)
    out = _finalize(model, x, y, x_hat, tm, grad_steps, best_loss, errors)
    if tracker.history:
        out.traces["best_loss"] = np.stack(tracker.history, axis=1)
    return out


def fgsm(model, x, y, tm: ThreatModel, sample_ids=None) -> AttackOutcome:
    """Single signed-gradient step of size eps (L-infinity threat only)."""
    if tm.norm != "linf":
        raise ValueError("FGSM is defined for the L-infinity threat model")
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    errors = {}
    logits, lvec, g = _grad_of(model, x, y, "ce")
    bad = ~torch.isfinite(_flat(g)).all(dim=1)
    if bad.any():
        for pos in bad.nonzero().flatten().tolist():
            errors.setdefault(ids[pos], "non-finite gradient")
        g = torch.where(torch.isfinite(g), g, torch.zeros_like(g))
    with torch.no_grad():
        x_new = x + tm.eps * g.sign()
        x_adv = _clip_to_threat(x_new, x, tm)
        loss_at = _loss_vector("ce", model(x_adv), y)
    return _finalize(
        model, x, y, x_adv, tm,
        np.ones(x.shape[0], dtype=np.int64), loss_at.double().numpy(), errors,
    )


def bim(model, x, y, tm: ThreatModel, steps: int = 10, step_size: float = 2 / 255,
        seed: int = 0, sample_ids=None) -> AttackOutcome:
    """Basic iterative method: PGD started at the clean image, single run."""
    return pgd(model, x, y, tm, steps=steps, step_size=step_size,
               random_start=False, restarts=1, loss="ce", seed=seed,
               sample_ids=sample_ids)


def cw_attack(model, x, y, tm: ThreatModel, steps: int = 50,
              step_size: float | None = None,
              seed: int = 0, sample_ids=None) -> AttackOutcome:
    """Margin-loss PGD within the threat budget (benchmark-style CW).

    Already-misclassified inputs are returned untouched.
    """
    x = x.detach()
    y = _as_long(y)
    if step_size is None:
        step_size = tm.eps / 4
    with torch.no_grad():
        clean_pred = model(x).argmax(dim=1)
    clean_wrong = clean_pred != y
    out = pgd(model, x, y, tm, steps=steps, step_size=step_size,
              random_start=False, restarts=1, loss="cw", seed=seed,
              sample_ids=sample_ids)
    if clean_wrong.any():
        keep = clean_wrong.view(-1, *([1] * (x.dim() - 1)))
        x_hat = torch.where(keep, x, out.x_adv)
        out = _finalize(model, x, y, x_hat, tm, out.iterations, out.best_loss,
                        out.errors)
    return out


def apgd(model, x, y, tm: ThreatModel, steps: int = 50, loss: str = "ce",
         seed: int = 0, random_start: bool = False, y_target=None,
         sample_ids=None) -> AttackOutcome:
    """Auto-step-size PGD: momentum ascent, step halved at checkpoints that
    fail an improvement test, restart from the best-loss iterate; the step
    size never increases.
    """
    if steps < 1:
        raise ValueError("apgd needs steps >= 1")
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    if y_target is not None:
        y_target = _as_long(y_target)
    errors = {}
    ndim_tail = [1] * (x.dim() - 1)

    if random_start:
        delta0 = _random_delta(x, tm, seed, ids, 2000)
        x_adv = _clip_to_threat(x + delta0, x, tm)
    else:
        x_adv = x.clone()

    tracker = _BestTracker(x, y)
    logits, lvec, grad = _grad_of(model, x_adv, y, loss, y_target)
    tracker.update(x_adv, lvec, logits.argmax(dim=1))
    loss_best = lvec.double().clone()
    x_best = x_adv.clone()
    grad_best = grad.clone()

    step = torch.full((x.shape[0], *ndim_tail), 2.0 * tm.eps, dtype=x.dtype)
    n2 = max(int(0.22 * steps), 1)
    n_min = max(int(0.06 * steps), 1)
    size_decr = max(int(0.03 * steps), 1)
    k, counter = n2, 0
    improve_count = torch.zeros(x.shape[0], dtype=torch.long)
    loss_best_last = loss_best.clone()
    reduced_last = torch.ones(x.shape[0], dtype=torch.bool)
    x_adv_old = x_adv.clone()

    for i in range(steps):
        with torch.no_grad():
            momentum = x_adv - x_adv_old
            x_adv_old = x_adv.clone()
            a = 0.75 if i > 0 else 1.0
            if tm.norm == "linf":
                z = _clip_to_threat(x_adv + step * grad.sign(), x, tm)
            else:
                gn = perturbation_norm(grad, "l2").clamp_min(1e-12)
                z = _clip_to_threat(
                    x_adv + step * grad / gn.view(-1, *ndim_tail), x, tm
                )
            x_adv = _clip_to_threat(
                x_adv + (z - x_adv) * a + momentum * (1 - a), x, tm
            )
        logits, lvec, grad = _grad_of(model, x_adv, y, loss, y_target)
        bad = ~torch.isfinite(_flat(grad)).all(dim=1)
        if bad.any():
            for pos in bad.nonzero().flatten().tolist():
                errors.setdefault(ids[pos], "non-finite gradient")
            grad = torch.where(torch.isfinite(grad), grad, torch.zeros_like(grad))
        tracker.update(x_adv, lvec, logits.argmax(dim=1))
        lv = lvec.double()
        improved = lv > loss_best
        improve_count += improved.long()
        mask = improved.view(-1, *ndim_tail)
        x_best = torch.where(mask, x_adv, x_best)
        grad_best = torch.where(mask, grad, grad_best)
        loss_best = torch.where(improved, lv, loss_best)

        counter += 1
        if counter == k:
            cond1 = improve_count < math.ceil(0.75 * k)
            cond2 = (~reduced_last) & (loss_best <= loss_best_last)
            halve = cond1 | cond2
            if halve.any():
                hm = halve.view(-1, *ndim_tail)
                step = torch.where(hm, step / 2.0, step)
                x_adv = torch.where(hm, x_best, x_adv)
                grad = torch.where(hm, grad_best, grad)
            reduced_last = halve.clone()
            loss_best_last = loss_best.clone()
            improve_count.zero_()
            k = max(k - size_decr, n_min)
            counter = 0

    x_hat, best_loss = tracker.final(x)
    return _finalize(
        model, x, y, x_hat, tm,
        np.full(x.shape[0], steps, dtype=np.int64), best_loss, errors,
    )


def _class_gradients(model, x_point):
    """Logits and per-class input gradients (C backward passes)."""
    x_in = x_point.detach().requires_grad_(True)
    logits = model(x_in)
    grads = []
    for c in range(logits.shape[1]):
        (g,) = torch.autograd.grad(
            logits[:, c].sum(), x_in, retain_graph=c < logits.shape[1] - 1
        )
        grads.append(g.detach())
    return logits.detach(), torch.stack(grads, dim=1)  # (B, C, ...)


def fab(model, x, y, tm: ThreatModel, steps: int = 20, seed: int = 0,
        alpha_max: float = 0.1, eta: float = 1.05, beta: float = 0.9,
        sample_ids=None) -> AttackOutcome:
    """Minimal-norm boundary attack: project onto the nearest linearized
    decision boundary each step, biased toward the original point, tracking
    the minimal-norm misclassifying iterate.  The result is clipped into the
    eps-ball; success requires the misclassification to survive the clip.
    """
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    B = x.shape[0]
    tail = [1] * (x.dim() - 1)

    with torch.no_grad():
        clean_pred = model(x).argmax(dim=1)
    found = clean_pred != y
    best_adv = x.clone()
    best_norm = torch.where(
        found,
        torch.zeros(B, dtype=torch.float64),
        torch.full((B,), float("inf"), dtype=torch.float64),
    )

    x_k = x.clone()
    for _ in range(steps):
        logits, jac = _class_gradients(model, x_k)
        z_y = logits.gather(1, y[:, None])
        g_y = jac.gather(1, y.view(-1, 1, *tail).expand(-1, 1, *x.shape[1:]))
        diffs = logits - z_y                 # (B, C)
        w = jac - g_y                        # (B, C, ...)
        w_flat = w.reshape(B, w.shape[1], -1)
        if tm.norm == "linf":
            dual = w_flat.abs().sum(dim=2)
        else:
            dual = w_flat.norm(dim=2)
        dist = diffs.abs() / dual.clamp_min(1e-12)
        dist.scatter_(1, y[:, None], float("inf"))
        c_star = dist.argmin(dim=1)

        w_s = w_flat.gather(1, c_star[:, None, None].expand(-1, 1, w_flat.shape[2]))
        w_s = w_s.squeeze(1)                 # (B, D)
        f_s = diffs.gather(1, c_star[:, None]).squeeze(1)
        x_k_flat = _flat(x_k)
        x0_flat = _flat(x)
        f_orig = f_s + (w_s * (x0_flat - x_k_flat)).sum(dim=1)

        def boundary_step(f_val):
            if tm.norm == "linf":
                denom = w_s.abs().sum(dim=1).clamp_min(1e-12)
                return (-f_val / denom)[:, None] * w_s.sign()
            denom = (w_s * w_s).sum(dim=1).clamp_min(1e-12)
            return (-f_val / denom)[:, None] * w_s

        d_k = boundary_step(f_s)
        d_o = boundary_step(f_orig)
        if tm.norm == "linf":
            nd_k = d_k.abs().amax(dim=1)
            nd_o = d_o.abs().amax(dim=1)
        else:
            nd_k = d_k.norm(dim=1)
            nd_o = d_o.norm(dim=1)
        alpha = (nd_k / (nd_k + nd_o).clamp_min(1e-12)).clamp(0.0, alpha_max)
        a = alpha[:, None]
        x_next_flat = (1 - a) * (x_k_flat + eta * d_k) + a * (x0_flat + eta * d_o)
        x_next = x_next_flat.reshape(x.shape).clamp(tm.box[0], tm.box[1])

        with torch.no_grad():
            pred = model(x_next).argmax(dim=1)
        adv = pred != y
        cur_norm = perturbation_norm(x_next - x, tm.norm).double()
        better = adv & (cur_norm < best_norm)
        best_adv[better] = x_next[better]
        best_norm[better] = cur_norm[better]
        found |= adv

        # bias adversarial iterates back toward the original point
        back = adv.view(-1, *tail)
        x_k = torch.where(back, beta * x + (1 - beta) * x_next, x_next)

    x_hat = _clip_to_threat(best_adv, x, tm)
    return _finalize(
        model, x, y, x_hat, tm,
        np.full(B, steps, dtype=np.int64),
        np.where(np.isfinite(best_norm.numpy()), -best_norm.numpy(), -np.inf),
        {},
    )


def _square_p(frac: float, p_init: float) -> float:
    """Fraction-of-budget schedule for the square side (halving grid)."""
    thresholds = [0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8]
    halvings = sum(frac >= t for t in thresholds)
    return p_init / (2 ** halvings)


def square_attack(model, x, y, tm: ThreatModel, query_budget: int = 1000,
                  seed: int = 0, p_init: float = 0.8,
                  sample_ids=None) -> AttackOutcome:
    """Black-box random search with square patches at +-eps per channel.

    Needs only logits.  A candidate is accepted only if it strictly increases
    the (negative) margin objective.  Deterministic given the seed.
    """
    if tm.norm != "linf":
        raise ValueError("square attack implemented for the L-infinity threat")
    if query_budget < 0:
        raise ValueError("query budget must be >= 0")
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    B, C, H, W = x.shape
    rngs = [_rng(seed, sid, 3000) for sid in ids]

    x_cur = x.clone()
    queries = np.zeros(B, dtype=np.int64)
    if query_budget == 0:
        return _finalize(model, x, y, x_cur, tm, queries,
                         np.full(B, -np.inf), {})

    def objective(batch):
        with torch.no_grad():
            return -cw_margin_loss(model(batch), y, kappa=float("inf")).double()

    obj = objective(x_cur)
    queries += 1
    success = obj > 0
    accepted = [[float(obj[i])] for i in range(B)]

    # stripe initialization: per-channel vertical +-eps stripes
    stripes = np.stack(
        [rngs[i].choice([-1.0, 1.0], size=(C, 1, W)) for i in range(B)]
    )
    cand = torch.clamp(
        x + tm.eps * torch.from_numpy(np.broadcast_to(stripes, x.shape).copy()).to(x.dtype),
        tm.box[0], tm.box[1],
    )
    active = (~success) & torch.from_numpy(queries < query_budget)
    if active.any():
        trial = torch.where(active.view(-1, 1, 1, 1), cand, x_cur)
        obj_t = objective(trial)
        queries += active.numpy().astype(np.int64)
        take = active & (obj_t > obj)
        x_cur = torch.where(take.view(-1, 1, 1, 1), trial, x_cur)
        obj = torch.where(take, obj_t, obj)
        for i in take.nonzero().flatten().tolist():
            accepted[i].append(float(obj[i]))
        success = obj > 0

    while True:
        active = (~success) & torch.from_numpy(queries < query_budget)
        if not active.any():
            break
        cand = x_cur.clone()
        for i in range(B):
            if not active[i]:
                continue
            frac = queries[i] / max(query_budget, 1)
            p = _square_p(frac, p_init)
            side = max(1, int(round(math.sqrt(p * H * W))))
            side = min(side, H, W)
            r = int(rngs[i].integers(0, H - side + 1))
            c = int(rngs[i].integers(0, W - side + 1))
            signs = rngs[i].choice([-1.0, 1.0], size=(C, 1, 1))
            delta = (cand[i] - x[i]).numpy().copy()
            delta[:, r : r + side, c : c + side] = tm.eps * signs
            cand[i] = torch.clamp(
                x[i] + torch.from_numpy(delta).to(x.dtype), tm.box[0], tm.box[1]
            )
        obj_t = objective(cand)
        queries += active.numpy().astype(np.int64)
        take = active & (obj_t > obj)
        x_cur = torch.where(take.view(-1, 1, 1, 1), cand, x_cur)
        obj = torch.where(take, obj_t, obj)
        for i in take.nonzero().flatten().tolist():
            accepted[i].append(float(obj[i]))
        success = obj > 0

    out = _finalize(model, x, y, x_cur, tm, queries, obj.numpy(), {})
    out.traces["accepted"] = accepted
    return out


def _submodel(model, positions):
    if hasattr(model, "subset"):
        return model.subset(positions)
    return model


def dlr_target_classes(logits, y, rank: int):
    """rank-th most probable class excluding the true label (rank = 1, 2, ...)."""
    logits = torch.as_tensor(logits).clone()
    y = _as_long(y)
    logits.scatter_(1, y[:, None], float("-inf"))
    order = logits.argsort(dim=1, descending=True)
    return order[:, rank - 1]


def autoattack(model, x, y, tm: ThreatModel, seed: int = 0, steps: int = 50,
               square_budget: int = 1000, n_target_classes: int = 3,
               sample_ids=None) -> AttackOutcome:
    """Sequential ensemble: APGD-CE, targeted APGD-DLR, FAB, Square.

    A sample broken by an earlier component is skipped by later ones; the
    per-sample result is the first successful adversarial, else the clean
    image.  Component errors are collected per sample, never fatal.
    """
    x = x.detach()
    y = _as_long(y)
    ids = _ids(x, sample_ids)
    B = x.shape[0]
    with torch.no_grad():
        clean_logits = model(x)
    n_classes = clean_logits.shape[1]

    x_adv = x.clone()
    success = np.zeros(B, dtype=bool)
    iterations = np.zeros(B, dtype=np.int64)
    best_loss = np.full(B, -np.inf)
    errors: dict = {}

    components = [("apgd-ce", lambda m, xs, ys, ss: apgd(
        m, xs, ys, tm, steps=steps, loss="ce", seed=seed, sample_ids=ss))]
    if n_classes >= 3:
        targets_all = [
            dlr_target_classes(clean_logits, y, rank)
            for rank in range(1, min(n_target_classes, n_classes - 1) + 1)
        ]
        for rank, tgt in enumerate(targets_all, start=1):
            components.append((
                f"apgd-dlr-t{rank}",
                lambda m, xs, ys, ss, tgt=tgt: apgd(
                    m, xs, ys, tm, steps=steps, loss="dlr-targeted", seed=seed,
                    y_target=tgt[[ids.index(s) for s in ss]], sample_ids=ss),
            ))
    else:
        for sid in ids:
            errors.setdefault(sid, "apgd-dlr skipped: needs >= 3 classes")
    components.append(("fab", lambda m, xs, ys, ss: fab(
        m, xs, ys, tm, steps=steps, seed=seed, sample_ids=ss)))
    components.append(("square", lambda m, xs, ys, ss: square_attack(
        m, xs, ys, tm, query_budget=square_budget, seed=seed, sample_ids=ss)))

    remaining = list(range(B))
    for name, run in components:
        if not remaining:
            break
        pos = torch.as_tensor(remaining)
        sub_ids = [ids[p] for p in remaining]
        try:
            out = run(_submodel(model, remaining), x[pos], y[pos], sub_ids)
        except Exception as exc:  # per-sample isolation of component failures
            for sid in sub_ids:
                errors.setdefault(sid, f"{name}: {exc}")
            continue
        for j, p in enumerate(remaining):
            iterations[p] += out.iterations[j]
            best_loss[p] = max(best_loss[p], out.best_loss[j])
        for j, p in enumerate(remaining):
            if out.success[j]:
                x_adv[p] = out.x_adv[j]
                success[p] = True
        for sid, msg in out.errors.items():
            errors.setdefault(sid, f"{name}: {msg}")
        remaining = [p for p in remaining if not success[p]]

    norms = perturbation_norm(x_adv - x, tm.norm).numpy()
    with torch.no_grad():
        final_pred = model(x_adv).argmax(dim=1).numpy()
    success = final_pred != y.numpy()
    return AttackOutcome(
        x_adv=x_adv, success=success,
        norms=np.asarray(norms, dtype=np.float64),
        iterations=iterations, best_loss=best_loss, errors=errors,
    )


def robust_accuracy(model, dataset, attack, tm: ThreatModel) -> float:
    """Fraction of samples still classified correctly on the attacked images.

    dataset: (x, y) tensors; attack: callable(model, x, y, tm) -> AttackOutcome.
    """
    x, y = dataset
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate robust accuracy on an empty dataset")
    y = _as_long(y)
    out = attack(model, x, y, tm)
    with torch.no_grad():
        pred = model(out.x_adv).argmax(dim=1)
    return float((pred == y).float().mean().item())
