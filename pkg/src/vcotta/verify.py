"""Executable acceptance checks. Each ``check_*`` returns a :class:`CheckResult`
whose :meth:`~CheckResult.line` is a one-line pass/fail summary.

Checks 1-7 and 12 are exact or small numerical properties and run in seconds.
Checks 8-11 run the desk-scale stream experiments and take minutes per seed.
"""

from __future__ import annotations

import functools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import (PARAM_KEYS, ForwardCache, VariationalNet, backward, clone_frozen, draw_noise, forward, forward_mean,
                  _kl_terms, gaussian_kl, kl_between, kl_gradients)
from .divergence import categorical_kl, mixture, mixture_kl_bound
from .engine import AdaptConfig, compute_alpha, ema_update
from .harness import ExperimentSpec, desk_preset, make_datasets, prepare_source, run_experiment, run_pipeline, sweep
from .metrics import error_rate
from .numcore import Rng, argmax_rows, log_softmax_rows, relative_error, softplus
from .objectives import ce_to_teacher, mean_entropy, nll_supervised, sce_to_teacher, student_loss_and_grads
from .plots import loop_errors
from .stream import augment
from .warmup import pretrain_source, train_bnn_direct, variational_warmup


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] criterion {self.criterion:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(criterion: int, name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs) -> CheckResult:
            t0 = time.perf_counter()
            passed, detail = fn(*args, **kwargs)
            return CheckResult(criterion, name, bool(passed), detail, time.perf_counter() - t0)
        run.criterion = criterion
        return run
    return wrap


def _random_net(dims, rng: Rng, rho_range=(-3.0, 0.0)) -> VariationalNet:
    net = VariationalNet.random(dims, rng)
    for layer in net.layers:
        for key in PARAM_KEYS:
            shape = layer.get(key).shape
            if key.endswith("mu"):
                layer.set(key, layer.get(key) + 0.3 * rng.normal(shape))
            else:
                layer.set(key, rng.uniform(shape, *rho_range))
    return net


def _dirichlet(rng: Rng, size: int, count: int | None = None) -> np.ndarray:
    shape = (size,) if count is None else (count, size)
    g = -np.log(rng.uniform(shape, 1e-12, 1.0))
    return g / g.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- 1-7: properties


@_timed(1, "closed-form Gaussian KL vs Monte Carlo")
def check_kl_closed_form(seed: int = 0, pairs: int = 100, samples: int = 10**6, chunk: int = 250_000):
    rng = Rng(seed)
    worst = 0.0
    for _ in range(pairs):
        d = int(rng.integers(1, 9))
        mq, mp = rng.normal(d), rng.normal(d)
        sq, sp = rng.uniform(d, 0.5, 2.0), rng.uniform(d, 0.5, 2.0)
        exact = gaussian_kl(mq, sq, mp, sp)
        # log q(x) - log p(x) at x = mq + sq z
        a, b, c = (mq - mp) / sp, sq / sp, np.sum(np.log(sp / sq))
        total, total_sq = 0.0, 0.0
        for start in range(0, samples, chunk):
            m = min(chunk, samples - start)
            z = rng.normal((m, d))
            diff = 0.5 * np.sum((a + b * z) ** 2 - z * z, axis=1) + c
            total += diff.sum()
            total_sq += (diff * diff).sum()
        mean = total / samples
        se = np.sqrt(max(total_sq / samples - mean * mean, 0.0) / samples)
        tol = max(0.01 * abs(exact), 3.0 * se)
        worst = max(worst, abs(mean - exact) / tol)
    return worst <= 1.0, f"worst |mc - exact| / tolerance = {worst:.3f} over {pairs} pairs"


@_timed(2, "mixture KL bound")
def check_mixture_kl_bound(seed: int = 0, pairs: int = 1000):
    rng = Rng(seed)
    min_slack = np.inf
    for _ in range(pairs):
        k, c = int(rng.integers(1, 9)), int(rng.integers(2, 17))
        w, w2 = _dirichlet(rng, k), _dirichlet(rng, k)
        comps, comps2 = _dirichlet(rng, c, k), _dirichlet(rng, c, k)
        lhs, rhs = mixture_kl_bound(w, comps, w2, comps2)
        min_slack = min(min_slack, rhs - lhs)
    w, comps = _dirichlet(rng, 3), _dirichlet(rng, 6, 3)
    lhs_eq, rhs_eq = mixture_kl_bound(w, comps, w.copy(), comps.copy())
    equal_ok = abs(lhs_eq) <= 1e-12 and abs(rhs_eq) <= 1e-12
    return min_slack >= -1e-12 and equal_ok, (
        f"min slack {min_slack:.3e}; equal mixtures give ({lhs_eq:.1e}, {rhs_eq:.1e})")


@_timed(3, "mixture advantage inequality")
def check_mixture_advantage(seed: int = 0, triples: int = 1000):
    rng = Rng(seed)
    min_slack = np.inf
    done = 0
    while done < triples:
        c = int(rng.integers(2, 11))
        p1, pbar, phat = _dirichlet(rng, c), _dirichlet(rng, c), _dirichlet(rng, c)
        if categorical_kl(pbar, phat) < categorical_kl(p1, phat):
            p1, pbar = pbar, p1
        ref = categorical_kl(pbar, phat)
        for a in np.round(np.arange(0.1, 1.0, 0.1), 1):
            mixed = mixture([a, 1 - a], np.stack([p1, pbar]))
            min_slack = min(min_slack, ref - categorical_kl(mixed, phat))
        done += 1
    return min_slack >= -1e-12, f"min slack {min_slack:.3e} over {triples} triples x 9 weights"


def _param_fd(net: VariationalNet, f, h: float = 1e-5) -> np.ndarray:
    """Central differences over every (mu, rho) coordinate, perturbing in place.

    ``f`` may return a vector; the result then has one row per coordinate.
    """
    out = []
    for layer in net.layers:
        for key in PARAM_KEYS:
            flat = layer.get(key).reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                up = np.asarray(f(), dtype=np.float64)
                flat[i] = old - h
                down = np.asarray(f(), dtype=np.float64)
                flat[i] = old
                out.append((up - down) / (2 * h))
    return np.array(out)


def _kl_fd(net: VariationalNet, prior: VariationalNet, h: float = 1e-5) -> np.ndarray:
    """Central differences of KL(net || prior), all coordinates at once.

    The divergence is a sum of independent per-coordinate terms, so moving one
    coordinate changes only its own term and the difference can be vectorized.
    """
    out = []
    for lq, lp in zip(net.layers, prior.layers):
        for part in ("weight", "bias"):
            q, p = getattr(lq, part), getattr(lp, part)
            mq, rq = q.mu.ravel(), q.rho.ravel()
            mp, sp = p.mu.ravel(), p.sigma.ravel()
            sq = softplus(rq)
            out.append((_kl_terms(mq + h, sq, mp, sp) - _kl_terms(mq - h, sq, mp, sp)) / (2 * h))
            out.append((_kl_terms(mq, softplus(rq + h), mp, sp) - _kl_terms(mq, softplus(rq - h), mp, sp)) / (2 * h))
    return np.concatenate(out)


GRAD_DIMS = ([3, 5, 4], [4, 8, 3], [6, 16, 16, 5], [4, 32, 32, 3], [4, 64, 64, 3])


@_timed(4, "analytic gradients vs finite differences")
def check_gradients(seed: int = 0, trials: int = 20, batch: int = 8, tol: float = 1e-4):
    rng = Rng(seed)
    worst: dict[str, float] = {}

    def note(name, analytic, numeric):
        worst[name] = max(worst.get(name, 0.0), relative_error(analytic, numeric))

    for t in range(trials):
        dims = GRAD_DIMS[t % len(GRAD_DIMS)]
        net, source, teacher = (_random_net(dims, rng) for _ in range(3))
        x = rng.normal((batch, dims[0]))
        labels = rng.integers(0, dims[-1], batch)
        target = log_softmax_rows(2.0 * rng.normal((batch, dims[-1])))
        noise = draw_noise(net, batch, rng)

        losses = {"nll": lambda z: nll_supervised(z, labels, with_grad=True),
                  "ce": lambda z: ce_to_teacher(z, target, with_grad=True),
                  "sce": lambda z: sce_to_teacher(z, target, with_grad=True),
                  "entropy": lambda z: mean_entropy(z, with_grad=True)}
        # one perturbed forward pass serves every data loss
        numeric = _param_fd(net, lambda: [fn(forward(net, x, noise))[0] for fn in losses.values()])
        for j, (name, fn) in enumerate(losses.items()):
            cache = ForwardCache()
            _, d = fn(forward(net, x, noise, cache))
            note(name, backward(net, cache, d).to_vector(), numeric[:, j])

        fd_src, fd_tea = _kl_fd(net, source), _kl_fd(net, teacher)
        note("kl_source", kl_gradients(net, source).to_vector(), fd_src)
        note("kl_teacher", kl_gradients(net, teacher).to_vector(), fd_tea)

        alpha = float(rng.uniform((), 0.05, 0.95))
        use_sce = bool(t % 2)
        cfg = AdaptConfig(use_sce=use_sce, kl_scale=0.05, lambda_ce=1.0)
        loss, g = student_loss_and_grads(net, x, target, source, teacher, alpha, cfg, noise=noise)
        data = losses["sce" if use_sce else "ce"]
        value = data(forward(net, x, noise))[0] + cfg.kl_scale * (
            alpha * kl_between(net, source) + (1 - alpha) * kl_between(net, teacher))
        # the objective is linear in these pieces, so its differences combine the same way
        numeric = numeric[:, 2 if use_sce else 1] + cfg.kl_scale * (alpha * fd_src + (1 - alpha) * fd_tea)
        note("objective", g.to_vector(), numeric)
        worst["objective value"] = max(worst.get("objective value", 0.0),
                                       abs(loss.total - value) / max(abs(value), 1e-12))
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return top < tol, f"max relative error {top:.2e} ({detail})"


@_timed(5, "EMA identities")
def check_ema(seed: int = 0, steps: int = 100, beta: float = 0.9):
    rng = Rng(seed)
    dims = [5, 16, 16, 3]
    student = _random_net(dims, rng)
    teacher = _random_net(dims, rng)

    same = clone_frozen(teacher)
    ema_update(same, student, 1.0)
    frozen_ok = np.array_equal(same.to_vector(), teacher.to_vector())

    copied = clone_frozen(teacher)
    ema_update(copied, student, 0.0)
    copy_ok = np.array_equal(copied.to_vector(), student.to_vector())

    t = clone_frozen(teacher)
    for _ in range(steps):
        ema_update(t, student, beta)
    decay = beta ** steps
    err = 0.0
    for lt, l0, ls in zip(t.layers, teacher.layers, student.layers):
        for part in ("weight", "bias"):
            a, b, c = getattr(lt, part), getattr(l0, part), getattr(ls, part)
            err = max(err, np.max(np.abs(a.mu - (decay * b.mu + (1 - decay) * c.mu))),
                      np.max(np.abs(a.sigma - (decay * b.sigma + (1 - decay) * c.sigma))))
    return frozen_ok and copy_ok and err <= 1e-10, (
        f"beta=1 unchanged: {frozen_ok}; beta=0 copies: {copy_ok}; "
        f"max deviation from beta^k after {steps} steps {err:.2e}")


@_timed(6, "alpha behaviour")
def check_alpha(seed: int = 0):
    rng = Rng(seed)
    dims = [6, 16, 4]
    net = _random_net(dims, rng)
    x = rng.normal((32, 6))
    augs = augment(x, 8, rng)
    a_same = compute_alpha(net, clone_frozen(net), x, augs, 1.0)

    worst_flat = 0.0
    for _ in range(20):
        a, b = _random_net(dims, rng), _random_net(dims, rng)
        xb = 3.0 * rng.normal((16, 6))
        worst_flat = max(worst_flat, abs(compute_alpha(a, b, xb, augment(xb, 4, rng), 1e6) - 0.5))

    # confident source, uniform teacher
    source = VariationalNet.from_means([10.0 * np.eye(6)[:, :4]], [np.zeros(4)], ["identity"])
    teacher = VariationalNet.from_means([np.zeros((6, 4))], [np.zeros(4)], ["identity"])
    xh = np.tile(np.eye(6)[:4], (8, 1))
    a_high = compute_alpha(source, teacher, xh, augment(xh, 8, rng), 0.1)
    ok = abs(a_same - 0.5) <= 1e-12 and worst_flat < 1e-3 and a_high > 0.99
    return ok, f"identical nets {a_same:.15f}; tau=1e6 max |a-0.5| {worst_flat:.1e}; high teacher entropy {a_high:.6f}"


@_timed(7, "warm-up parity")
def check_warmup_parity(seed: int = 0, direct_epochs: int = 50):
    spec = desk_preset()
    spec.seed = seed
    rng = Rng(seed)
    train, test = make_datasets(spec, rng.spawn(0))
    dims = [train.dim, *spec.dataset.hidden, train.class_count]
    det = pretrain_source(dims, train, spec.pretrain, rng.spawn(1))
    warm = variational_warmup(det, train, spec.warmup, rng.spawn(2))
    direct = train_bnn_direct(dims, train, direct_epochs, rng.spawn(3))

    def err(logits):
        return error_rate(argmax_rows(logits), test.labels)

    e_det, e_warm, e_direct = err(det.logits(test.features)), err(forward_mean(warm, test.features)), err(
        forward_mean(direct, test.features))
    ok = abs(e_warm - e_direct) <= 0.02 and abs(e_warm - e_det) <= 0.02
    return ok, f"test error: deterministic {e_det:.4f}, warm-up {e_warm:.4f}, direct BNN {e_direct:.4f}"


# ---------------------------------------------------------------- 8-11: stream experiments


def stream_spec(seed: int, method: str = "vcotta", schedule: str = "standard") -> ExperimentSpec:
    spec = desk_preset()
    spec.seed = seed
    spec.method = method
    spec.schedule = schedule
    spec.name = f"{method}_{schedule}_{seed}"
    return spec


@functools.lru_cache(maxsize=None)
def _prepared(seed: int):
    return prepare_source(stream_spec(seed))


@functools.lru_cache(maxsize=None)
def standard_runs(seed: int) -> dict:
    """Mean error/NLL/Brier per method on the standard stream, plus the vcotta run time."""
    out = {}
    for method in ("vcotta", "source_only", "entropy_min_baseline"):
        t0 = time.perf_counter()
        record, _, _ = run_pipeline(stream_spec(seed, method), _prepared(seed))
        out[method] = {k: record.segment_mean(k) for k in ("error", "nll", "brier")}
        out[method]["seconds"] = time.perf_counter() - t0
    return out


SEEDS_5 = (0, 1, 2, 3, 4)
SEEDS_3 = (0, 1, 2)


@_timed(8, "adaptation benefit on the blob stream")
def check_adaptation_benefit(seeds=SEEDS_5, margin: float = 0.02, budget: float = 300.0):
    wins, parts = 0, []
    for s in seeds:
        r = standard_runs(s)
        vc, src, ent = r["vcotta"]["error"], r["source_only"]["error"], r["entropy_min_baseline"]["error"]
        secs = sum(m["seconds"] for m in r.values())
        win = vc <= src - margin and vc < ent and secs < budget
        wins += win
        parts.append(f"s{s} {vc:.4f}/{src:.4f}/{ent:.4f}{'' if win else '*'}")
    need = len(seeds) - 1 if len(seeds) > 1 else 1
    return wins >= need, f"{wins}/{len(seeds)} seeds; error vcotta/source/entmin: " + ", ".join(parts)


@_timed(9, "calibration direction")
def check_calibration(seeds=SEEDS_5):
    wins, parts = 0, []
    for s in seeds:
        r = standard_runs(s)
        vc, src = r["vcotta"], r["source_only"]
        win = vc["nll"] <= src["nll"] and vc["brier"] <= src["brier"]
        wins += win
        parts.append(f"s{s} nll {vc['nll']:.3f}/{src['nll']:.3f} brier {vc['brier']:.3f}/{src['brier']:.3f}"
                     f"{'' if win else '*'}")
    need = len(seeds) - 1 if len(seeds) > 1 else 1
    return wins >= need, f"{wins}/{len(seeds)} seeds (vcotta/source): " + "; ".join(parts)


@_timed(10, "long-term stability over 10 loops")
def check_loop_stability(seeds=SEEDS_3, loops: int = 10, budget: float = 900.0):
    wins, parts = 0, []
    for s in seeds:
        rises = {}
        t0 = time.perf_counter()
        for method in ("vcotta", "entropy_min_baseline"):
            spec = stream_spec(s, method, "loops")
            spec.schedule_params.loops = loops
            record, _, _ = run_pipeline(spec, _prepared(s))
            errs = loop_errors(record, len(spec.schedule_params.kinds))
            rises[method] = errs[-1] - errs[1]
        secs = time.perf_counter() - t0
        win = rises["vcotta"] <= rises["entropy_min_baseline"] and secs < budget
        wins += win
        parts.append(f"s{s} {rises['vcotta']:+.4f}/{rises['entropy_min_baseline']:+.4f}{'' if win else '*'}")
    return wins == len(seeds), f"{wins}/{len(seeds)} seeds; loop 2->{loops} rise vcotta/entmin: " + ", ".join(parts)


@_timed(11, "mixture-weight ablation")
def check_mixture_ablation(seeds=SEEDS_3):
    wins, parts = 0, []
    for s in seeds:
        rows = sweep(stream_spec(s), "mixture_weights", write=False)
        ok_rows = [r for r in rows if r["status"] == "ok"]
        errs = {r["value"]: r["error"] for r in ok_rows}
        win = len(rows) == 4 and len(ok_rows) == 4 and errs["adaptive"] == min(errs.values())
        wins += win
        parts.append(f"s{s} " + "/".join(f"{errs.get(v, float('nan')):.4f}" for v in ("1", "0.5", "0", "adaptive"))
                     + ("" if win else "*"))
    return wins >= 2, f"{wins}/{len(seeds)} seeds adaptive best; error a=1/0.5/0/adaptive: " + ", ".join(parts)


# ---------------------------------------------------------------- 12: reproducibility


def small_spec(seed: int = 0, method: str = "vcotta") -> ExperimentSpec:
    spec = desk_preset()
    spec.seed = seed
    spec.method = method
    spec.dataset.dim = 8
    spec.dataset.hidden = (16,)
    spec.dataset.classes = 4
    spec.dataset.train_per_class = 60
    spec.dataset.test_per_class = 30
    spec.pretrain.epochs = 10
    spec.warmup.epochs = 2
    spec.adapt.n_augment = 4
    spec.schedule_params.batch_size = 40
    spec.schedule_params.kinds = ("gauss_noise", "brightness_shift", "contrast_scale")
    return spec


@_timed(12, "byte-identical reruns")
def check_reproducible(seed: int = 0):
    same = []
    with tempfile.TemporaryDirectory() as tmp:
        for method in ("vcotta", "source_only", "entropy_min_baseline"):
            blobs = []
            for _ in range(2):
                spec = small_spec(seed, method)
                spec.output_dir = str(Path(tmp) / method)
                run_experiment(spec)
                blobs.append([(Path(spec.output_dir) / f).read_bytes()
                              for f in ("batches.csv", "segments.csv", "config.yaml")])
            same.append(blobs[0] == blobs[1])
    return all(same), f"identical outputs per method (vcotta, source_only, entmin): {same}"


PROPERTY_CHECKS = (check_kl_closed_form, check_mixture_kl_bound, check_mixture_advantage, check_gradients,
                   check_ema, check_alpha, check_warmup_parity, check_reproducible)
STREAM_CHECKS = (check_adaptation_benefit, check_calibration, check_loop_stability, check_mixture_ablation)
ALL_CHECKS = tuple(sorted(PROPERTY_CHECKS + STREAM_CHECKS, key=lambda c: c.criterion))


def run_checks(which=None, echo=print) -> list[CheckResult]:
    """Run the selected criteria (all when ``which`` is None), echoing one line each."""
    chosen = [c for c in ALL_CHECKS if which is None or c.criterion in set(which)]
    results = []
    for check in chosen:
        res = check()
        echo(res.line())
        results.append(res)
    return results
