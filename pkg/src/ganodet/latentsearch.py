"""Latent-space inversion: recover the latent whose generated image best
matches a query, and score the query by the final inference loss.

The inference loss combines the reconstruction objective (pixel residual
plus feature-matching residual) with a discriminator term |1 - D(G(z))|
that steers the search toward reconstructions the discriminator rates as
normal. Generator and discriminator parameters stay fixed throughout;
only the latent moves.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam,
    GradientDescent,
    Graph,
    Tensor,
    backward,
    derive_seed,
    seeded_rng,
    uniform_latents,
)
from .config import ExperimentConfig
from .errors import (
    GammaOutOfRangeError,
    LambdaOutOfRangeError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .ganmodel import GanModel


@dataclass
class SearchConfig:
    n_iters: int = 500
    gamma: float = 0.1
    lam: float = 0.1
    lr: float = 0.05
    step_rule: str = "adam"      # or "gd"
    restarts: int = 1
    best_iterate: bool = True    # False: literal last-iterate result

    def validate(self):
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if not (0.0 < self.gamma <= 1.0):
            raise GammaOutOfRangeError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 <= self.lam <= 1.0):
            raise LambdaOutOfRangeError(f"lam must be in [0, 1], got {self.lam}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_rule not in ("adam", "gd"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        return self

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "SearchConfig":
        return cls(n_iters=cfg.n_iters, gamma=cfg.gamma, lam=cfg.lam,
                   lr=cfg.search_lr, step_rule=cfg.step_rule,
                   restarts=cfg.restarts, best_iterate=cfg.best_iterate).validate()


@dataclass
class AnomalyResult:
    z_hat: np.ndarray
    score: float
    residual_map: np.ndarray
    loss_trace: list[float]
    ano_trace: list[float] = field(default_factory=list, repr=False)
    l_r: float = 0.0
    l_d: float = 0.0
    d_gz: float = 0.0
    n_iters_used: int = 0
    seed: int = 0
    item_id: str = ""
    label: int | None = None


# ---- scalar loss pieces ---------------------------------------------------

def residual_loss(x: np.ndarray, g_z: np.ndarray) -> float:
    """Sum of absolute pixel differences between query and reconstruction."""
    x, g_z = np.asarray(x, dtype=np.float64), np.asarray(g_z, dtype=np.float64)
    if x.shape != g_z.shape:
        raise ShapeMismatchError(f"residual: {x.shape} vs {g_z.shape}")
    return float(np.abs(x - g_z).sum())


def discrimination_loss(f_x: np.ndarray, f_gz: np.ndarray) -> float:
    """Sum of absolute differences between discriminator features."""
    f_x = np.asarray(f_x, dtype=np.float64)
    f_gz = np.asarray(f_gz, dtype=np.float64)
    if f_x.shape != f_gz.shape:
        raise ShapeMismatchError(f"features: {f_x.shape} vs {f_gz.shape}")
    return float(np.abs(f_x - f_gz).sum())


def anogan_loss(l_r: float, l_d: float, lam: float) -> float:
    """(1 - lam) * residual + lam * feature-matching."""
    if not (0.0 <= lam <= 1.0):
        raise LambdaOutOfRangeError(f"lam must be in [0, 1], got {lam}")
    return (1.0 - lam) * l_r + lam * l_d


def anomaly_inference_loss(l_ano: float, d_gz: float, gamma: float) -> float:
    """gamma * reconstruction objective + (1 - gamma) * |1 - D(G(z))|."""
    if not (0.0 < gamma <= 1.0):
        raise GammaOutOfRangeError(f"gamma must be in (0, 1], got {gamma}")
    return gamma * l_ano + (1.0 - gamma) * abs(1.0 - d_gz)


# ---- graph-side evaluation --------------------------------------------------

def _loss_graph(model: GanModel, x_const: Tensor, fx_const: Tensor,
                z_t: Tensor, cfg: SearchConfig):
    """Build the inference loss for one latent; returns all the pieces."""
    gz = model.generator.forward(z_t)
    d_gz, f_gz = model.discriminator.forward(gz)
    l_r = (x_const - gz).abs().sum()
    l_d = (fx_const - f_gz).abs().sum()
    l_ano = (1.0 - cfg.lam) * l_r + cfg.lam * l_d
    penalty = (1.0 - d_gz).abs().sum()
    total = cfg.gamma * l_ano + (1.0 - cfg.gamma) * penalty
    return total, l_ano, l_r, l_d, d_gz, gz


def evaluate_inference_loss(model: GanModel, x: np.ndarray, z: np.ndarray,
                            cfg: SearchConfig, with_grad: bool = False):
    """Evaluate the full inference loss at a fixed latent; optionally also
    its gradient with respect to z. Used for the last-iterate mode and by
    the finite-difference checks."""
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x_row.shape[1] != model.n_pixels:
        raise ShapeMismatchError(f"image has {x_row.size} pixels, "
                                 f"model expects {model.n_pixels}")
    x_const = Tensor(x_row)
    _, fx = model.discriminator.forward(x_const)
    fx_const = Tensor(fx.data)
    z_t = Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1),
                 requires_grad=with_grad)
    if with_grad:
        with Graph() as graph:
            total, l_ano, l_r, l_d, d_gz, gz = _loss_graph(
                model, x_const, fx_const, z_t, cfg)
            backward(graph, total)
        grad = z_t.grad.reshape(-1).copy()
    else:
        total, l_ano, l_r, l_d, d_gz, gz = _loss_graph(
            model, x_const, fx_const, z_t, cfg)
        grad = None
    parts = {"l_ano": l_ano.item(), "l_r": l_r.item(), "l_d": l_d.item(),
             "d_gz": float(d_gz.data.reshape(-1)[0]),
             "g_z": gz.data.reshape(-1).copy()}
    return total.item(), grad, parts


# ---- the search -------------------------------------------------------------

def search(model: GanModel, x: np.ndarray, cfg: SearchConfig,
           seed: int) -> AnomalyResult:
    """Iterative latent search for one query image.

    Runs exactly cfg.n_iters update steps per restart; the loss trace
    holds the value at each pre-update iterate. By default the returned
    latent is the best recorded iterate across iterations and restarts
    (the minimum of the trace); best_iterate=False instead takes the
    latent after the final update, evaluated once more outside the trace.
    """
    cfg.validate()
    model.freeze()
    x_row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x_row.shape[1] != model.n_pixels:
        raise ShapeMismatchError(f"image has {x_row.size} pixels, "
                                 f"model expects {model.n_pixels}")
    x_const = Tensor(x_row)
    _, fx = model.discriminator.forward(x_const)
    fx_const = Tensor(fx.data)

    best: AnomalyResult | None = None
    for restart in range(cfg.restarts):
        rng = seeded_rng(seed, restart)
        z_t = Tensor(uniform_latents(rng, 1, model.z_dim), requires_grad=True)
        stepper = (Adam([z_t], lr=cfg.lr) if cfg.step_rule == "adam"
                   else GradientDescent([z_t], lr=cfg.lr))
        trace: list[float] = []
        ano_trace: list[float] = []
        cand: AnomalyResult | None = None
        for i in range(cfg.n_iters):
            z_t.zero_grad()
            with Graph() as graph:
                total, l_ano, l_r, l_d, d_gz, gz = _loss_graph(
                    model, x_const, fx_const, z_t, cfg)
                value = total.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"non-finite inference loss at iteration {i}",
                        trace_position=i)
                trace.append(value)
                ano_trace.append(l_ano.item())
                if cfg.best_iterate and (cand is None or value < cand.score):
                    cand = AnomalyResult(
                        z_hat=z_t.data.reshape(-1).copy(), score=value,
                        residual_map=np.abs(x_row - gz.data).reshape(-1),
                        loss_trace=[], l_r=l_r.item(), l_d=l_d.item(),
                        d_gz=float(d_gz.data.reshape(-1)[0]))
                backward(graph, total)
            stepper.step()
        if not cfg.best_iterate:
            value, _, parts = evaluate_inference_loss(
                model, x_row, z_t.data, cfg)
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    "non-finite inference loss at final iterate",
                    trace_position=cfg.n_iters)
            cand = AnomalyResult(
                z_hat=z_t.data.reshape(-1).copy(), score=value,
                residual_map=np.abs(x_row.reshape(-1) - parts["g_z"]),
                loss_trace=[], l_r=parts["l_r"], l_d=parts["l_d"],
                d_gz=parts["d_gz"])
        cand.loss_trace = trace
        cand.ano_trace = ano_trace
        if best is None or cand.score < best.score:
            best = cand

    best.n_iters_used = cfg.n_iters
    best.seed = seed
    return best


def item_seed(seed: int, index: int) -> int:
    """Per-item seed; deterministic in (seed, index) and independent of
    scheduling."""
    return derive_seed(seed, index)


_POOL_STATE: dict = {}


def _pool_init(state_bytes: bytes, image_h: int, image_w: int, cfg: SearchConfig):
    _POOL_STATE["model"] = GanModel.from_state_bytes(
        state_bytes, image_h, image_w).freeze()
    _POOL_STATE["cfg"] = cfg


def _pool_run(args):
    index, x, seed_i = args
    try:
        return index, search(_POOL_STATE["model"], x, _POOL_STATE["cfg"],
                             seed_i)
    except NonFiniteLossError as err:
        # exceptions cross the process boundary as values so the failing
        # item index survives
        return index, ("error", str(err), err.trace_position)


def score_batch(model: GanModel, xs, cfg: SearchConfig, seed: int,
                workers: int = 1, item_ids=None, labels=None
                ) -> list[AnomalyResult]:
    """Search every image; element i uses item_seed(seed, i), so results
    do not depend on worker count or schedule."""
    cfg.validate()
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    n = len(xs)
    seeds = [item_seed(seed, i) for i in range(n)]
    results: list[AnomalyResult | None] = [None] * n

    if workers <= 1 or n <= 1:
        for i, (x, s) in enumerate(zip(xs, seeds)):
            try:
                results[i] = search(model, x, cfg, s)
            except NonFiniteLossError as err:
                err.item_id = _item_id(item_ids, i)
                raise
    else:
        with ProcessPoolExecutor(
                max_workers=workers, initializer=_pool_init,
                initargs=(model.state_bytes(), model.image_h, model.image_w,
                          cfg)) as pool:
            for index, res in pool.map(
                    _pool_run, [(i, xs[i], seeds[i]) for i in range(n)]):
                if isinstance(res, tuple) and res and res[0] == "error":
                    raise NonFiniteLossError(
                        res[1], trace_position=res[2],
                        item_id=_item_id(item_ids, index))
                results[index] = res

    for i, res in enumerate(results):
        res.item_id = _item_id(item_ids, i)
        res.label = None if labels is None else int(labels[i])
    return results


def _item_id(item_ids, i: int) -> str:
    return str(item_ids[i]) if item_ids is not None else str(i)


# ---- external interfaces -----------------------------------------------------

CSV_COLUMNS = ["item_id", "label", "score", "l_r", "l_d", "d_gz",
               "n_iters_used", "seed"]


def write_scores_csv(path, results: list[AnomalyResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow([r.item_id, "" if r.label is None else r.label,
                             repr(r.score), repr(r.l_r), repr(r.l_d),
                             repr(r.d_gz), r.n_iters_used, r.seed])


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for row in reader:
            rows.append({
                "item_id": row["item_id"],
                "label": None if row["label"] == "" else int(row["label"]),
                "score": float(row["score"]), "l_r": float(row["l_r"]),
                "l_d": float(row["l_d"]), "d_gz": float(row["d_gz"]),
                "n_iters_used": int(row["n_iters_used"]),
                "seed": int(row["seed"])})
        return rows


def write_pgm(path, residual_map: np.ndarray, image_h: int, image_w: int) -> None:
    """Binary 8-bit PGM; pixels are the residual scaled by its maximum."""
    img = np.asarray(residual_map, dtype=np.float64).reshape(image_h, image_w)
    peak = img.max()
    scaled = np.zeros_like(img) if peak <= 0 else 255.0 * img / peak
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image_w} {image_h}\n255\n".encode())
        fh.write(data.tobytes())
