"""Fully-connected generator / discriminator pair and the training loop.

The discriminator is paid to score real normals toward 1 and both
generated and known-abnormal images toward 0; the abnormal penalty term
enters its objective with weight (1 - gamma), so gamma = 1 is exactly
the plain adversarial baseline. The generator only ever sees the
adversarial signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Graph, Tensor, backward, seeded_rng, uniform_latents
from .checkpoint import dump_tensors, parse_tensors, save_checkpoint
from .config import ExperimentConfig
from .errors import (
    DivergenceDetectedError,
    EmptyBatchError,
    EmptyNormalSetError,
    GammaOutOfRangeError,
    ShapeMismatchError,
)


class Dense:
    """Affine layer; weight is (fan_in, fan_out), bias a row vector."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight).broadcast_add_row(self.bias)

    @staticmethod
    def init(rng: np.random.Generator, fan_in: int, fan_out: int,
             scale: float) -> "Dense":
        w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
        return Dense(Tensor(w, requires_grad=True),
                     Tensor(np.zeros(fan_out), requires_grad=True))

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Generator:
    """Maps latents to image vectors; leaky-relu hidden layers, tanh out
    so pixels stay inside [-1, 1]."""

    def __init__(self, layers: list[Dense]):
        self.layers = layers

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for layer in self.layers[:-1]:
            h = layer(h).leaky_relu()
        return self.layers[-1](h).tanh()

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


class Discriminator:
    """Maps image vectors to a sigmoid score; the last hidden activation
    doubles as the feature representation for feature matching."""

    def __init__(self, layers: list[Dense]):
        self.layers = layers

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for layer in self.layers[:-1]:
            h = layer(h).leaky_relu()
        features = h
        score = self.layers[-1](h).sigmoid()
        return score, features

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


class GanModel:
    def __init__(self, generator: Generator, discriminator: Discriminator,
                 z_dim: int, image_h: int, image_w: int):
        if z_dim < 1:
            raise ValueError(f"z_dim must be >= 1, got {z_dim}")
        self.generator = generator
        self.discriminator = discriminator
        self.z_dim = z_dim
        self.image_h = image_h
        self.image_w = image_w

    @property
    def n_pixels(self) -> int:
        return self.image_h * self.image_w

    def params(self) -> list[Tensor]:
        return self.generator.params() + self.discriminator.params()

    def set_trainable(self, generator: bool, discriminator: bool):
        for p in self.generator.params():
            p.requires_grad = generator
            if generator and p.grad is None:
                p.grad = np.zeros_like(p.data)
        for p in self.discriminator.params():
            p.requires_grad = discriminator
            if discriminator and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def freeze(self) -> "GanModel":
        self.set_trainable(False, False)
        return self

    # ---- checkpointing --------------------------------------------------

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("generator", self.generator),
                            ("discriminator", self.discriminator)):
            for i, layer in enumerate(net.layers):
                out[f"{prefix}.{i}.weight"] = layer.weight.data
                out[f"{prefix}.{i}.bias"] = layer.bias.data
        return out

    def state_bytes(self) -> bytes:
        return dump_tensors(self.named_params())

    def save(self, path):
        save_checkpoint(path, self.named_params())

    @classmethod
    def from_named_params(cls, tensors: dict[str, np.ndarray],
                          image_h: int, image_w: int) -> "GanModel":
        """Rebuild a model from checkpoint tensors; the architecture is
        implied by the stored shapes."""

        def collect(prefix):
            layers = []
            i = 0
            while f"{prefix}.{i}.weight" in tensors:
                w = Tensor(tensors[f"{prefix}.{i}.weight"], requires_grad=True)
                b = Tensor(tensors[f"{prefix}.{i}.bias"], requires_grad=True)
                layers.append(Dense(w, b))
                i += 1
            if not layers:
                raise ValueError(f"checkpoint holds no {prefix} layers")
            return layers

        gen = Generator(collect("generator"))
        disc = Discriminator(collect("discriminator"))
        z_dim = gen.layers[0].weight.shape[0]
        n_pix = gen.layers[-1].weight.shape[1]
        if n_pix != image_h * image_w:
            raise ShapeMismatchError(
                f"checkpoint generates {n_pix} pixels, split has "
                f"{image_h}x{image_w}")
        return cls(gen, disc, z_dim, image_h, image_w)

    @classmethod
    def from_state_bytes(cls, blob: bytes, image_h: int, image_w: int):
        return cls.from_named_params(parse_tensors(blob), image_h, image_w)


def build_model(cfg: ExperimentConfig, image_h: int, image_w: int) -> GanModel:
    """Seeded construction; (seed, architecture) fully determines the
    initial parameters."""
    rng = seeded_rng(cfg.seed, 0xA11)
    n_pix = image_h * image_w
    g_widths = [cfg.z_dim, *cfg.gen_hidden, n_pix]
    d_widths = [n_pix, *cfg.disc_hidden, 1]
    gen = Generator([
        Dense.init(rng, g_widths[i], g_widths[i + 1],
                   scale=math.sqrt(2.0) if i < len(g_widths) - 2 else 1.0)
        for i in range(len(g_widths) - 1)])
    disc = Discriminator([
        Dense.init(rng, d_widths[i], d_widths[i + 1],
                   scale=math.sqrt(2.0) if i < len(d_widths) - 2 else 1.0)
        for i in range(len(d_widths) - 1)])
    return GanModel(gen, disc, cfg.z_dim, image_h, image_w)


# ---- forward helpers (inference, no graph) -------------------------------

def generate(generator: Generator, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != generator.layers[0].weight.shape[0]:
        raise ShapeMismatchError(f"latent batch has shape {z.shape}")
    return generator.forward(Tensor(z)).data


def discriminate(disc: Discriminator, x: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != disc.layers[0].weight.shape[0]:
        raise ShapeMismatchError(f"image batch has shape {x.shape}")
    score, features = disc.forward(Tensor(x))
    return score.data, features.data


# ---- losses --------------------------------------------------------------

def adversarial_losses(d_real: Tensor, d_fake: Tensor,
                       g_loss: str = "nonsaturating") -> tuple[Tensor, Tensor]:
    """Discriminator adversarial loss and generator loss, both negated
    for minimization.

    loss_d_adv = -mean(ln d_real) - mean(ln(1 - d_fake)). The generator
    default is the non-saturating -mean(ln d_fake); "literal" selects the
    original mean(ln(1 - d_fake)) for fidelity runs.
    """
    if d_real.size == 0 or d_fake.size == 0:
        raise EmptyBatchError("adversarial loss over an empty score batch")
    loss_d = -(d_real.log().mean()) - ((1.0 - d_fake).log().mean())
    return loss_d, generator_loss(d_fake, g_loss)


def generator_loss(d_fake: Tensor, g_loss: str = "nonsaturating") -> Tensor:
    if d_fake.size == 0:
        raise EmptyBatchError("generator loss over an empty score batch")
    if g_loss == "nonsaturating":
        return -(d_fake.log().mean())
    if g_loss == "literal":
        return (1.0 - d_fake).log().mean()
    raise ValueError(f"unknown g_loss {g_loss!r}")


def anomaly_penalty_loss(d_abn: Tensor) -> Tensor:
    """-mean(ln(1 - d_abn)): treats known abnormals as one more kind of
    generated image, pushing their scores toward 0."""
    if d_abn.size == 0:
        raise EmptyBatchError("anomaly penalty over an empty score batch")
    return -((1.0 - d_abn).log().mean())


def discriminator_total_loss(loss_d_adv, loss_an, gamma: float):
    """gamma * adversarial + (1 - gamma) * abnormal penalty. Works on
    floats or graph tensors."""
    if not (0.0 < gamma <= 1.0):
        raise GammaOutOfRangeError(f"gamma must be in (0, 1], got {gamma}")
    return gamma * loss_d_adv + (1.0 - gamma) * loss_an


# ---- training -------------------------------------------------------------

@dataclass
class TrainReport:
    config_hash: str
    seed: int
    checkpoint_path: str
    per_epoch: list[dict] = field(default_factory=list)
    iterations: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "checkpoint_path": self.checkpoint_path,
                "per_epoch": self.per_epoch, "iterations": self.iterations}


def _batch_starts(n: int, batch_size: int) -> list[tuple[int, int]]:
    if n < batch_size:
        return [(0, n)]
    return [(s, s + batch_size) for s in range(0, n - batch_size + 1, batch_size)]


def train(model: GanModel, normals: np.ndarray, abnormals: np.ndarray,
          cfg: ExperimentConfig, checkpoint_path=None,
          on_epoch_end=None) -> TrainReport:
    """Alternating one discriminator step and one generator step per
    iteration. Abnormal batches are resampled with replacement; when
    gamma == 1 (or no abnormals exist) the penalty term and its sampling
    are skipped entirely, which keeps gradients and the RNG stream
    bit-identical to a run without abnormals.

    Raises DivergenceDetectedError on any non-finite loss, after writing
    the last epoch-boundary parameters to checkpoint_path.
    """
    cfg.validate()
    normals = np.asarray(normals, dtype=np.float64)
    if normals.ndim != 2 or normals.shape[0] == 0:
        raise EmptyNormalSetError("training requires a non-empty normal set")
    abnormals = np.asarray(abnormals, dtype=np.float64)
    if abnormals.size == 0:
        abnormals = abnormals.reshape(0, normals.shape[1])

    shuffle_rng = seeded_rng(cfg.seed, 1)
    z_rng = seeded_rng(cfg.seed, 2)
    abn_rng = seeded_rng(cfg.seed, 3)

    use_penalty = cfg.gamma < 1.0 and abnormals.shape[0] > 0
    opt_g = Adam(model.generator.params(), lr=cfg.lr_g)
    opt_d = Adam(model.discriminator.params(), lr=cfg.lr_d)

    report = TrainReport(config_hash=cfg.config_hash(), seed=cfg.seed,
                         checkpoint_path=str(checkpoint_path or ""))
    last_good = model.state_bytes()

    def diverged(epoch, iteration, values):
        if all(math.isfinite(v) for v in values):
            return False
        if checkpoint_path is not None:
            with open(checkpoint_path, "wb") as fh:
                fh.write(last_good)
        return True

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(normals.shape[0])
        epoch_records = []
        for it, (lo, hi) in enumerate(_batch_starts(normals.shape[0],
                                                    cfg.batch_size)):
            real = normals[order[lo:hi]]
            bs = real.shape[0]

            # discriminator step; generated images enter as constants
            z = uniform_latents(z_rng, bs, model.z_dim)
            fake = generate(model.generator, z)
            model.set_trainable(generator=False, discriminator=True)
            with Graph() as graph:
                d_real, _ = model.discriminator.forward(Tensor(real))
                d_fake, _ = model.discriminator.forward(Tensor(fake))
                loss_d_adv, _ = adversarial_losses(d_real, d_fake, cfg.g_loss)
                if use_penalty:
                    abn = abnormals[abn_rng.integers(0, abnormals.shape[0],
                                                     size=bs)]
                    d_abn, _ = model.discriminator.forward(Tensor(abn))
                    loss_an = anomaly_penalty_loss(d_abn)
                    loss_d_total = discriminator_total_loss(
                        loss_d_adv, loss_an, cfg.gamma)
                    loss_an_val = loss_an.item()
                else:
                    loss_an_val = 0.0
                    loss_d_total = discriminator_total_loss(
                        loss_d_adv, 0.0, cfg.gamma)
                backward(graph, loss_d_total)
            loss_d_adv_val = loss_d_adv.item()
            loss_d_total_val = loss_d_total.item()
            opt_d.step()

            # generator step; discriminator parameters frozen
            z = uniform_latents(z_rng, bs, model.z_dim)
            model.set_trainable(generator=True, discriminator=False)
            with Graph() as graph:
                fake_t = model.generator.forward(Tensor(z))
                d_fake2, _ = model.discriminator.forward(fake_t)
                loss_g = generator_loss(d_fake2, cfg.g_loss)
                backward(graph, loss_g)
            loss_g_val = loss_g.item()
            opt_g.step()
            model.set_trainable(generator=True, discriminator=True)

            values = (loss_d_adv_val, loss_an_val, loss_d_total_val, loss_g_val)
            if diverged(epoch, it, values):
                raise DivergenceDetectedError(
                    f"non-finite loss at epoch {epoch} iteration {it}",
                    epoch=epoch, iteration=it)
            record = {"epoch": epoch, "iteration": it,
                      "loss_d_adv": loss_d_adv_val, "loss_an": loss_an_val,
                      "loss_d_total": loss_d_total_val, "loss_g": loss_g_val}
            epoch_records.append(record)
            report.iterations.append(record)

        report.per_epoch.append({
            "epoch": epoch,
            "loss_d_adv": float(np.mean([r["loss_d_adv"] for r in epoch_records])),
            "loss_an": float(np.mean([r["loss_an"] for r in epoch_records])),
            "loss_d_total": float(np.mean([r["loss_d_total"]
                                           for r in epoch_records])),
            "loss_g": float(np.mean([r["loss_g"] for r in epoch_records])),
        })
        last_good = model.state_bytes()
        if on_epoch_end is not None:
            on_epoch_end(model, epoch)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return report
