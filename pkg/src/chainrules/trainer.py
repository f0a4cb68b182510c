import copy
import csv
import logging
import os
import time

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np

from chainrules import model
from chainrules.kg import Kg
from chainrules.model import ModelConfig, checkpoint, layers
from chainrules.model.layers import Params
from chainrules.optim import Adam
from chainrules.sampler import PathSample, SamplerConfig, sample_paths


_LOGGER = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class GradientError(NumericalError):
    def __init__(self, tensor: str) -> None:
        NumericalError.__init__(self, f"gradient of {tensor} is not finite")
        self.tensor = tensor


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, last_good: Params) -> None:
        NumericalError.__init__(
            self,
            f"training diverged at epoch {epoch}; last good parameters kept",
        )
        self.epoch = epoch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 500
    epochs: int = 1000
    learning_rate: float = 1e-4
    seed: int = 0
    d: int = 512
    window_size: int = 2
    n_max: int = 3
    open_ratio: float = 0.1
    # Paths drawn per sampling round.
    samples: int = 10000
    # Epochs between fresh samplings; None samples once up front.
    resample_every: Optional[int] = None
    checkpoint_every: Optional[int] = None
    encoder: str = "rnn"
    selection: str = "hard"
    dtype: str = "float64"
    threads: int = 1

    def __post_init__(self) -> None:
        for name in ("batch_size", "d", "samples", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must not be negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must not be negative")
        for name in ("resample_every", "checkpoint_every"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f"{name} must be positive")
        # Validates the model and sampler fields.
        self.model_config()
        self.sampler_config(0)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            window_size=self.window_size,
            encoder=self.encoder,
            selection=self.selection,
            seed=self.seed,
            dtype=self.dtype,
        )

    def sampler_config(self, round_: int) -> SamplerConfig:
        seed = self.seed
        if round_:
            seed = int(np.random.SeedSequence([self.seed, round_]).generate_state(1)[0])
        return SamplerConfig(
            n_max=self.n_max,
            open_ratio=self.open_ratio,
            count=self.samples,
            seed=seed,
            threads=self.threads,
        )

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


class LogRow(NamedTuple):
    epoch: int
    loss: float
    seconds: float


class FitResult(NamedTuple):
    params: Params
    log: List[LogRow]


Batch = Tuple[np.ndarray, np.ndarray]


def _group(batch: Sequence[PathSample], null_id: int) -> Dict[int, Batch]:
    by_length: Dict[int, List[PathSample]] = {}
    for s in batch:
        by_length.setdefault(len(s.body), []).append(s)
    groups: Dict[int, Batch] = {}
    for length in sorted(by_length):
        members = by_length[length]
        bodies = np.asarray([s.body for s in members], dtype=np.int64)
        heads = np.asarray([s.head for s in members], dtype=np.int64)
        groups[length] = (bodies, model.class_index(heads, null_id))
    return groups


def _batch_loss_and_grad(
    params: Params,
    cfg: ModelConfig,
    bodies: np.ndarray,
    targets: np.ndarray,
    total: int,
    rng: Optional[np.random.Generator] = None,
    with_grad: bool = True,
) -> Tuple[float, Optional[Params]]:
    """Summed loss of one equal-length group, and the gradient of the loss
    averaged over ``total`` samples."""
    theta, cache = model.forward_batch(params, cfg, bodies, rng)
    rows = np.arange(len(targets))
    # From the logits: theta underflows to 0 long before they overflow.
    log_theta = layers.log_softmax(cache.final_attend.logits, axis=1)
    loss_sum = float(-log_theta[rows, targets].sum())
    if not np.isfinite(loss_sum):
        raise NumericalError("loss is not finite")
    if not with_grad:
        return loss_sum, None
    g_logits = theta.copy()
    g_logits[rows, targets] -= 1.0
    g_logits /= total
    return loss_sum, model.backward_batch(params, cfg, cache, g_logits)


def loss_and_grad(
    params: Params,
    cfg: ModelConfig,
    batch: Sequence[PathSample],
    with_grad: bool = True,
) -> Tuple[float, Optional[Params]]:
    if not batch:
        raise ValueError("batch is empty")
    null_id = model.num_heads(params)
    total = len(batch)
    rng = np.random.default_rng(cfg.seed) if cfg.selection == "random" else None
    loss_sum = 0.0
    grads: Optional[Params] = None
    for bodies, targets in _group(batch, null_id).values():
        part, g = _batch_loss_and_grad(
            params, cfg, bodies, targets, total, rng, with_grad
        )
        loss_sum += part
        if g is not None:
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
    if grads is not None:
        for name, value in grads.items():
            if not np.all(np.isfinite(value)):
                raise GradientError(name)
    return loss_sum / total, grads


def loss(params: Params, cfg: ModelConfig, batch: Sequence[PathSample]) -> float:
    """Mean cross-entropy of the final head distribution; the null head is
    slot 0."""
    value, _ = loss_and_grad(params, cfg, batch, with_grad=False)
    return value


def grad(params: Params, cfg: ModelConfig, batch: Sequence[PathSample]) -> Params:
    _, grads = loss_and_grad(params, cfg, batch)
    assert grads is not None
    return grads


def gradient_check(
    params: Params,
    cfg: ModelConfig,
    batch: Sequence[PathSample],
    step: float = 1e-5,
) -> Dict[str, float]:
    """Relative error, per tensor, between the analytic gradient and central
    differences, ``|a - n| / max(|a| + |n|, 1e-6)`` over the tensor.  The
    floor keeps tensors with no gradient (the selector of an unreduced
    body) from reporting rounding noise as error."""
    analytic = grad(params, cfg, batch)
    errors: Dict[str, float] = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        shifted = {k: v.copy() for k, v in params.items()}
        flat = shifted[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss(shifted, cfg, batch)
            flat[i] = original - step
            minus = loss(shifted, cfg, batch)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * step)
        diff = float(np.linalg.norm(analytic[name] - numeric))
        scale = float(np.linalg.norm(analytic[name]) + np.linalg.norm(numeric))
        errors[name] = diff / max(scale, 1e-6)
    return errors


def _epoch_batches(
    groups: Dict[int, Batch],
    batch_size: int,
    rng: np.random.Generator,
) -> List[Batch]:
    batches: List[Batch] = []
    for bodies, targets in groups.values():
        order = rng.permutation(len(targets))
        for start in range(0, len(order), batch_size):
            part = order[start : start + batch_size]
            batches.append((bodies[part], targets[part]))
    return [batches[i] for i in rng.permutation(len(batches))]


def epoch_checkpoint_path(path: str, epoch: int) -> str:
    """``m.npz`` checkpointed at epoch 20 goes to ``m.e0020.npz``."""
    stem, ext = os.path.splitext(path)
    return "%s.e%04d%s" % (stem, epoch, ext or ".npz")


def fit(
    kg: Kg,
    cfg: TrainConfig,
    samples: Optional[Sequence[PathSample]] = None,
    checkpoint_path: Optional[str] = None,
    provenance: str = "",
) -> FitResult:
    """Sample, batch by body length, and minimize cross-entropy with Adam."""
    model_cfg = cfg.model_config()
    init_seq, shuffle_seq, select_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = model.init_params(
        model_cfg, kg.num_relations, np.random.default_rng(init_seq)
    )
    log: List[LogRow] = []
    if cfg.epochs == 0:
        return FitResult(params, log)

    def save(p: Params, epoch: Optional[int] = None) -> None:
        if checkpoint_path is None:
            return
        path = checkpoint_path
        if epoch is not None:
            path = epoch_checkpoint_path(checkpoint_path, epoch)
        checkpoint.save(path, p, model_cfg, kg.relations, provenance)

    if samples is None:
        samples = sample_paths(kg, cfg.sampler_config(0))
    groups = _group(samples, kg.null_id)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    select_rng = np.random.default_rng(select_seq)
    optimizer = Adam(cfg.learning_rate)
    last_good = copy.deepcopy(params)
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        if cfg.resample_every and epoch > 1 and (epoch - 1) % cfg.resample_every == 0:
            round_ = (epoch - 1) // cfg.resample_every
            groups = _group(sample_paths(kg, cfg.sampler_config(round_)), kg.null_id)
        total = 0.0
        count = 0
        try:
            for bodies, targets in _epoch_batches(groups, cfg.batch_size, shuffle_rng):
                rng = select_rng if model_cfg.selection == "random" else None
                part, grads = _batch_loss_and_grad(
                    params, model_cfg, bodies, targets, len(targets), rng
                )
                assert grads is not None
                for name, value in grads.items():
                    if not np.all(np.isfinite(value)):
                        raise GradientError(name)
                optimizer.step(params, grads)
                total += part
                count += len(targets)
        except NumericalError as e:
            _LOGGER.error("Epoch %d: %s", epoch, e)
            save(last_good)
            raise TrainingDiverged(epoch, last_good) from e
        epoch_loss = total / count
        seconds = time.perf_counter() - start
        log.append(LogRow(epoch, epoch_loss, seconds))
        _LOGGER.debug("Epoch %d loss %.6f (%.1fs)", epoch, epoch_loss, seconds)
        last_good = copy.deepcopy(params)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save(params, epoch)
    save(params)
    _LOGGER.info(
        "Trained %d epochs, final loss %.6f, %.1fs",
        cfg.epochs,
        log[-1].loss,
        log[-1].seconds,
    )
    return FitResult(params, log)


def step_time(
    params: Params,
    cfg: ModelConfig,
    batch: Sequence[PathSample],
    repeats: int = 5,
) -> float:
    """Mean wall-clock seconds of one loss, gradient and Adam step."""
    shifted = copy.deepcopy(params)
    optimizer = Adam(0.0)
    loss_and_grad(shifted, cfg, batch)
    start = time.perf_counter()
    for _ in range(repeats):
        _, grads = loss_and_grad(shifted, cfg, batch)
        assert grads is not None
        optimizer.step(shifted, grads)
    return (time.perf_counter() - start) / repeats


def write_log(log: Sequence[LogRow], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(LogRow._fields)
    for row in log:
        writer.writerow([row.epoch, repr(row.loss), "%.3f" % row.seconds])
