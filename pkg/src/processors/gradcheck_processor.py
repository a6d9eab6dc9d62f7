"""Finite-difference verification of every layer and of the end-to-end source network."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..fm import FMParams, fm_forward
from ..models import CNNTextParams, SourceParams, TransformParams, transform, transnet_source_forward
from ..nn.layers import (DropoutMask, apply_dropout_mask, conv_text_forward, dropout, fc_forward, l1_loss, l2_loss,
                         max_pool)
from ..nn.tensor import Parameter, Tensor, compute_gradients
from .embedding_processor import EmbeddingTable, lookup

logger = logging.getLogger(__name__)

# Tiny dimensions: text length, embedding width, filters, window, latent width, FM rank
TINY = {'T': 8, 'd': 4, 'm': 3, 't': 2, 'n': 3, 'k': 2}
TINY_VOCAB_ROWS = 40
TINY_BATCH = 2

LAYERS = ('conv', 'max_pool', 'fc', 'dropout', 'fm', 'transform', 'l1_loss', 'l2_loss', 'source_network')


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of the scalar `f()` with respect to every entry of `array`.

    `array` is perturbed in place and restored after each entry.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = f()
        array[index] = original - eps
        minus = f()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """||a - n|| / max(||a||, ||n||, floor), norms taken over the whole parameter tensor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Parameter], eps: float,
                    floor: float = 1e-3) -> Dict[str, float]:
    """Compare back-propagated and finite-difference gradients; worst relative error per parameter."""
    for p in params:
        p.zero_grad()
    compute_gradients(build_loss(), params)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    def value() -> float:
        return build_loss().item()

    return {p.name: relative_error(analytic[p.name], numerical_gradient(value, p.data, eps), floor) for p in params}


def pool_margin(features: np.ndarray) -> float:
    """Smallest gap between the largest and second-largest value along the last axis."""
    if features.shape[-1] < 2:
        return float('inf')
    top = np.sort(features, axis=-1)[..., -2:]
    return float(np.min(top[..., 1] - top[..., 0]))


@dataclass
class LayerResult:
    layer: str
    checks: int = 0
    max_rel_error: float = 0.0

    def update(self, errors: Dict[str, float]):
        self.checks += 1
        if errors:
            self.max_rel_error = max(self.max_rel_error, max(errors.values()))


@dataclass
class GradcheckReport:
    instances: int
    eps: float
    tolerance: float
    layers: Dict[str, LayerResult] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.layers.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_text(self) -> str:
        lines = ['layer\tchecks\tmax_rel_error']
        lines += [f"{r.layer}\t{r.checks}\t{r.max_rel_error:.3e}" for r in self.layers.values()]
        lines.append(f"all\t{self.instances}\t{self.max_rel_error:.3e}")
        return '\n'.join(lines) + '\n'

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding='utf-8')
        return path


def _randomize(params: Sequence[Parameter], rng: np.random.Generator, scale: float):
    for p in params:
        p.data[...] = rng.normal(0.0, scale, size=p.shape)


class GradcheckProcessor:
    """Runs the finite-difference suite over random tiny configurations in 64-bit."""

    def __init__(self, instances: int = 100, seed: int = 0, eps: float = 1e-3, tolerance: float = 1e-4,
                 scale: float = 0.2, margin: Optional[float] = None):
        if instances < 1:
            raise ValueError(f"instances must be >= 1, got {instances}")
        self.instances = instances
        self.seed = seed
        self.eps = eps
        self.tolerance = tolerance
        # inputs and weights are drawn near initialization scale, where tanh is unsaturated
        self.scale = scale
        # a kink closer than this (per unit of input magnitude) to the evaluation point is resampled;
        # a step of eps moves a max-pool gap by at most 2 eps times the largest input
        self.margin = 4.0 * eps if margin is None else margin

    def _draw(self, rng, shape, away_from_zero: bool = False) -> np.ndarray:
        values = rng.normal(0.0, self.scale, size=shape)
        if away_from_zero:
            while (np.abs(values) < self.margin).any():
                values = rng.normal(0.0, self.scale, size=shape)
        return values

    @staticmethod
    def _projection(rng, shape) -> np.ndarray:
        return rng.normal(0.0, 1.0, size=shape)

    def check_conv(self, rng) -> Dict[str, float]:
        T, d, m, t = TINY['T'], TINY['d'], TINY['m'], TINY['t']
        V = Parameter(self._draw(rng, (TINY_BATCH, T, d)), name='V')
        filters = Parameter(self._draw(rng, (m, t, d)), name='filters')
        biases = Parameter(self._draw(rng, (m,)), name='biases')
        proj = self._projection(rng, (TINY_BATCH, m, T - t + 1))
        return check_gradients(lambda: (conv_text_forward(V, filters, biases) * proj).sum(),
                                [V, filters, biases], self.eps)

    def check_max_pool(self, rng) -> Dict[str, float]:
        shape = (TINY_BATCH, TINY['m'], TINY['T'] - TINY['t'] + 1)
        values = self._draw(rng, shape)
        while pool_margin(values) < self.margin:
            values = self._draw(rng, shape)
        features = Parameter(values, name='features')
        proj = self._projection(rng, shape[:-1])
        return check_gradients(lambda: (max_pool(features)[0] * proj).sum(), [features], self.eps)

    def check_fc(self, rng) -> Dict[str, float]:
        m, n = TINY['m'], TINY['n']
        O = Parameter(self._draw(rng, (TINY_BATCH, m)), name='O')
        W = Parameter(self._draw(rng, (m, n)), name='W')
        g = Parameter(self._draw(rng, (n,)), name='g')
        proj = self._projection(rng, (TINY_BATCH, n))
        return check_gradients(lambda: (fc_forward(O, W, g) * proj).sum(), [O, W, g], self.eps)

    def check_dropout(self, rng) -> Dict[str, float]:
        """Eval-mode identity and the training path under a fixed mask."""
        x = Parameter(self._draw(rng, (TINY_BATCH, TINY['n'])), name='x')
        proj = self._projection(rng, x.shape)
        mask = DropoutMask(rng.random(x.shape) < 0.5, 0.5)
        errors = check_gradients(lambda: (dropout(x, 0.5, False, None)[0] * proj).sum(), [x], self.eps)
        masked = check_gradients(lambda: (apply_dropout_mask(x, mask) * proj).sum(), [x], self.eps)
        return {'eval': errors['x'], 'masked': masked['x']}

    def check_fm(self, rng) -> Dict[str, float]:
        p, k = 2 * TINY['n'], TINY['k']
        fm = FMParams.initialize('fm', p, k, rng)
        _randomize(fm.parameters(), rng, self.scale)
        z = Parameter(self._draw(rng, (TINY_BATCH, p)), name='z')
        proj = self._projection(rng, (TINY_BATCH,))
        return check_gradients(lambda: (fm_forward(z, fm) * proj).sum(), [z] + fm.parameters(), self.eps)

    def check_transform(self, rng) -> Dict[str, float]:
        n = TINY['n']
        params = TransformParams.initialize('transform', n, int(rng.integers(1, 4)), rng)
        _randomize(params.parameters(), rng, self.scale)
        z0 = Parameter(self._draw(rng, (TINY_BATCH, 2 * n)), name='z0')
        proj = self._projection(rng, (TINY_BATCH, n))
        return check_gradients(lambda: (transform(z0, params) * proj).sum(), [z0] + params.parameters(), self.eps)

    def check_l1(self, rng) -> Dict[str, float]:
        prediction = Parameter(self._draw(rng, (TINY_BATCH,)), name='prediction')
        target = prediction.data + self._draw(rng, (TINY_BATCH,), away_from_zero=True)
        return check_gradients(lambda: l1_loss(prediction, target), [prediction], self.eps)

    def check_l2(self, rng) -> Dict[str, float]:
        shape = (TINY_BATCH, TINY['n'])
        a_values, b_values = self._draw(rng, shape), self._draw(rng, shape)
        # the norm form curves sharply near zero distance
        while np.linalg.norm(a_values - b_values, axis=-1).min() < self.scale:
            a_values, b_values = self._draw(rng, shape), self._draw(rng, shape)
        a, b = Parameter(a_values, name='a'), Parameter(b_values, name='b')
        squared = check_gradients(lambda: l2_loss(a, b, squared=True), [a, b], self.eps)
        norm = check_gradients(lambda: l2_loss(a, b, squared=False), [a, b], self.eps)
        return {**{f"squared.{k}": v for k, v in squared.items()}, **{f"norm.{k}": v for k, v in norm.items()}}

    def check_source_network(self, rng) -> Dict[str, float]:
        """r_S with respect to every source parameter, eval mode."""
        T, d, m, t, n, k = (TINY[key] for key in ('T', 'd', 'm', 't', 'n', 'k'))
        table = EmbeddingTable(rng.normal(0.0, self.scale, size=(TINY_VOCAB_ROWS, d)))
        required = self.margin * max(1.0, float(np.abs(table.matrix).max()))
        while True:
            params = SourceParams(
                gamma_a=CNNTextParams.initialize('gamma_a', m, t, d, n, rng),
                gamma_b=CNNTextParams.initialize('gamma_b', m, t, d, n, rng),
                transform=TransformParams.initialize('transform', n, int(rng.integers(1, 4)), rng),
                fm_s=FMParams.initialize('fm_s', n, k, rng),
            )
            _randomize(params.parameters(), rng, self.scale)
            text_a = rng.integers(0, TINY_VOCAB_ROWS, size=(TINY_BATCH, T))
            text_b = rng.integers(0, TINY_VOCAB_ROWS, size=(TINY_BATCH, T))
            margins = [pool_margin(conv_text_forward(lookup(table, text), gamma.filters, gamma.biases).data)
                       for text, gamma in ((text_a, params.gamma_a), (text_b, params.gamma_b))]
            if min(margins) >= required:
                break
        proj = self._projection(rng, (TINY_BATCH,))

        def build_loss():
            _, _, r_s, _ = transnet_source_forward(text_a, text_b, params, table, training=False)
            return (r_s * proj).sum()

        return check_gradients(build_loss, params.parameters(), self.eps)

    def run(self) -> GradcheckReport:
        report = GradcheckReport(self.instances, self.eps, self.tolerance,
                                 layers={name: LayerResult(name) for name in LAYERS})
        checks = {name: getattr(self, f"check_{name.replace('_loss', '')}") for name in LAYERS}
        started = time.perf_counter()
        for instance in range(self.instances):
            rng = np.random.default_rng([self.seed, instance])
            for name, check in checks.items():
                report.layers[name].update(check(rng))
        report.seconds = time.perf_counter() - started

        for result in report.layers.values():
            logger.info(f"gradcheck {result.layer}: {result.checks} checks, max relative error {result.max_rel_error:.3e}")
        status = 'passed' if report.passed else 'FAILED'
        logger.info(f"gradcheck {status}: max relative error {report.max_rel_error:.3e} "
                    f"(tolerance {self.tolerance:.0e}) in {report.seconds:.1f}s")
        return report
