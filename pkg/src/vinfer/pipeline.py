"""Synthetic segmented model: causal mixing segments, noise, decoding and attacks.

A model is ``L`` segments of ``layers_per_segment`` causal mixing layers. Each
layer maps row ``t`` using only rows ``<= t`` (through a running prefix mean),
so a batched prefill and a token-by-token decode produce identical rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .bitstats import OFF_CHAIN, accept, compare_arrays
from .commitments import HiddenState
from .errors import ShapeMismatch

PHASES = ("prefill", "decode", "verify_prefill")


@dataclass(frozen=True)
class ArithmeticMode:
    kind: str = "full_precision"
    bits: int = 0

    def __post_init__(self):
        if self.kind not in ("full_precision", "quantized", "custom"):
            raise ValueError(f"unknown arithmetic mode {self.kind!r}")
        if self.kind == "quantized" and not 2 <= self.bits <= 16:
            raise ValueError("quantized mode needs 2..16 bits")


FULL_PRECISION = ArithmeticMode()


def quantized(bits: int) -> ArithmeticMode:
    return ArithmeticMode("quantized", bits)


def fake_quant(x: np.ndarray, bits: int, axis: int = -1) -> np.ndarray:
    """Symmetric round-to-grid along ``axis`` (one scale per slice)."""
    qmax = np.float32(2 ** (bits - 1) - 1)
    scale = np.max(np.abs(x), axis=axis, keepdims=True) / qmax
    scale = np.where(scale == 0, np.float32(1), scale).astype(np.float32)
    return (np.round(x / scale) * scale).astype(np.float32)


@dataclass(frozen=True)
class ModelConfig:
    n_segments: int = 4
    hidden_dim: int = 32
    layers_per_segment: int = 1
    vocab_size: int = 256
    seed: int = 0
    eos_id: int = 0
    model_id: str = "synthetic"

    def __post_init__(self):
        if self.n_segments < 1 or self.layers_per_segment < 1:
            raise ValueError("need at least one segment and one layer per segment")
        if not 4 <= self.hidden_dim <= 1024:
            raise ValueError("hidden_dim out of range")

    @cached_property
    def embedding(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xE3B])
        return rng.standard_normal((self.vocab_size, self.hidden_dim)).astype(np.float32)

    @cached_property
    def head(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x4EAD])
        return rng.standard_normal((self.hidden_dim, self.vocab_size)) / np.sqrt(self.hidden_dim)

    def segment(self, index: int, mode: ArithmeticMode = FULL_PRECISION) -> "SegmentModel":
        if not 1 <= index <= self.n_segments:
            raise ValueError(f"segment {index} outside 1..{self.n_segments}")
        return SegmentModel(self, index, mode)

    def segments(self, mode: ArithmeticMode = FULL_PRECISION) -> list["SegmentModel"]:
        return [self.segment(i, mode) for i in range(1, self.n_segments + 1)]

    def slice_of(self, index: int) -> tuple[int, int]:
        lo = (index - 1) * self.layers_per_segment + 1
        return lo, lo + self.layers_per_segment - 1


_WEIGHT_CACHE: dict = {}


def _layer_weights(seed: int, d: int, layer: int):
    key = (seed, d, layer)
    if key not in _WEIGHT_CACHE:
        rng = np.random.default_rng([seed, 0x5E6, layer])
        w = (rng.standard_normal((d, d)) * (0.6 / np.sqrt(d))).astype(np.float32)
        u = (rng.standard_normal((d, d)) * (0.6 / np.sqrt(d))).astype(np.float32)
        b = (rng.standard_normal(d) * 0.1).astype(np.float32)
        _WEIGHT_CACHE[key] = (w, u, b)
    return _WEIGHT_CACHE[key]


class SegmentModel:
    """One contiguous block of layers; weights are a pure function of the model seed."""

    def __init__(self, config: ModelConfig, segment_index: int, mode: ArithmeticMode = FULL_PRECISION):
        self.config = config
        self.segment_index = segment_index
        self.mode = mode
        lo, hi = config.slice_of(segment_index)
        layers = [_layer_weights(config.seed, config.hidden_dim, layer) for layer in range(lo, hi + 1)]
        if mode.kind == "quantized":
            layers = [(fake_quant(w, mode.bits, axis=0), fake_quant(u, mode.bits, axis=0), b)
                      for w, u, b in layers]
        self.layers = layers

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def is_head(self) -> bool:
        return self.segment_index == 1

    @property
    def is_tail(self) -> bool:
        return self.segment_index == self.config.n_segments

    @property
    def ops_per_row(self) -> int:
        d = self.hidden_dim
        # two d x d mat-vecs (mul + add each) plus prefix mean, softsign and residual
        return self.n_layers * (4 * d * d + 6 * d)


@dataclass(frozen=True)
class NoiseModel:
    """Honest floating-point drift: relative jitter plus rare exponent flips (x8 or /8)."""

    rel_scale: float = 0.0
    flip_prob: float = 0.0
    seed: int = 0

    @property
    def is_zero(self) -> bool:
        return self.rel_scale == 0.0 and self.flip_prob == 0.0

    def with_seed(self, seed: int) -> "NoiseModel":
        return replace(self, seed=seed)


ZERO_NOISE = NoiseModel()
# Calibrated defaults; see experiments.calibrate_noise for the search that produced them.
DEFAULT_NOISE = NoiseModel(rel_scale=1.5e-7, flip_prob=5e-7)
FLIP_FACTOR = np.float32(8.0)


class NoiseSource:
    """Per-(seed, segment) uniform stream; row p always receives the same draws."""

    def __init__(self, model: NoiseModel, segment_index: int, width: int):
        self.model = model
        self.width = width
        self._rng = np.random.default_rng([model.seed, segment_index, 0x7015E])
        self._draws = np.empty((0, width, 3))

    def _rows(self, start: int, stop: int) -> np.ndarray:
        have = self._draws.shape[0]
        if stop > have:
            extra = self._rng.random((stop - have, self.width, 3))
            self._draws = np.concatenate([self._draws, extra])
        return self._draws[start:stop]

    def perturb(self, values: np.ndarray, start: int) -> np.ndarray:
        if self.model.is_zero:
            return values
        u = self._rows(start, start + values.shape[0])
        z = (u[..., 0] * 2.0 - 1.0) * np.sqrt(3.0)
        out = (values.astype(np.float64) * (1.0 + self.model.rel_scale * z)).astype(np.float32)
        flips = u[..., 1] < self.model.flip_prob
        if flips.any():
            up = u[..., 2] < 0.5
            out = np.where(flips & up, out * FLIP_FACTOR, out)
            out = np.where(flips & ~up, out / FLIP_FACTOR, out)
        return out


class CostMeter:
    """Floating-op counts per (phase, segment)."""

    def __init__(self):
        self.counts: dict[tuple[str, int], int] = {}

    def add(self, phase: str, segment: int, ops: int) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if ops < 0:
            raise ValueError("op counts only grow")
        key = (phase, segment)
        self.counts[key] = self.counts.get(key, 0) + ops

    def total(self, phase: str | None = None, segment: int | None = None) -> int:
        return sum(v for (p, s), v in self.counts.items()
                   if (phase is None or p == phase) and (segment is None or s == segment))

    def reset(self) -> None:
        self.counts.clear()


class SegmentRunner:
    """Stateful executor for one segment over one sequence (keeps prefix sums)."""

    def __init__(self, model: SegmentModel, noise: NoiseModel = ZERO_NOISE,
                 meter: CostMeter | None = None):
        self.model = model
        self.noise = NoiseSource(noise, model.segment_index, model.hidden_dim)
        self.meter = meter
        d = model.hidden_dim
        self.csums = [np.zeros(d, dtype=np.float32) for _ in model.layers]
        self.position = 0

    def run(self, inputs: np.ndarray, phase: str = "prefill") -> np.ndarray:
        model = self.model
        if model.is_head:
            ids = np.asarray(inputs, dtype=np.int64).reshape(-1)
            x = model.config.embedding[ids]
        else:
            x = np.asarray(inputs, dtype=np.float32)
            if x.ndim != 2 or x.shape[1] != model.hidden_dim:
                raise ShapeMismatch(f"segment {model.segment_index} expects (*, {model.hidden_dim}), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=np.float32)
        n = x.shape[0]
        quant = model.mode.kind == "quantized"
        for (w, u, b), csum in zip(model.layers, self.csums):
            if quant:
                x = fake_quant(x, model.mode.bits)
            x = kernels.causal_mix(x, csum, self.position, w, u, b)
        if quant:
            x = fake_quant(x, model.mode.bits)
        x = self.noise.perturb(x, self.position)
        self.position += n
        if self.meter is not None:
            self.meter.add(phase, model.segment_index, n * model.ops_per_row)
        return x


def segment_forward(model: SegmentModel, s_in, noise: NoiseModel = ZERO_NOISE,
                    meter: CostMeter | None = None, phase: str = "prefill") -> np.ndarray:
    """Full causal pass of one segment over every row of ``s_in`` (tokens for segment 1)."""
    values = s_in.values if isinstance(s_in, HiddenState) else s_in
    return SegmentRunner(model, noise, meter).run(values, phase)


def verify_prefill(segment: SegmentModel, inputs, noise: NoiseModel = ZERO_NOISE,
                   meter: CostMeter | None = None) -> np.ndarray:
    """Verifier recomputation: one batched pass over the whole sequence."""
    if not isinstance(inputs, np.ndarray) and not segment.is_head:
        inputs = np.concatenate([getattr(s, "values", s) for s in inputs])
    return segment_forward(segment, inputs, noise, meter, phase="verify_prefill")


def decode_logits(config: ModelConfig, row: np.ndarray) -> np.ndarray:
    return np.asarray(row, dtype=np.float64) @ config.head


def decode_step(config: ModelConfig, tail_row: np.ndarray) -> int:
    """Greedy decode of one final-segment row."""
    return int(np.argmax(decode_logits(config, tail_row)))


def decode_rows(config: ModelConfig, rows: np.ndarray) -> list[int]:
    return [decode_step(config, r) for r in rows]


# attacks ---------------------------------------------------------------------

@dataclass(frozen=True)
class Attack:
    """Inferencer deviation: identity, quantize(bits), early_stop(stop_at) or forged_output."""

    kind: str = "identity"
    bits: int = 8
    stop_at: int = 0
    small_dim: int = 8
    stages: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "quantize", "early_stop", "forged_output"):
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.kind == "early_stop" and self.stop_at < 1:
            raise ValueError("early_stop needs stop_at >= 1")

    def applies_to(self, stage: int) -> bool:
        return self.stages is None or stage in self.stages


IDENTITY = Attack()


def quantize(bits: int = 8, stages=None) -> Attack:
    return Attack("quantize", bits=bits, stages=stages)


def early_stop(stop_at: int) -> Attack:
    return Attack("early_stop", stop_at=stop_at)


def forged_output(small_dim: int = 8) -> Attack:
    return Attack("forged_output", small_dim=small_dim)


# generation ------------------------------------------------------------------

@dataclass
class GenerationResult:
    """Tokens plus every boundary state: ``states[i - 1][t - 1]`` is segment i's output at step t."""

    prompt: list[int]
    tokens: list[int]
    stop_reason: str
    states: list[list[HiddenState]]
    task_id: str = ""

    @property
    def truncated(self) -> bool:
        return self.stop_reason == "max_tokens"

    @property
    def n_steps(self) -> int:
        return len(self.tokens)

    def stage_output(self, stage: int) -> np.ndarray:
        return np.concatenate([s.values for s in self.states[stage - 1]])

    def stage_input(self, stage: int):
        """What a stage's verifier receives: tokens for stage 1, upstream rows otherwise."""
        if stage == 1:
            return np.array(self.prompt + self.tokens, dtype=np.int64)
        return self.stage_output(stage - 1)

    def final_row(self, stage: int) -> np.ndarray:
        return self.states[stage - 1][-1].values[-1]


StateHook = Callable[[int, int, np.ndarray], np.ndarray]


def _small_model(config: ModelConfig, small_dim: int) -> ModelConfig:
    return ModelConfig(n_segments=1, hidden_dim=small_dim, layers_per_segment=1,
                       vocab_size=config.vocab_size, seed=config.seed + 7919,
                       eos_id=config.eos_id, model_id=config.model_id + "-small")


def generate(config: ModelConfig, prompt: Sequence[int], max_tokens: int,
             noise: NoiseModel | Sequence[NoiseModel] = ZERO_NOISE,
             attack: Attack = IDENTITY, meter: CostMeter | None = None,
             on_state: StateHook | None = None, task_id: str = "",
             ignore_eos: bool = False) -> GenerationResult:
    """Autoregressive greedy generation through all segments.

    Step 1 runs the prompt; each later step feeds back the previous token. Halts
    on EOS or after ``max_tokens`` steps. ``on_state(stage, step, rows)`` sees
    (and may replace) every boundary output before it is forwarded.
    """
    prompt = [int(x) for x in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    noises = list(noise) if isinstance(noise, (list, tuple)) else [noise] * config.n_segments
    if attack.kind == "forged_output":
        return _forged_generation(config, prompt, max_tokens, noises, attack, meter, on_state, task_id)
    runners = []
    for i in range(1, config.n_segments + 1):
        mode = quantized(attack.bits) if attack.kind == "quantize" and attack.applies_to(i) else FULL_PRECISION
        runners.append(SegmentRunner(config.segment(i, mode), noises[i - 1], meter))
    tokens: list[int] = []
    states: list[list[HiddenState]] = [[] for _ in runners]
    inp = np.array(prompt, dtype=np.int64)
    stop = "max_tokens"
    for t in range(1, max_tokens + 1):
        phase = "prefill" if t == 1 else "decode"
        x = inp
        for i, runner in enumerate(runners, start=1):
            x = runner.run(x, phase)
            if on_state is not None:
                x = on_state(i, t, x)
            states[i - 1].append(HiddenState(task_id, i, t, x))
        y = decode_step(config, x[-1])
        if attack.kind == "early_stop" and t == attack.stop_at:
            y = config.eos_id
        tokens.append(y)
        if y == config.eos_id and (not ignore_eos or attack.kind == "early_stop"):
            stop = "eos"
            break
        inp = np.array([y], dtype=np.int64)
    return GenerationResult(prompt, tokens, stop, states, task_id)


def _forged_generation(config, prompt, max_tokens, noises, attack, meter, on_state, task_id):
    small = _small_model(config, attack.small_dim)
    fake = generate(small, prompt, max_tokens, ignore_eos=True)
    tokens = fake.tokens
    seq = np.array(prompt + tokens[:-1], dtype=np.int64)
    n_prompt = len(prompt)
    states: list[list[HiddenState]] = []
    x = seq
    for i in range(1, config.n_segments + 1):
        x = segment_forward(config.segment(i), x, noises[i - 1], meter, phase="prefill")
        per_step = [x[:n_prompt]] + [x[n_prompt + k:n_prompt + k + 1] for k in range(len(tokens) - 1)]
        seg_states = []
        for t, rows in enumerate(per_step, start=1):
            if on_state is not None:
                rows = on_state(i, t, rows)
            seg_states.append(HiddenState(task_id, i, t, rows))
        states.append(seg_states)
        x = np.concatenate([s.values for s in seg_states])
    stop = "eos" if tokens[-1] == config.eos_id else "max_tokens"
    return GenerationResult(list(prompt), list(tokens), stop, states, task_id)


def apply_attack(config: ModelConfig, prompt, max_tokens: int, attack: Attack, **kw) -> GenerationResult:
    return generate(config, prompt, max_tokens, attack=attack, **kw)


# verification helpers ---------------------------------------------------------

@dataclass
class StageCheck:
    stage: int
    stats: object
    states_ok: bool
    tokens_ok: bool
    mismatch_steps: list[int] = field(default_factory=list)

    @property
    def verdict(self) -> int:
        return int(self.states_ok and self.tokens_ok)


def recompute_stage(config: ModelConfig, result: GenerationResult, stage: int,
                    noise: NoiseModel = ZERO_NOISE, meter: CostMeter | None = None) -> np.ndarray:
    """Verifier prefill for one stage over the full sequence; returns rows aligned with the log."""
    n_rows = len(result.prompt) + result.n_steps - 1
    rows = verify_prefill(config.segment(stage), result.stage_input(stage), noise, meter)
    return rows[:n_rows]


def tail_mismatches(config: ModelConfig, result: GenerationResult, tail_rows: np.ndarray) -> list[int]:
    """Steps whose decoded token differs from the published one (1-based)."""
    n_prompt = len(result.prompt)
    bad = []
    for t, y in enumerate(result.tokens, start=1):
        if decode_step(config, tail_rows[n_prompt + t - 2]) != y:
            bad.append(t)
    return bad


def check_stage(config: ModelConfig, result: GenerationResult, stage: int,
                noise: NoiseModel = ZERO_NOISE, tol=None, meter: CostMeter | None = None) -> StageCheck:
    """Off-chain check a verifier runs: full-trace comparator plus the tail token guard."""
    tol = tol or OFF_CHAIN
    rows = recompute_stage(config, result, stage, noise, meter)
    stats = compare_arrays(result.stage_output(stage), rows, tol)
    ok = accept(stats, tol)
    bad: list[int] = []
    if stage == config.n_segments:
        bad = tail_mismatches(config, result, rows)
    return StageCheck(stage, stats, ok, not bad, bad)
