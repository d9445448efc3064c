"""Stage-decomposed latency model: visual encoding, prompt encoding, generation.

The decomposition treats one inference as

    T_total = T_VE + N_prompt / S_prompt + N_gen / S_gen + T_other

where S_prompt and S_gen are stage throughputs in tokens/second, N_prompt
counts text tokens plus image embeddings, and T_other is the residual
between the measured wall total and the three instrumented stages.
"""

from __future__ import annotations

import statistics
import threading
from dataclasses import dataclass

from .llm import GenerationConfig
from .runner import ImpModel, TurnResult
from .vision import MODE_PAD

# clock-resolution slack for the non-negative residual invariant
_EPS = 1e-3

_PROFILE_LOCK = threading.Lock()


@dataclass
class StageTimings:
    """One inference's stage times, token counts, and derived throughputs."""

    t_ve: float
    t_prompt: float
    t_gen: float
    t_other: float
    t_total: float
    n_prompt: int
    n_gen: int
    s_prompt: float | None
    s_gen: float | None

    def __post_init__(self):
        for name in ("t_ve", "t_prompt", "t_gen", "t_total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.n_prompt < 0 or self.n_gen < 0:
            raise ValueError("token counts must be >= 0")
        if self.t_other < -_EPS:
            raise ValueError(f"t_other {self.t_other} below clock tolerance -{_EPS}")

    @classmethod
    def from_stages(
        cls, t_ve: float, t_prompt: float, t_gen: float, t_wall: float, n_prompt: int, n_gen: int
    ) -> "StageTimings":
        t_other = t_wall - (t_ve + t_prompt + t_gen)
        return cls(
            t_ve=t_ve,
            t_prompt=t_prompt,
            t_gen=t_gen,
            t_other=t_other,
            t_total=t_ve + t_prompt + t_gen + t_other,
            n_prompt=n_prompt,
            n_gen=n_gen,
            s_prompt=n_prompt / t_prompt if t_prompt > 0 else None,
            s_gen=n_gen / t_gen if t_gen > 0 else None,
        )

    @classmethod
    def from_rates(
        cls,
        t_ve: float,
        s_prompt: float,
        s_gen: float,
        n_prompt: int,
        n_gen: int,
        t_other: float = 0.0,
    ) -> "StageTimings":
        """Build timings from known stage speeds (e.g. a reference benchmark row)."""
        t_prompt = n_prompt / s_prompt if s_prompt else 0.0
        t_gen = n_gen / s_gen if s_gen else 0.0
        return cls(
            t_ve=t_ve,
            t_prompt=t_prompt,
            t_gen=t_gen,
            t_other=t_other,
            t_total=t_ve + t_prompt + t_gen + t_other,
            n_prompt=n_prompt,
            n_gen=n_gen,
            s_prompt=s_prompt,
            s_gen=s_gen,
        )

    @classmethod
    def from_turn(cls, turn: TurnResult) -> "StageTimings":
        return cls.from_stages(
            t_ve=turn.t_visual,
            t_prompt=turn.t_prefill,
            t_gen=turn.t_decode,
            t_wall=turn.t_wall,
            n_prompt=turn.n_prompt,
            n_gen=turn.n_gen,
        )

    def to_dict(self) -> dict:
        return {
            "t_ve": self.t_ve,
            "t_prompt": self.t_prompt,
            "t_gen": self.t_gen,
            "t_other": self.t_other,
            "t_total": self.t_total,
            "n_prompt": self.n_prompt,
            "n_gen": self.n_gen,
            "s_prompt": self.s_prompt,
            "s_gen": self.s_gen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageTimings":
        return cls(
            t_ve=float(d["t_ve"]),
            t_prompt=float(d["t_prompt"]),
            t_gen=float(d["t_gen"]),
            t_other=float(d["t_other"]),
            t_total=float(d["t_total"]),
            n_prompt=int(d["n_prompt"]),
            n_gen=int(d["n_gen"]),
            s_prompt=None if d.get("s_prompt") is None else float(d["s_prompt"]),
            s_gen=None if d.get("s_gen") is None else float(d["s_gen"]),
        )


def total_latency(t: StageTimings) -> float:
    """T_VE + N_prompt/S_prompt + N_gen/S_gen + T_other in seconds."""
    prompt_term = 0.0
    if t.n_prompt > 0:
        if not t.s_prompt or t.s_prompt <= 0:
            raise ValueError("S_prompt must be > 0 when N_prompt > 0")
        prompt_term = t.n_prompt / t.s_prompt
    gen_term = 0.0
    if t.n_gen > 0:
        if not t.s_gen or t.s_gen <= 0:
            raise ValueError("S_gen must be > 0 when N_gen > 0")
        gen_term = t.n_gen / t.s_gen
    return t.t_ve + prompt_term + gen_term + t.t_other


def profile_inference(
    model: ImpModel,
    image_rgb,
    prompt: str,
    cfg: GenerationConfig,
    mode: str = MODE_PAD,
) -> StageTimings:
    """Run one timed inference; monotonic clocks, model loading excluded.

    Profiling runs are serialized process-wide so concurrent work cannot
    pollute the timings.
    """
    with _PROFILE_LOCK:
        turn = model.run(prompt, image_rgb, cfg, mode)
    return StageTimings.from_turn(turn)


def median_timings(runs: list[StageTimings]) -> StageTimings:
    """Per-stage medians; token counts must agree across the runs."""
    if not runs:
        raise ValueError("no runs to aggregate")
    counts = {(r.n_prompt, r.n_gen) for r in runs}
    if len(counts) != 1:
        raise ValueError(f"token counts differ across runs: {sorted(counts)}")
    t_ve = statistics.median(r.t_ve for r in runs)
    t_prompt = statistics.median(r.t_prompt for r in runs)
    t_gen = statistics.median(r.t_gen for r in runs)
    t_other = max(0.0, statistics.median(r.t_other for r in runs))
    wall = t_ve + t_prompt + t_gen + t_other
    return StageTimings.from_stages(
        t_ve, t_prompt, t_gen, wall, runs[0].n_prompt, runs[0].n_gen
    )


def bench_model(
    model: ImpModel,
    image_rgb,
    prompt: str,
    cfg: GenerationConfig,
    repeats: int = 5,
    warmup: int = 1,
    mode: str = MODE_PAD,
) -> tuple[StageTimings, list[StageTimings]]:
    """Median timings over `repeats` measured runs after `warmup` unmeasured ones."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        profile_inference(model, image_rgb, prompt, cfg, mode)
    runs = [profile_inference(model, image_rgb, prompt, cfg, mode) for _ in range(repeats)]
    return median_timings(runs), runs
