"""
Inter-layer sliding schedules and intra-layer stage plans.

Shallow layers get a progressively expanded window anchored at layer 0 (PESW),
intermediate layers a fixed-size window sliding by a stride (FSSW), and deep layers a
progressively contracted window anchored at layer L−1 (PCSW). The FSSW region overlaps
each neighbouring region by s−1 layers.
"""
from enum import Enum
import dataclasses as dc
import json
import typing as t

import slider_quant.core.logging as logging
from slider_quant.core.errors import ConfigError

logger = logging.get_logger(__name__)


class Region(Enum):
    PESW = "PESW"
    FSSW = "FSSW"
    PCSW = "PCSW"


@dc.dataclass(frozen=True)
class ScheduleConfig:
    """Schedule knobs. ``pesw``/``pcsw`` off hands that region's layers to FSSW."""
    L: int
    L_s: int = 4
    L_d: int = 4
    s: int = 2
    i: int = 1
    gamma: float = 0.5
    pesw: bool = True
    pcsw: bool = True

    @property
    def stages(self) -> int:
        return int(round(1.0 / self.gamma))

    def check(self) -> None:
        """
        :raises ConfigError: Naming the first violated constraint
        """
        if self.L < 1:
            raise ConfigError(f"L >= 1 violated: L={self.L}")
        if self.pesw and self.L_s < 1:
            raise ConfigError(f"L_s >= 1 violated: L_s={self.L_s}")
        if self.pcsw and self.L_d < 1:
            raise ConfigError(f"L_d >= 1 violated: L_d={self.L_d}")
        shallow = self.L_s if self.pesw else 0
        deep = self.L_d if self.pcsw else 0
        if self.L < shallow + deep:
            raise ConfigError(f"L >= L_s + L_d violated: {self.L} < {shallow} + {deep}")
        if not 1 <= self.i <= self.s:
            raise ConfigError(f"1 <= i <= s violated: i={self.i}, s={self.s}")
        if self.s > self.L:
            raise ConfigError(f"s <= L violated: s={self.s}, L={self.L}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"0 < gamma <= 1 violated: gamma={self.gamma}")
        if abs(1.0 / self.gamma - self.stages) > 1e-9:
            raise ConfigError(f"1/gamma integral violated: 1/{self.gamma} = {1.0 / self.gamma}")


@dc.dataclass(frozen=True)
class Window:
    """A contiguous run of layer indices calibrated jointly."""
    layers: t.Tuple[int, ...]
    region: Region
    position: int

    @property
    def start(self) -> int:
        return self.layers[0]

    @property
    def end(self) -> int:
        return self.layers[-1]

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers


@dc.dataclass(frozen=True)
class StagePlan:
    """Fractions of output channels quantized at each intra-layer stage."""
    fractions: t.Tuple[float, ...]

    @property
    def stages(self) -> int:
        return len(self.fractions)


@dc.dataclass(frozen=True)
class WindowSchedule:
    windows: t.Tuple[Window, ...]
    num_layers: int
    gamma: float = 1.0

    def __iter__(self) -> t.Iterator[Window]:
        return iter(self.windows)

    def __len__(self) -> int:
        return len(self.windows)

    def memberships(self) -> t.List[int]:
        counts = [0] * self.num_layers
        for window in self.windows:
            for layer in window.layers:
                counts[layer] += 1
        return counts

    def last_window_of(self) -> t.Dict[int, int]:
        """Position of the last window containing each covered layer."""
        last = {}
        for window in self.windows:
            for layer in window.layers:
                last[layer] = window.position
        return last

    def covered_layers(self) -> t.Set[int]:
        return {layer for window in self.windows for layer in window.layers}


def _span(start: int, end: int) -> t.Tuple[int, ...]:
    return tuple(range(start, end + 1))


def _fixed_windows(first: int, last: int, size: int, stride: int) -> t.List[t.Tuple[int, ...]]:
    """Windows of ``size`` stepping by ``stride`` over [first, last]; the tail is shifted left to end at ``last``."""
    if last - first + 1 <= size:
        return [_span(first, last)]
    spans = []
    start = first
    while start + size - 1 <= last:
        spans.append(_span(start, start + size - 1))
        start += stride
    if spans[-1][-1] < last:
        spans.append(_span(last - size + 1, last))
    return spans


def generate_schedule(cfg: ScheduleConfig) -> WindowSchedule:
    """
    Emit PESW, then FSSW, then PCSW windows.

    :param cfg: Schedule knobs; validated first
    :raises ConfigError: On violated knob constraints
    """
    cfg.check()
    spans: t.List[t.Tuple[t.Tuple[int, ...], Region]] = []

    if cfg.pesw:
        spans += [(_span(0, j), Region.PESW) for j in range(cfg.L_s)]

    shallow = cfg.L_s if cfg.pesw else 0
    deep = cfg.L_d if cfg.pcsw else 0
    # An empty intermediate region means no FSSW windows at all.
    if cfg.L > shallow + deep:
        first = max(0, shallow - (cfg.s - 1)) if cfg.pesw else 0
        last = min(cfg.L - 1, cfg.L - deep + cfg.s - 2) if cfg.pcsw else cfg.L - 1
        spans += [(span, Region.FSSW) for span in _fixed_windows(first, last, cfg.s, cfg.i)]

    if cfg.pcsw:
        spans += [(_span(cfg.L - cfg.L_d + j, cfg.L - 1), Region.PCSW) for j in range(cfg.L_d)]

    windows = tuple(Window(layers, region, position) for position, (layers, region) in enumerate(spans))
    logger.debug(f"Generated {len(windows)} windows for {cfg}")
    return WindowSchedule(windows=windows, num_layers=cfg.L, gamma=cfg.gamma)


def fixed_sliding_schedule(num_layers: int, s: int, i: int = 1) -> WindowSchedule:
    """Pure fixed-size sliding over all layers (the sliding baseline)."""
    return generate_schedule(ScheduleConfig(L=num_layers, s=s, i=i, gamma=1.0, pesw=False, pcsw=False))


def single_layer_schedule(num_layers: int, layers: t.Optional[t.Iterable[int]] = None) -> WindowSchedule:
    """One window per layer; only ``layers`` are covered when given."""
    chosen = range(num_layers) if layers is None else sorted(layers)
    windows = tuple(Window((layer,), Region.FSSW, position) for position, layer in enumerate(chosen))
    return WindowSchedule(windows=windows, num_layers=num_layers, gamma=1.0)


def stage_plan(window: Window, gamma: float) -> StagePlan:
    """
    N = 1/γ stages quantizing γ, 2γ, …, 1 of each window layer's output channels.

    :raises ConfigError: If 1/γ is not integral
    """
    if not 0.0 < gamma <= 1.0 or abs(1.0 / gamma - round(1.0 / gamma)) > 1e-9:
        raise ConfigError(f"1/gamma integral violated for window {window.position}: gamma={gamma}")
    stages = int(round(1.0 / gamma))
    return StagePlan(tuple(n / stages for n in range(1, stages + 1)))


@dc.dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dc.dataclass(frozen=True)
class ValidationReport:
    checks: t.Tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)

    def to_dict(self) -> t.Dict[str, t.Dict[str, t.Any]]:
        return {c.name: {"passed": c.passed, "detail": c.detail} for c in self.checks}


def validate(schedule: WindowSchedule, cfg: ScheduleConfig) -> ValidationReport:
    """Check coverage, contiguity, ordering, anchors, even frequency and prefix-commit."""
    windows = list(schedule.windows)
    results = []

    missing = sorted(set(range(cfg.L)) - schedule.covered_layers())
    out_of_range = sorted(l for w in windows for l in w.layers if not 0 <= l < cfg.L)
    results.append(CheckResult("coverage", not missing and not out_of_range,
                               f"missing={missing} out_of_range={out_of_range}"))

    broken = [w.position for w in windows
              if not w.layers or list(w.layers) != list(range(w.layers[0], w.layers[0] + len(w.layers)))]
    results.append(CheckResult("contiguity", not broken, f"non-contiguous windows: {broken}"))

    order = {Region.PESW: 0, Region.FSSW: 1, Region.PCSW: 2}
    regions = [order[w.region] for w in windows]
    starts = [w.start for w in windows if w.layers]
    ordered = regions == sorted(regions) and starts == sorted(starts)
    results.append(CheckResult("ordering", ordered, f"regions={regions} starts={starts}"))

    anchor_ok = True
    detail = []
    if cfg.pesw:
        pesw = [w for w in windows if w.region is Region.PESW]
        anchor_ok &= len(pesw) == cfg.L_s and all(0 in w for w in pesw)
        detail.append(f"PESW windows with layer 0: {sum(0 in w for w in pesw)}/{cfg.L_s}")
    if cfg.pcsw:
        pcsw = [w for w in windows if w.region is Region.PCSW]
        anchor_ok &= len(pcsw) == cfg.L_d and all(cfg.L - 1 in w for w in pcsw)
        detail.append(f"PCSW windows with layer L-1: {sum(cfg.L - 1 in w for w in pcsw)}/{cfg.L_d}")
    results.append(CheckResult("anchor", anchor_ok, "; ".join(detail)))

    counts = schedule.memberships()
    if cfg.s == 2 and cfg.i == 1 and cfg.pesw and cfg.pcsw and cfg.L > cfg.L_s + cfg.L_d:
        uneven = [l for l in range(cfg.L_s - 1, cfg.L - cfg.L_d + 1) if counts[l] != cfg.s]
        results.append(CheckResult("even_frequency", not uneven, f"layers with count != s: {uneven}"))
    else:
        results.append(CheckResult("even_frequency", True, "not applicable"))

    violations = []
    for k, window in enumerate(windows):
        for later in windows[k + 1:]:
            if any(layer < window.start for layer in later.layers):
                violations.append((window.position, later.position))
    results.append(CheckResult("prefix_commit", not violations, f"violations: {violations[:5]}"))

    return ValidationReport(tuple(results))


def format_schedule(schedule: WindowSchedule, as_json: bool = False) -> str:
    """
    Text form: one window per line, ``region start..end fractions``.
    JSON form: a list of {position, region, start, end, layers, stage_fractions}.
    """
    rows = []
    for window in schedule.windows:
        plan = stage_plan(window, schedule.gamma)
        rows.append({
            "position": window.position,
            "region": window.region.value,
            "start": window.start,
            "end": window.end,
            "layers": list(window.layers),
            "stage_fractions": list(plan.fractions),
        })
    if as_json:
        return json.dumps(rows, indent=2)
    return "\n".join(
        f"{row['region']} {row['start']}..{row['end']} " + ",".join(f"{f:g}" for f in row["stage_fractions"])
        for row in rows
    )
