"""Teacher-student parallel planning and an analytic per-device memory model.

Each model matrix is split into ``MP`` equal parts along its partition axis
(attention heads, FFN columns, vocabulary rows) and device ``r`` of an MP
group holds the matching part of every teacher and every student.  The
memory model counts fp16 parameters and gradients, 12 bytes of optimizer
state per student parameter, and a calibrated activation term.

All quantities are bytes; reports render GiB.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from .errors import PlanError, SplitError
from .model import ModelSpec, count_params, get_spec, param_layout

GIB = 2 ** 30
DEFAULT_BUDGET = 40 * GIB
MAX_DEVICES = 8

PARAM_BYTES = 2
GRAD_BYTES = 2
OPT_BYTES = 12
ACT_SEQ = 512
ACT_BATCH = 1


@dataclass(frozen=True)
class DeviceGrid:
    MP: int = 1
    DP: int = 1
    gpu_mem_budget: float = DEFAULT_BUDGET
    max_devices: int = MAX_DEVICES

    def __post_init__(self):
        if self.MP < 1 or self.DP < 1:
            raise PlanError(f"MP and DP must be positive, got MP={self.MP} DP={self.DP}")
        if self.MP * self.DP > self.max_devices:
            raise PlanError(f"MP*DP={self.MP * self.DP} exceeds {self.max_devices} devices")

    @property
    def gpu_count(self) -> int:
        return self.MP * self.DP


@dataclass(frozen=True)
class StrategyFlags:
    strategy: str = "teacher_student_parallel"
    zero_partition: bool = False
    offload: bool = False
    also_partition_grads: bool = False

    def __post_init__(self):
        if self.strategy not in ("previous", "teacher_student_parallel"):
            raise PlanError(f"unknown strategy {self.strategy!r}")
        if self.offload and not self.zero_partition:
            raise PlanError("offload requires ZeRO partitioning")

    def label(self) -> str:
        dag = "+" if self.also_partition_grads else ""
        if self.offload:
            return f"ZeRO{dag}+Offload{dag}"
        if self.zero_partition:
            return f"ZeRO{dag}"
        return "baseline"


@dataclass(frozen=True)
class ShardEntry:
    """One model's share on one device."""

    model: int
    role: str                    # "teacher" or "student"
    part: int                    # index of the slice within the MP group
    fractions: dict              # matrix name -> Fraction of that matrix held here
    colocated_student: Fraction  # fraction of each student held on the same device


@dataclass
class ShardPlan:
    grid: DeviceGrid
    flags: StrategyFlags
    devices: list = field(default_factory=list)   # list[list[ShardEntry]]

    def param_count(self, device: int, specs: Sequence[ModelSpec]) -> Fraction:
        total = Fraction(0)
        for e in self.devices[device]:
            shapes = dict(param_layout(specs[e.model]))
            for name, frac in e.fractions.items():
                n = 1
                for s in shapes[name]:
                    n *= s
                total += frac * n
        return total


@dataclass(frozen=True)
class CostEstimate:
    MA: float
    CA: float
    cpu_mem: float
    relative_time: float
    feasible: bool
    components: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Calibration:
    """Frozen constants of the memory and time model."""

    alpha: float
    kappa: float
    base_host: float
    c1: float
    c2: float


def _split_axis(name: str) -> str:
    if ".attn." in name:
        return "heads"
    if ".ffn." in name:
        return "ffn-columns"
    if name == "tok_emb":
        return "vocab"
    return "elements"


def plan_shards(models: Sequence[ModelSpec], grid: DeviceGrid, flags: StrategyFlags,
                roles: Sequence[str] | None = None) -> ShardPlan:
    """Assign each device its slice of every model.

    ``roles`` labels each model ``teacher`` or ``student`` (default: the last
    model is the student).  Under the previous strategy everything is
    replicated and MP must be 1.
    """
    if flags.strategy == "previous" and grid.MP != 1:
        raise PlanError("the previous strategy replicates models; MP must be 1")
    if roles is None:
        roles = ["teacher"] * (len(models) - 1) + ["student"]
    for spec in models:
        if spec.heads % grid.MP:
            raise SplitError(f"model {spec.name or spec.dim}: {spec.heads} heads not divisible by MP={grid.MP}")
    frac = Fraction(1, grid.MP)
    devices = []
    for r in range(grid.gpu_count):
        part = r % grid.MP
        entries = []
        for m, spec in enumerate(models):
            fr = {name: frac for name, _ in param_layout(spec)}
            entries.append(ShardEntry(m, roles[m], part, fr, frac))
        devices.append(entries)
    return ShardPlan(grid, flags, devices)


def split_axes(spec: ModelSpec) -> dict[str, str]:
    return {name: _split_axis(name) for name, _ in param_layout(spec)}


# -- memory and time model ---------------------------------------------------------
def _as_spec(m) -> ModelSpec:
    return m if isinstance(m, ModelSpec) else get_spec(m)


def _components(teachers, students, grid: DeviceGrid, flags: StrategyFlags) -> dict:
    mp, dp = grid.MP, grid.DP
    pt = sum(count_params(s) for s in teachers)
    ps = sum(count_params(s) for s in students)
    grad_dev = GRAD_BYTES / dp if (flags.zero_partition and flags.also_partition_grads) else GRAD_BYTES
    opt_dev = OPT_BYTES / dp if flags.zero_partition else OPT_BYTES
    offloaded = 0.0
    if flags.offload:
        offloaded = ps / mp * (grad_dev + opt_dev)
        grad_dev = opt_dev = 0.0
    return {
        "teacher_params": pt / mp * PARAM_BYTES,
        "student_params": ps / mp * PARAM_BYTES,
        "grads": ps / mp * grad_dev,
        "optimizer": ps / mp * opt_dev,
        "activation_units": sum(ACT_BATCH * ACT_SEQ * s.dim * s.layers for s in (*teachers, *students)) / mp,
        "offloaded": offloaded,
    }


def _time(grid: DeviceGrid, flags: StrategyFlags, cal: Calibration) -> float:
    return (1.0 + cal.c1 * (grid.MP - 1)) * (cal.c2 if flags.offload else 1.0)


def estimate_memory(teachers, students, grid: DeviceGrid, flags: StrategyFlags,
                    calibration: Calibration | None = None) -> CostEstimate:
    """Per-device memory and relative step time of a plan.

    ``teachers`` and ``students`` are lists of specs (or preset names).  The
    estimate never raises for an over-budget plan; it reports
    ``feasible=False`` instead.
    """
    cal = calibration or CALIBRATION
    teachers = [_as_spec(t) for t in teachers]
    students = [_as_spec(s) for s in students]
    for spec in (*teachers, *students):
        if spec.heads % grid.MP:
            raise SplitError(f"model {spec.name or spec.dim}: {spec.heads} heads not divisible by MP={grid.MP}")
    c = _components(teachers, students, grid, flags)
    ma = (c["teacher_params"] + c["student_params"] + c["grads"] + c["optimizer"]
          + cal.alpha * c["activation_units"])
    ca = ma * cal.kappa
    cpu = cal.base_host + grid.gpu_count * c["offloaded"]
    return CostEstimate(ma, ca, cpu, _time(grid, flags, cal), ca <= grid.gpu_mem_budget, c)


# -- calibration ---------------------------------------------------------------------
@dataclass(frozen=True)
class MeasuredRow:
    """One measured configuration (GiB and ms as reported)."""

    teacher: str
    student: str
    MA: float | None
    CA: float | None
    time_ms: float | None
    mem: float | None
    MP: int
    DP: int
    zero: bool = False
    offload: bool = False
    strategy: str = "teacher_student_parallel"

    @property
    def overflow(self) -> bool:
        return self.MA is None

    def grid(self) -> DeviceGrid:
        return DeviceGrid(self.MP, self.DP)

    def flags(self) -> StrategyFlags:
        return StrategyFlags(self.strategy, self.zero, self.offload)


_P = "previous"
MEASURED_ROWS: tuple[MeasuredRow, ...] = (
    MeasuredRow("110M", "22M", 0.99, 1.27, 10.40, 56.96, 1, 8, strategy=_P),
    MeasuredRow("110M", "66M", 1.73, 2.02, 10.82, 57.60, 1, 8, strategy=_P),
    MeasuredRow("340M", "66M", 3.11, 3.58, 16.41, 63.46, 1, 8, strategy=_P),
    MeasuredRow("5B", "1B", 32.44, 36.57, 53.34, 61.58, 1, 8, strategy=_P),
    MeasuredRow("6B", "1.2B", None, None, None, None, 1, 8, strategy=_P),
    MeasuredRow("6B", "1.2B", 18.91, 21.40, 85.61, 57.28, 2, 4),
    MeasuredRow("7.5B", "1.5B", 24.22, 27.36, 87.08, 60.44, 2, 4),
    MeasuredRow("10B", "2B", 30.91, 34.54, 105.40, 62.33, 2, 4),
    MeasuredRow("10B", "2B", 18.45, 22.56, 119.72, 68.68, 2, 4, True),
    MeasuredRow("10B", "2B", 15.83, 22.55, 387.19, 106.35, 2, 4, True, True),
    MeasuredRow("25B", "5B", 20.41, 23.51, 379.38, 63.07, 8, 1),
    MeasuredRow("50B", "10B", 17.93, 20.94, 4570.54, 230.27, 8, 1, True, True),
    MeasuredRow("65B", "13B", 22.48, 26.10, 6412.11, 293.11, 8, 1, True, True),
    MeasuredRow("90B", "18B", 30.56, 35.27, 7193.26, 373.81, 8, 1, True, True),
    MeasuredRow("100B", "20B", 33.62, 36.88, 9081.97, 410.83, 8, 1, True, True),
    MeasuredRow("110B", "22B", None, None, None, None, 8, 1, True, True),
)

# Indices into MEASURED_ROWS of the three rows the constants are fit on.
CALIBRATION_ROWS = (1, 3, 9)
# Same-model reference timings for the two time constants: 5B=>1B at MP=8
# (baseline flags) and 10B=>2B at MP=2 with ZeRO but no offload.
REFERENCE_TIMES = {"mp8_5B": 231.95, "zero_10B_mp2": 119.72}


def calibrate(rows: Sequence[MeasuredRow] = MEASURED_ROWS, which=CALIBRATION_ROWS,
              reference=REFERENCE_TIMES) -> Calibration:
    """Fit the five constants from the declared rows.

    * alpha, kappa and base_host from the small-model row (MA, CA, Mem);
    * c1 from the MP=1 time of the mid-size row against its MP=8 time;
    * c2 from the offload row against the same grid without offload.
    """
    small, mid, off = (rows[i] for i in which)
    t, s = [get_spec(small.teacher)], [get_spec(small.student)]
    c = _components(t, s, small.grid(), small.flags())
    fixed = c["teacher_params"] + c["student_params"] + c["grads"] + c["optimizer"]
    alpha = (small.MA * GIB - fixed) / c["activation_units"]
    kappa = small.CA / small.MA
    base_host = small.mem * GIB
    c1 = (reference["mp8_5B"] / mid.time_ms - 1.0) / 7.0
    c2 = off.time_ms / reference["zero_10B_mp2"]
    return Calibration(alpha, kappa, base_host, c1, c2)


CALIBRATION = calibrate()


def estimate_row(row: MeasuredRow, calibration: Calibration | None = None) -> CostEstimate:
    return estimate_memory([row.teacher], [row.student], row.grid(), row.flags(), calibration)


# -- recommendation ---------------------------------------------------------------------
@dataclass
class Recommendation:
    grid: DeviceGrid | None
    flags: StrategyFlags | None
    estimate: CostEstimate | None
    trace: list                  # (grid, flags, estimate) for every configuration tried

    @property
    def exhausted(self) -> bool:
        return self.grid is None


def escalation(max_devices: int = MAX_DEVICES) -> list[tuple[int, StrategyFlags]]:
    """Try order: plain, ZeRO, more model parallelism, then offload."""
    mps = [m for m in (1, 2, 4, 8) if m <= max_devices]
    zero = StrategyFlags(zero_partition=True, also_partition_grads=True)
    off = StrategyFlags(zero_partition=True, offload=True, also_partition_grads=True)
    order = [(1, StrategyFlags()), (1, zero)]
    order += [(m, zero) for m in mps if m > 1]
    order += [(m, off) for m in mps]
    return order


def recommend(teachers, students, budget: float = DEFAULT_BUDGET, max_devices: int = MAX_DEVICES,
              calibration: Calibration | None = None) -> Recommendation:
    if budget <= 0:
        return Recommendation(None, None, None, [])
    trace = []
    for mp, flags in escalation(max_devices):
        grid = DeviceGrid(mp, max(1, max_devices // mp), budget, max_devices)
        try:
            est = estimate_memory(teachers, students, grid, flags, calibration)
        except SplitError:
            continue
        trace.append((grid, flags, est))
        if est.feasible:
            return Recommendation(grid, flags, est, trace)
    return Recommendation(None, None, None, trace)


# -- reporting ---------------------------------------------------------------------------
COLUMNS = ("MA", "CA", "relative_time", "Mem", "MP", "DP", "ZeRO", "Offload")


def report_row(est: CostEstimate, grid: DeviceGrid, flags: StrategyFlags) -> dict:
    return {"MA": round(est.MA / GIB, 4), "CA": round(est.CA / GIB, 4),
            "relative_time": round(est.relative_time, 4), "Mem": round(est.cpu_mem / GIB, 4),
            "MP": grid.MP, "DP": grid.DP, "ZeRO": flags.zero_partition, "Offload": flags.offload,
            "grads_partitioned": flags.also_partition_grads, "feasible": est.feasible}


def format_table(rows: Sequence[dict], labels: Sequence[str] | None = None) -> str:
    """Aligned text table in the fixed column order (sizes in GiB)."""
    def cell(v):
        if isinstance(v, bool):
            return "yes" if v else ""
        if isinstance(v, float):
            return f"{v:.2f}"
        return str(v)

    head = (["config"] if labels else []) + list(COLUMNS) + ["feasible"]
    body = []
    for i, r in enumerate(rows):
        line = [labels[i]] if labels else []
        line += [cell(r[c]) for c in COLUMNS] + ["yes" if r["feasible"] else "no"]
        body.append(line)
    widths = [max(len(h), *(len(b[j]) for b in body)) if body else len(h) for j, h in enumerate(head)]
    out = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    out += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(out)
