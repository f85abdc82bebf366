"""Cascaded affine + dense registration, optimized end-to-end.

Each stage aligns the fixed image with the current moving image; the moving
image is warped by the stage flow and handed to the next stage.  The final
estimate is the left-to-right composition of the stage flows, with the
affine head composed in closed form.  All stages are optimized jointly:
gradients of deep-stage losses reach early-stage parameters through the
recorded warps.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fields, losses, metrics
from .exceptions import InvalidArgumentError, NumericError, ShapeError
from .grid import AffineTransform, FlowField, GridSpec, Volume

AFFINE_WEIGHTS = losses.LossWeights(
    similarity=1.0, regularizer=0.0, determinant=0.1, orthogonality=0.1
)
# similarity/total-variation rows for successive dense stages; cascades with
# fewer dense stages use the final row for their last stage
DENSE_WEIGHT_ROWS = (
    losses.LossWeights(similarity=0.0, regularizer=1.0),
    losses.LossWeights(similarity=0.05, regularizer=1.0),
    losses.LossWeights(similarity=1.0, regularizer=1.0),
)


@dataclass(frozen=True)
class StageSpec:
    kind: str  # "affine" | "dense"
    weights: losses.LossWeights
    grid_divisor: int = 2  # dense parameter grid = image dims / divisor

    def __post_init__(self):
        if self.kind not in ("affine", "dense"):
            raise InvalidArgumentError(f"unknown stage kind {self.kind!r}")
        if self.kind == "dense" and self.grid_divisor not in (1, 2):
            raise InvalidArgumentError("dense grid divisor must be 1 or 2")


def default_stages(pattern: str, grid_divisor: int = 2) -> tuple[StageSpec, ...]:
    """Stages for a pattern like "ADD": optional affine head plus dense
    stages, with the default weight table keyed by stage position."""
    pattern = pattern.upper()
    if not pattern or any(c not in "AD" for c in pattern):
        raise InvalidArgumentError(f"bad cascade pattern {pattern!r}")
    if "A" in pattern[1:]:
        raise InvalidArgumentError("affine stage allowed only first")
    stages: list[StageSpec] = []
    n_dense = pattern.count("D")
    dense_idx = 0
    for c in pattern:
        if c == "A":
            stages.append(StageSpec("affine", AFFINE_WEIGHTS))
        else:
            if dense_idx == n_dense - 1:
                row = DENSE_WEIGHT_ROWS[-1]
            else:
                row = DENSE_WEIGHT_ROWS[min(dense_idx, len(DENSE_WEIGHT_ROWS) - 2)]
            stages.append(StageSpec("dense", row, grid_divisor))
            dense_idx += 1
    return tuple(stages)


@dataclass(frozen=True)
class CascadeSpec:
    stages: tuple[StageSpec, ...]
    iterations: int = 200
    affine_lr: float = 1e-3
    dense_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    invertibility_weight: float = 1e-3
    similarity: str = "correlation"  # correlation | l2 | mutual-information
    seed: int = 0
    entropy: losses.EntropyConfig = field(default_factory=losses.EntropyConfig)

    def __post_init__(self):
        if not self.stages:
            raise InvalidArgumentError("cascade needs at least one stage")
        if any(s.kind == "affine" for s in self.stages[1:]):
            raise InvalidArgumentError("affine stage allowed only first")
        if self.iterations < 1:
            raise InvalidArgumentError("iteration count must be >= 1")
        if self.similarity not in ("correlation", "l2", "mutual-information"):
            raise InvalidArgumentError(f"unknown similarity {self.similarity!r}")

    @classmethod
    def from_pattern(cls, pattern: str, **kwargs) -> "CascadeSpec":
        return cls(stages=default_stages(pattern), **kwargs)

    def stage_names(self) -> list[str]:
        names = []
        d = 0
        for s in self.stages:
            if s.kind == "affine":
                names.append("affine")
            else:
                d += 1
                names.append(f"dense{d}")
        return names


@dataclass
class RegistrationResult:
    final_flow: FlowField
    stage_flows: list[FlowField]
    warped: list[Volume]
    loss_trace: list[dict]
    wall_time: float
    metrics: dict
    params: ad.ParameterSet
    regressed: bool  # final total loss exceeded the initial one


class RegistrationAborted(NumericError):
    def __init__(self, message: str, loss_trace: list[dict]):
        super().__init__(message)
        self.loss_trace = loss_trace


def _dense_grid(image: GridSpec, divisor: int) -> GridSpec:
    if any(d % divisor for d in image.dims):
        raise ShapeError(f"dense divisor {divisor} does not divide dims {image.dims}")
    return GridSpec(tuple(d // divisor for d in image.dims))


def init_params(spec: CascadeSpec, grid: GridSpec, prefix: str = "") -> ad.ParameterSet:
    """Zero-initialized parameter blocks (identity transform)."""
    blocks = OrderedDict()
    for name, stage in zip(spec.stage_names(), spec.stages):
        if stage.kind == "affine":
            blocks[prefix + name] = np.zeros(12)
        else:
            g = _dense_grid(grid, stage.grid_divisor)
            blocks[prefix + name] = np.zeros(g.dims + (3,))
    return ad.ParameterSet(blocks)


def _similarity_node(kind: str, fixed: ad.Node, moved: ad.Node, cfg: losses.EntropyConfig):
    if kind == "correlation":
        return losses.correlation_loss_node(fixed, moved)
    if kind == "l2":
        return losses.l2_loss_node(fixed, moved)
    return losses.mutual_information_loss_node(fixed, moved, cfg)


class _CascadeGraph:
    """Forward pass of one direction of a cascade, on tape nodes."""

    def __init__(self, fixed: Volume, moving: Volume, spec: CascadeSpec, prefix: str = ""):
        if fixed.grid != moving.grid:
            raise ShapeError(f"grid mismatch: {fixed.grid.dims} vs {moving.grid.dims}")
        self.spec = spec
        self.grid = fixed.grid
        self.prefix = prefix
        self.fixed = ad.constant(fixed.data)
        self.moving = ad.constant(moving.data)
        self.coords_flat = fixed.grid.coords().reshape(-1, 3)
        # per-axis displacement scales for lifting coarse dense grids
        self.resample = {}
        for stage in spec.stages:
            if stage.kind == "dense" and stage.grid_divisor not in self.resample:
                src = _dense_grid(fixed.grid, stage.grid_divisor)
                self.resample[stage.grid_divisor] = np.asarray(
                    [t / s for t, s in zip(fixed.grid.dims, src.dims)]
                )

    def stage_flow(self, stage: StageSpec, p: ad.Node):
        """Full-resolution stage flow node shaped (nx, ny, nz, 3).

        Returns (flow, a_mat) where a_mat is the 3x3 matrix node for an
        affine stage, else None.
        """
        dims = self.grid.dims
        if stage.kind == "affine":
            a_mat = p[:9].reshape(3, 3)
            b = p[9:]
            flat = ad.matmul(ad.constant(self.coords_flat), ad.transpose(a_mat)) + b
            return flat.reshape(dims + (3,)), a_mat
        if stage.grid_divisor == 1:
            return p, None
        # corner-aligned lift of the coarse parameter grid, displacement
        # components scaled by the resolution ratio
        scale = self.resample[stage.grid_divisor]
        return ad.resize(p, dims) * scale, None

    def forward(self, nodes):
        """Returns (total_loss, terms, stage_flows, warped, a_mats)."""
        spec = self.spec
        total = None
        terms = OrderedDict()
        stage_flows, warped, a_mats = [], [], []
        current = self.moving
        for name, stage in zip(spec.stage_names(), spec.stages):
            p = nodes[self.prefix + name]
            flow, a_mat = self.stage_flow(stage, p)
            stage_flows.append(flow)
            a_mats.append(a_mat)
            pts = flow.reshape(-1, 3) + self.coords_flat
            current = ad.sample(current, pts).reshape(self.grid.dims)
            warped.append(current)

            w = stage.weights
            stage_terms = []
            if w.similarity > 0:
                sim = _similarity_node(spec.similarity, self.fixed, current, spec.entropy)
                stage_terms.append((f"{name}.similarity", w.similarity, sim))
            if stage.kind == "dense" and w.regularizer > 0:
                tv = losses.total_variation_loss_node(flow)
                stage_terms.append((f"{name}.total_variation", w.regularizer, tv))
            if stage.kind == "affine":
                if w.determinant > 0:
                    stage_terms.append(
                        (f"{name}.determinant", w.determinant, losses.determinant_loss_node(a_mat))
                    )
                if w.orthogonality > 0:
                    stage_terms.append(
                        (
                            f"{name}.orthogonality",
                            w.orthogonality,
                            losses.orthogonality_loss_node(a_mat),
                        )
                    )
            for tname, weight, node in stage_terms:
                terms[self.prefix + tname] = node
                contrib = node * weight
                total = contrib if total is None else total + contrib
        if total is None:
            total = ad.constant(0.0)
        return total, terms, stage_flows, warped, a_mats

    def composed_flow_node(self, stage_flows, a_mats):
        """Left-to-right composition; closed form for the affine head."""
        composed = stage_flows[0]
        start = 1
        if a_mats[0] is not None and len(stage_flows) > 1:
            b_mat = a_mats[0] + np.eye(3)
            nxt = stage_flows[1]
            flat = ad.matmul(nxt.reshape(-1, 3), ad.transpose(b_mat)) + stage_flows[0].reshape(
                -1, 3
            )
            composed = flat.reshape(nxt.value.shape)
            start = 2
        for k in range(start, len(stage_flows)):
            composed = losses.compose_flows_node(composed, stage_flows[k], self.coords_flat)
        return composed


def compose_stage_flows(
    stage_flows: list[FlowField], affine: AffineTransform | None
) -> FlowField:
    """Numpy-side composition matching ``_CascadeGraph.composed_flow_node``."""
    composed = stage_flows[0]
    start = 1
    if affine is not None and len(stage_flows) > 1:
        composed = fields.compose_affine_with_flow(affine, stage_flows[1])
        start = 2
    for k in range(start, len(stage_flows)):
        composed = fields.compose_flows(composed, stage_flows[k])
    return composed


@dataclass
class CascadeForward:
    warped: list[Volume]
    stage_flows: list[FlowField]
    composed_flow: FlowField
    total_loss: float
    terms: "OrderedDict[str, float]"


def run_cascade(
    fixed: Volume, moving: Volume, params: ad.ParameterSet, spec: CascadeSpec
) -> CascadeForward:
    """Single forward evaluation of the cascade at the given parameters."""
    graph = _CascadeGraph(fixed, moving, spec)
    nodes = {name: ad.constant(arr) for name, arr in params}
    total, terms, stage_flows, warped, a_mats = graph.forward(nodes)
    affine = None
    if spec.stages[0].kind == "affine":
        affine = AffineTransform.from_params(params[spec.stage_names()[0]])
    flows = [FlowField(fixed.grid, f.value) for f in stage_flows]
    composed = compose_stage_flows(flows, affine)
    return CascadeForward(
        warped=[Volume(fixed.grid, w.value) for w in warped],
        stage_flows=flows,
        composed_flow=composed,
        total_loss=float(total.value),
        terms=OrderedDict((k, float(v.value)) for k, v in terms.items()),
    )


class Adam:
    """Moment-based update with bias correction; one state per block."""

    def __init__(self, params: ad.ParameterSet, lr: dict, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params}
        self.v = {name: np.zeros_like(arr) for name, arr in params}

    def step(self, params: ad.ParameterSet, grads: ad.GradientSet):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, arr in params:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            arr -= self.lr[name] * m_hat / (np.sqrt(v_hat) + self.eps)


def _block_lrs(spec: CascadeSpec, names) -> dict:
    out = {}
    for name in names:
        base = name.split("/")[-1]
        out[name] = spec.affine_lr if base == "affine" else spec.dense_lr
    return out


def _optimize(pipeline, params: ad.ParameterSet, spec: CascadeSpec, terms_out: dict):
    trace: list[dict] = []
    adam = Adam(params, _block_lrs(spec, params.names()), spec.beta1, spec.beta2, spec.epsilon)
    for it in range(spec.iterations):
        try:
            loss, grads = ad.evaluate_with_gradients(pipeline, params)
        except NumericError as e:
            raise RegistrationAborted(str(e), trace) from e
        entry = {"iteration": it, "total": loss}
        entry.update(terms_out)
        trace.append(entry)
        adam.step(params, grads)
    return trace


def register(fixed: Volume, moving: Volume, spec: CascadeSpec) -> RegistrationResult:
    """Optimize the cascade parameters for one pair; deterministic per seed."""
    t0 = time.perf_counter()
    graph = _CascadeGraph(fixed, moving, spec)
    terms_out: dict = {}

    def pipeline(nodes):
        total, terms, *_ = graph.forward(nodes)
        terms_out.clear()
        terms_out.update({k: float(v.value) for k, v in terms.items()})
        return total

    params = init_params(spec, fixed.grid)
    trace = _optimize(pipeline, params, spec, terms_out)
    fwd = run_cascade(fixed, moving, params, spec)
    std_j, folding = metrics.jacobian_stats(fwd.composed_flow)
    return RegistrationResult(
        final_flow=fwd.composed_flow,
        stage_flows=fwd.stage_flows,
        warped=fwd.warped,
        loss_trace=trace,
        wall_time=time.perf_counter() - t0,
        metrics={"std_jacobian": std_j, "folding_fraction": folding, "final_loss": fwd.total_loss},
        params=params,
        regressed=trace[-1]["total"] > trace[0]["total"],
    )


def register_bidirectional(
    i1: Volume, i2: Volume, spec: CascadeSpec
) -> tuple[RegistrationResult, RegistrationResult]:
    """Jointly optimize both directions plus the invertibility penalty on the
    central region of the composed flows."""
    t0 = time.perf_counter()
    g12 = _CascadeGraph(i1, i2, spec, prefix="fwd/")
    g21 = _CascadeGraph(i2, i1, spec, prefix="bwd/")
    region = fields.central_region(i1.grid)
    coords_flat = g12.coords_flat
    w_inv = spec.invertibility_weight
    terms_out: dict = {}

    def pipeline(nodes):
        total12, terms12, flows12, _, amats12 = g12.forward(nodes)
        total21, terms21, flows21, _, amats21 = g21.forward(nodes)
        total = total12 + total21
        terms = OrderedDict()
        terms.update(terms12)
        terms.update(terms21)
        if w_inv > 0:
            c12 = g12.composed_flow_node(flows12, amats12)
            c21 = g21.composed_flow_node(flows21, amats21)
            inv = losses.invertibility_loss_node(c12, c21, region, coords_flat)
            terms["invertibility"] = inv
            total = total + inv * w_inv
        terms_out.clear()
        terms_out.update({k: float(v.value) for k, v in terms.items()})
        return total

    blocks = OrderedDict()
    blocks.update(init_params(spec, i1.grid, prefix="fwd/").blocks)
    blocks.update(init_params(spec, i1.grid, prefix="bwd/").blocks)
    params = ad.ParameterSet(blocks)
    trace = _optimize(pipeline, params, spec, terms_out)

    def direction_result(prefix: str, fixed: Volume, moving: Volume) -> RegistrationResult:
        sub = ad.ParameterSet(
            OrderedDict(
                (name[len(prefix):], arr) for name, arr in params if name.startswith(prefix)
            )
        )
        fwd = run_cascade(fixed, moving, sub, spec)
        std_j, folding = metrics.jacobian_stats(fwd.composed_flow)
        return RegistrationResult(
            final_flow=fwd.composed_flow,
            stage_flows=fwd.stage_flows,
            warped=fwd.warped,
            loss_trace=trace,
            wall_time=time.perf_counter() - t0,
            metrics={
                "std_jacobian": std_j,
                "folding_fraction": folding,
                "final_loss": fwd.total_loss,
            },
            params=sub,
            regressed=trace[-1]["total"] > trace[0]["total"],
        )

    r12 = direction_result("fwd/", i1, i2)
    r21 = direction_result("bwd/", i2, i1)
    inv_final = losses.invertibility_loss(r12.final_flow, r21.final_flow, region)
    for r in (r12, r21):
        r.metrics["invertibility"] = inv_final
    return r12, r21
