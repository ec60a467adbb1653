"""Exact receptive-field analysis for layered conv/pool stacks.

Per layer the classic recurrence applies:

    rf     <- rf + (kernel - 1) * jump
    offset <- offset + ((kernel - 1) / 2 - padding) * jump
    jump   <- jump * stride

Receptive fields compose across stages: a context stack with receptive field
``r`` cells on the previous belief map reaches ``(r - 1) * heatmap_stride``
extra image pixels around whatever the previous stage already saw, because
neighbouring belief cells are one heatmap stride apart on the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

from .architecture import LayerSpec, ModelSpec, StageSpec


@dataclass
class LayerRf:
    """Receptive field state after one layer, in the stack's native grid units."""

    name: str
    kind: str
    kernel: int
    stride: int
    padding: int
    rf: int
    jump: int
    offset: float


@dataclass
class StageRf:
    stage: int
    trunk: List[LayerRf]
    context: List[LayerRf]
    rf_on_beliefs: Optional[int]  # heatmap cells; None for stage 1
    rf_trunk_image: int           # trunk reach in image pixels
    rf_on_image: int              # composed reach of this stage's output on the image


@dataclass
class RfReport:
    heatmap_stride: int
    stages: List[StageRf] = field(default_factory=list)

    @property
    def composed_rf_image(self) -> int:
        return self.stages[-1].rf_on_image

    def rows(self) -> List[dict]:
        """Flat per-layer rows plus one summary row per stage (CSV-friendly)."""
        out = []
        for st in self.stages:
            for scope, layers, unit in (("trunk", st.trunk, "image_px"),
                                        ("context", st.context, "heatmap_cells")):
                for lr in layers:
                    out.append({
                        "stage": st.stage, "scope": scope, "layer": lr.name,
                        "kind": lr.kind, "kernel": lr.kernel, "stride": lr.stride,
                        "padding": lr.padding, "unit": unit, "rf": lr.rf,
                        "jump": lr.jump, "offset": lr.offset,
                    })
            out.append({
                "stage": st.stage, "scope": "summary", "layer": "-", "kind": "-",
                "kernel": "-", "stride": "-", "padding": "-", "unit": "image_px",
                "rf": st.rf_on_image,
                "jump": "-",
                "offset": "-",
            })
        return out


def chain_rf(layers: Sequence[LayerSpec], prefix: str = "layer") -> List[LayerRf]:
    """Apply the recurrence over a stack; entry i is the state after layer i."""
    rf, jump, offset = 1, 1, 0.0
    out: List[LayerRf] = []
    for i, layer in enumerate(layers):
        if layer.kind in ("conv", "pool"):
            k, s, p = layer.kernel, layer.stride, layer.padding
        else:  # relu and other pointwise layers leave the geometry untouched
            k, s, p = 1, 1, 0
        rf = rf + (k - 1) * jump
        offset = offset + ((k - 1) / 2 - p) * jump
        jump = jump * s
        out.append(LayerRf(name=f"{prefix}{i + 1}", kind=layer.kind, kernel=k,
                           stride=s, padding=p, rf=rf, jump=jump, offset=offset))
    return out


def stack_rf(layers: Sequence[LayerSpec]) -> int:
    """Receptive field of the last layer of a stack on the stack's input grid."""
    chain = chain_rf(layers)
    return chain[-1].rf if chain else 1


def stack_jump(layers: Sequence[LayerSpec]) -> int:
    chain = chain_rf(layers)
    return chain[-1].jump if chain else 1


def receptive_field(spec: Union[ModelSpec, StageSpec, Sequence[LayerSpec]],
                    heatmap_stride: Optional[int] = None) -> RfReport:
    """Receptive-field report for a layer stack, a single stage, or a full model.

    For a full model the per-stage ``rf_on_image`` composes the context
    stack's reach on the previous stage's beliefs with that stage's own
    reach, converting belief cells to image pixels via the heatmap stride.
    """
    if isinstance(spec, ModelSpec):
        stride = spec.heatmap_stride
        report = RfReport(heatmap_stride=stride)
        prev_image_rf = 0
        for t, stage in enumerate(spec.stage_specs, start=1):
            trunk_chain = chain_rf(stage.image_feature_layers, prefix="conv")
            ctx_chain = chain_rf(stage.context_layers, prefix="ctx")
            trunk_rf = trunk_chain[-1].rf if trunk_chain else 1
            if t == 1:
                rf_img = trunk_rf
                rf_beliefs = None
            else:
                rf_beliefs = ctx_chain[-1].rf if ctx_chain else 1
                rf_img = (rf_beliefs - 1) * stride + max(trunk_rf, prev_image_rf)
            report.stages.append(StageRf(
                stage=t, trunk=trunk_chain, context=ctx_chain,
                rf_on_beliefs=rf_beliefs, rf_trunk_image=trunk_rf,
                rf_on_image=rf_img,
            ))
            prev_image_rf = rf_img
        return report

    if isinstance(spec, StageSpec):
        stride = heatmap_stride if heatmap_stride is not None else 1
        report = RfReport(heatmap_stride=stride)
        trunk_chain = chain_rf(spec.image_feature_layers, prefix="conv")
        ctx_chain = chain_rf(spec.context_layers, prefix="ctx")
        trunk_rf = trunk_chain[-1].rf if trunk_chain else 1
        if spec.context_layers:
            rf_beliefs = ctx_chain[-1].rf
            rf_img = (rf_beliefs - 1) * stride + trunk_rf
        else:
            rf_beliefs = None
            rf_img = trunk_rf
        report.stages.append(StageRf(stage=1, trunk=trunk_chain, context=ctx_chain,
                                     rf_on_beliefs=rf_beliefs, rf_trunk_image=trunk_rf,
                                     rf_on_image=rf_img))
        return report

    # Bare layer stack.
    report = RfReport(heatmap_stride=heatmap_stride or 1)
    chain = chain_rf(list(spec), prefix="layer")
    rf = chain[-1].rf if chain else 1
    report.stages.append(StageRf(stage=1, trunk=chain, context=[],
                                 rf_on_beliefs=None, rf_trunk_image=rf, rf_on_image=rf))
    return report


class DesignError(ValueError):
    """A requested receptive-field target cannot be met within the size limits."""


_ODD_KERNELS = (1, 3, 5, 7, 9, 11)
MAX_KERNEL = 11
MAX_CONTEXT_LAYERS = 9  # convs plus the two 1x1 head convs


def _plan_context_kernels(target_rf: int) -> List[int]:
    """Smallest-cost stack of odd kernels with 1 + sum(k-1) >= target_rf."""
    best = None
    max_convs = MAX_CONTEXT_LAYERS - 2
    for m in range(1, max_convs + 1):
        for k in _ODD_KERNELS:
            rf = 1 + m * (k - 1)
            if rf < target_rf:
                continue
            cost = (rf - target_rf, m * k * k, m)
            if best is None or cost < best[0]:
                best = (cost, [k] * m)
    if best is None:
        achievable = 1 + max_convs * (MAX_KERNEL - 1)
        raise DesignError(
            f"context receptive field {target_rf} is not achievable with kernels "
            f"<= {MAX_KERNEL} and <= {MAX_CONTEXT_LAYERS} layers; best achievable is {achievable}"
        )
    return best[1]


def _plan_trunk_kernels(target_rf: int, n_pools: int) -> List[int]:
    """Kernels for a conv(+pool) trunk meeting target_rf with minimal excess.

    The trunk pattern is ``conv k0, pool, conv k1, pool, ..., conv kn[, conv kn+1]``
    with one conv in front of each pool and up to two convs after the last pool.
    """
    import itertools

    best = None
    for tail in (1, 2):
        slots = n_pools + tail
        for kernels in itertools.product(_ODD_KERNELS, repeat=slots):
            rf, jump = 1, 1
            for i in range(n_pools):
                rf += (kernels[i] - 1) * jump
                rf += 1 * jump  # the 2x2 pool
                jump *= 2
            for i in range(n_pools, slots):
                rf += (kernels[i] - 1) * jump
            if rf < target_rf:
                continue
            cost = (rf - target_rf, sum(k * k * j for k, j in
                                        zip(kernels, [1] * n_pools + [2 ** n_pools] * tail)),
                    slots)
            if best is None or cost < best[0]:
                best = (cost, list(kernels), rf)
    if best is None:
        raise DesignError(
            f"stage-1 receptive field {target_rf} is not achievable with kernels "
            f"<= {MAX_KERNEL} and {n_pools} pooling layers"
        )
    return best[1]


def _conv(k: int, channels: int) -> LayerSpec:
    return LayerSpec(kind="conv", kernel=k, stride=1, padding=(k - 1) // 2,
                     channels_out=channels)


def _trunk_layers(kernels: List[int], n_pools: int,
                  base_width: int, feature_width: int) -> List[LayerSpec]:
    widths = [base_width if i == 0 else feature_width for i in range(len(kernels))]
    layers: List[LayerSpec] = []
    for i, k in enumerate(kernels):
        layers.append(_conv(k, widths[i]))
        layers.append(LayerSpec(kind="relu"))
        if i < n_pools:
            layers.append(LayerSpec(kind="pool", kernel=2, stride=2, padding=0))
    return layers


def design_default_specs(parts: int, input_size, target_stage1_rf: int,
                         target_context_rf: int, *, stages: int = 3,
                         heatmap_stride: Optional[int] = None,
                         image_channels: int = 1,
                         base_width: int = 8, feature_width: Optional[int] = None,
                         context_width: int = 16, head_width: Optional[int] = None,
                         use_center_map: bool = True,
                         share_image_features: bool = True) -> ModelSpec:
    """Construct a model spec whose receptive fields meet the given targets.

    ``target_stage1_rf`` is in image pixels, ``target_context_rf`` in heatmap
    cells (the reach of a later stage on the previous stage's belief maps).
    Raises :class:`DesignError`, naming the best achievable value, when a
    target cannot be met with kernels <= 11 and at most 9 layers per stack.
    """
    h, w = input_size
    if heatmap_stride is None:
        heatmap_stride = 8 if min(h, w) >= 184 else 4
    n_pools = int(round(math.log2(heatmap_stride))) if heatmap_stride > 1 else 0
    if 2 ** n_pools != heatmap_stride:
        raise DesignError(f"heatmap stride {heatmap_stride} must be a power of two")
    if h % heatmap_stride or w % heatmap_stride:
        raise DesignError(f"input size {input_size} not divisible by stride {heatmap_stride}")
    if feature_width is None:
        feature_width = 2 * base_width
    if head_width is None:
        head_width = feature_width
    out_channels = parts + 1

    # Degenerate single-conv predictor: possible only without downsampling.
    if n_pools == 0 and target_stage1_rf % 2 == 1 and target_stage1_rf <= MAX_KERNEL:
        stage1_layers = [_conv(target_stage1_rf, out_channels)]
        trunk_kernels = [target_stage1_rf]
    else:
        trunk_kernels = _plan_trunk_kernels(target_stage1_rf, n_pools)
        stage1_layers = _trunk_layers(trunk_kernels, n_pools, base_width, feature_width)
        stage1_layers += [
            _conv(1, head_width), LayerSpec(kind="relu"),
            _conv(1, out_channels),
        ]

    ctx_kernels = _plan_context_kernels(target_context_rf)
    stage_specs = [StageSpec(image_feature_layers=stage1_layers,
                             context_layers=[], output_parts=out_channels)]
    for _ in range(2, stages + 1):
        feat_layers = _trunk_layers(trunk_kernels, n_pools, base_width, feature_width)
        ctx_layers: List[LayerSpec] = []
        for k in ctx_kernels:
            ctx_layers.append(_conv(k, context_width))
            ctx_layers.append(LayerSpec(kind="relu"))
        ctx_layers += [_conv(1, context_width), LayerSpec(kind="relu"),
                       _conv(1, out_channels)]
        stage_specs.append(StageSpec(image_feature_layers=feat_layers,
                                     context_layers=ctx_layers,
                                     output_parts=out_channels))

    return ModelSpec(stages=stages, parts=parts, input_size=(h, w),
                     heatmap_stride=heatmap_stride, use_center_map=use_center_map,
                     stage_specs=stage_specs,
                     share_image_features=share_image_features,
                     image_channels=image_channels)


def build_rf_family(parts: int, input_size, context_rf_targets: Sequence[int],
                    *, reference_index: Optional[int] = None,
                    tolerance: float = 0.10, **kwargs) -> List[ModelSpec]:
    """Specs differing only in context receptive field, parameter-balanced.

    The spec at ``reference_index`` (default: the middle target) sets the
    parameter budget; the other members get their context width adjusted so
    all totals stay within ``tolerance`` of the budget.
    """
    from .architecture import spec_parameter_count

    targets = list(context_rf_targets)
    if reference_index is None:
        reference_index = len(targets) // 2
    stage1_target = kwargs.pop("target_stage1_rf", 24)
    reference = design_default_specs(parts, input_size, stage1_target,
                                     targets[reference_index], **kwargs)
    budget = spec_parameter_count(reference)
    kwargs.pop("context_width", None)  # balanced members search their own width
    family: List[ModelSpec] = []
    for i, target in enumerate(targets):
        if i == reference_index:
            family.append(reference)
            continue
        best = None
        for width in range(4, 128):
            candidate = design_default_specs(parts, input_size, stage1_target, target,
                                             context_width=width, **kwargs)
            count = spec_parameter_count(candidate)
            err = abs(count - budget)
            if best is None or err < best[0]:
                best = (err, candidate, count)
        err, candidate, count = best
        if err > tolerance * budget:
            raise DesignError(
                f"cannot balance context rf {target} within {tolerance:.0%} of "
                f"{budget} parameters (closest: {count})"
            )
        family.append(candidate)
    return family
