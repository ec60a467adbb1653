"""Declarative multi-stage network construction.

A model is a sequence of T stages producing dense belief maps, one channel
per part plus one for background, all on the (H/stride, W/stride) heatmap
grid.  Stage 1 predicts from image evidence alone; every later stage
consumes the channel concatenation of

    [image features, previous-stage beliefs, optional center map]

in that order, and refines the beliefs through its context layers.  When
``share_image_features`` is on, stages 2..T alias one set of image-feature
weights (a single share group), so one SGD update moves all of them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import Parameter, Tensor, concat_channels, conv2d, maxpool2, relu
from .engine.checkpoint import (
    CheckpointData,
    FingerprintMismatch,
    load_checkpoint,
    save_checkpoint,
)

LAYER_KINDS = ("conv", "pool", "relu")


class BuildError(ValueError):
    """Inconsistent architecture spec, rejected at build time."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    channels_out: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise BuildError(f"invalid layer geometry: {self}")
        if self.kind == "conv" and (self.channels_out is None or self.channels_out < 1):
            raise BuildError("conv layers must declare channels_out >= 1")


@dataclass(frozen=True)
class StageSpec:
    """One stage: image-feature layers plus, for stages >= 2, context layers."""

    image_feature_layers: Tuple[LayerSpec, ...]
    context_layers: Tuple[LayerSpec, ...]
    output_parts: int

    def __init__(self, image_feature_layers: Sequence[LayerSpec],
                 context_layers: Sequence[LayerSpec], output_parts: int):
        object.__setattr__(self, "image_feature_layers", tuple(image_feature_layers))
        object.__setattr__(self, "context_layers", tuple(context_layers))
        object.__setattr__(self, "output_parts", int(output_parts))


@dataclass(frozen=True)
class ModelSpec:
    stages: int
    parts: int
    input_size: Tuple[int, int]
    heatmap_stride: int
    use_center_map: bool
    stage_specs: Tuple[StageSpec, ...]
    share_image_features: bool
    image_channels: int = 1

    def __init__(self, stages, parts, input_size, heatmap_stride, use_center_map,
                 stage_specs, share_image_features, image_channels=1):
        object.__setattr__(self, "stages", int(stages))
        object.__setattr__(self, "parts", int(parts))
        object.__setattr__(self, "input_size", tuple(int(v) for v in input_size))
        object.__setattr__(self, "heatmap_stride", int(heatmap_stride))
        object.__setattr__(self, "use_center_map", bool(use_center_map))
        object.__setattr__(self, "stage_specs", tuple(stage_specs))
        object.__setattr__(self, "share_image_features", bool(share_image_features))
        object.__setattr__(self, "image_channels", int(image_channels))

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        h, w = self.input_size
        return h // self.heatmap_stride, w // self.heatmap_stride


def spec_to_dict(spec: ModelSpec) -> dict:
    return asdict(spec)


def spec_from_dict(data: dict) -> ModelSpec:
    stage_specs = []
    for st in data["stage_specs"]:
        stage_specs.append(StageSpec(
            image_feature_layers=[LayerSpec(**ls) for ls in st["image_feature_layers"]],
            context_layers=[LayerSpec(**ls) for ls in st["context_layers"]],
            output_parts=st["output_parts"],
        ))
    return ModelSpec(
        stages=data["stages"], parts=data["parts"],
        input_size=tuple(data["input_size"]),
        heatmap_stride=data["heatmap_stride"],
        use_center_map=data["use_center_map"],
        stage_specs=stage_specs,
        share_image_features=data["share_image_features"],
        image_channels=data.get("image_channels", 1),
    )


def save_spec(spec: ModelSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_spec(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


def fingerprint_spec(spec: ModelSpec) -> str:
    """Stable hash of the canonical spec encoding; stored in checkpoints."""
    canonical = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _walk_stack(layers: Sequence[LayerSpec], in_channels: int,
                spatial: Tuple[int, int], where: str):
    """Track (channels, spatial size) through a stack, validating geometry."""
    c = in_channels
    h, w = spatial
    for i, layer in enumerate(layers):
        tag = f"{where} layer {i + 1} ({layer.kind})"
        if layer.kind == "conv":
            if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                raise BuildError(f"{tag}: kernel {layer.kernel} exceeds input {h}x{w}")
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            c = layer.channels_out
        elif layer.kind == "pool":
            if layer.kernel != 2 or layer.stride != 2 or layer.padding != 0:
                raise BuildError(f"{tag}: only 2x2 stride-2 pooling is supported in models")
            if h % 2 or w % 2:
                raise BuildError(f"{tag}: pooling odd spatial size {h}x{w}")
            h, w = h // 2, w // 2
    return c, (h, w)


def spec_layer_parameter_counts(layers: Sequence[LayerSpec], in_channels: int) -> int:
    count = 0
    c = in_channels
    for layer in layers:
        if layer.kind == "conv":
            count += layer.channels_out * c * layer.kernel * layer.kernel + layer.channels_out
            c = layer.channels_out
    return count


def spec_parameter_count(spec: ModelSpec) -> int:
    """Unique trainable scalars implied by a spec (shared trunks counted once)."""
    _validate_spec(spec)
    total = 0
    feat_channels = None
    for t, stage in enumerate(spec.stage_specs, start=1):
        if t == 1:
            total += spec_layer_parameter_counts(stage.image_feature_layers,
                                                 spec.image_channels)
            continue
        if not spec.share_image_features or t == 2:
            total += spec_layer_parameter_counts(stage.image_feature_layers,
                                                 spec.image_channels)
        feat_channels, _ = _walk_stack(stage.image_feature_layers, spec.image_channels,
                                       spec.input_size, f"stage {t} features")
        ctx_in = feat_channels + (spec.parts + 1) + (1 if spec.use_center_map else 0)
        total += spec_layer_parameter_counts(stage.context_layers, ctx_in)
    return total


def _validate_spec(spec: ModelSpec) -> None:
    h, w = spec.input_size
    s = spec.heatmap_stride
    if spec.stages < 1 or spec.parts < 1:
        raise BuildError("stages and parts must be >= 1")
    if len(spec.stage_specs) != spec.stages:
        raise BuildError(f"{spec.stages} stages declared but {len(spec.stage_specs)} specs given")
    if h % s or w % s:
        raise BuildError(f"input size {spec.input_size} not divisible by heatmap stride {s}")
    heatmap = (h // s, w // s)
    out_channels = spec.parts + 1

    for t, stage in enumerate(spec.stage_specs, start=1):
        if stage.output_parts != out_channels:
            raise BuildError(
                f"stage {t}: output_parts {stage.output_parts} != parts+1 ({out_channels})"
            )
        if t == 1:
            if stage.context_layers:
                raise BuildError("stage 1 must not declare context layers")
            c, sp = _walk_stack(stage.image_feature_layers, spec.image_channels,
                                spec.input_size, "stage 1")
            if c != out_channels:
                raise BuildError(f"stage 1 emits {c} channels, expected {out_channels}")
            if sp != heatmap:
                raise BuildError(f"stage 1 output {sp} != heatmap size {heatmap}")
        else:
            if not stage.context_layers:
                raise BuildError(f"stage {t} must declare context layers")
            feat_c, sp = _walk_stack(stage.image_feature_layers, spec.image_channels,
                                     spec.input_size, f"stage {t} features")
            if sp != heatmap:
                raise BuildError(f"stage {t} features output {sp} != heatmap size {heatmap}")
            ctx_in = feat_c + out_channels + (1 if spec.use_center_map else 0)
            c, sp = _walk_stack(stage.context_layers, ctx_in, heatmap,
                                f"stage {t} context")
            if c != out_channels:
                raise BuildError(f"stage {t} emits {c} channels, expected {out_channels}")
            if sp != heatmap:
                raise BuildError(f"stage {t} context output {sp} != heatmap size {heatmap}")
    if spec.share_image_features:
        trunks = [st.image_feature_layers for st in spec.stage_specs[1:]]
        if any(tr != trunks[0] for tr in trunks[1:]):
            raise BuildError("share_image_features requires identical trunks for stages >= 2")


class _Executable:
    """A layer stack bound to its parameters, runnable on engine tensors."""

    def __init__(self, layers: Sequence[LayerSpec], convs: List[Tuple[Parameter, Parameter]]):
        self.layers = tuple(layers)
        self.convs = convs  # (kernel, bias) per conv layer, in order

    def run(self, x: Tensor) -> Tensor:
        conv_idx = 0
        for layer in self.layers:
            if layer.kind == "conv":
                kernel, bias = self.convs[conv_idx]
                conv_idx += 1
                x = conv2d(x, kernel.tensor, bias.tensor,
                           stride=layer.stride, padding=layer.padding)
            elif layer.kind == "pool":
                x, _ = maxpool2(x)
            else:
                x = relu(x)
        return x


SHARED_FEATURES_GROUP = "image_features"


class Model:
    """A built T-stage belief-map predictor.

    Immutable during forward; training mutates parameter tensors in place.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32, seed: int = 0):
        _validate_spec(spec)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.fingerprint = fingerprint_spec(spec)
        self.parameters: List[Parameter] = []
        rng = np.random.default_rng(seed)

        self._stage1 = self._make_stack(spec.stage_specs[0].image_feature_layers,
                                        spec.image_channels, "stage1/conv", rng)
        self._trunks: List[Optional[_Executable]] = [None]  # index by stage-2 offset
        self._contexts: List[_Executable] = []
        shared_trunk: Optional[_Executable] = None
        for t in range(2, spec.stages + 1):
            stage = spec.stage_specs[t - 1]
            if spec.share_image_features and shared_trunk is not None:
                trunk = shared_trunk
                self._alias_stack(trunk, f"stage{t}/feat", SHARED_FEATURES_GROUP)
            else:
                group = SHARED_FEATURES_GROUP if spec.share_image_features else None
                trunk = self._make_stack(stage.image_feature_layers,
                                         spec.image_channels, f"stage{t}/feat", rng,
                                         share_group=group)
                if spec.share_image_features:
                    shared_trunk = trunk
            feat_c, _ = _walk_stack(stage.image_feature_layers, spec.image_channels,
                                    spec.input_size, "features")
            ctx_in = feat_c + spec.parts + 1 + (1 if spec.use_center_map else 0)
            ctx = self._make_stack(stage.context_layers, ctx_in, f"stage{t}/ctx", rng)
            self._trunks.append(trunk)
            self._contexts.append(ctx)

    def _make_stack(self, layers, in_channels, prefix, rng, share_group=None) -> _Executable:
        convs = []
        c = in_channels
        conv_no = 0
        for layer in layers:
            if layer.kind != "conv":
                continue
            conv_no += 1
            f, k = layer.channels_out, layer.kernel
            # He-uniform: keeps activation variance roughly constant through
            # relu-conv stacks, which deep belief cascades need to train.
            bound = math.sqrt(6.0 / (c * k * k))
            kernel = Parameter(
                name=f"{prefix}{conv_no}/kernel",
                tensor=Tensor(rng.uniform(-bound, bound, size=(f, c, k, k)),
                              requires_grad=True, dtype=self.dtype),
                share_group=share_group,
            )
            bias = Parameter(
                name=f"{prefix}{conv_no}/bias",
                tensor=Tensor(np.zeros(f), requires_grad=True, dtype=self.dtype),
                share_group=share_group,
            )
            self.parameters.extend([kernel, bias])
            convs.append((kernel, bias))
            c = f
        return _Executable(layers, convs)

    def _alias_stack(self, stack: _Executable, prefix: str, group: str) -> None:
        conv_no = 0
        for kernel, bias in stack.convs:
            conv_no += 1
            self.parameters.append(Parameter(f"{prefix}{conv_no}/kernel", kernel.tensor, group))
            self.parameters.append(Parameter(f"{prefix}{conv_no}/bias", bias.tensor, group))

    # -- introspection -----------------------------------------------------

    def unique_parameters(self) -> List[Parameter]:
        """One Parameter per distinct storage, first (owning) name wins."""
        seen = set()
        out = []
        for p in self.parameters:
            if id(p.tensor) in seen:
                continue
            seen.add(id(p.tensor))
            out.append(p)
        return out

    def num_parameters(self) -> int:
        return sum(p.tensor.data.size for p in self.unique_parameters())

    def state_parameters(self) -> List[Parameter]:
        return list(self.parameters)

    # -- execution ---------------------------------------------------------

    def _check_image(self, image: Tensor) -> None:
        n, c, h, w = image.data.shape if image.data.ndim == 4 else (None,) * 4
        if n is None:
            raise BuildError(f"image must be (N,C,H,W), got shape {image.data.shape}")
        if (h, w) != self.spec.input_size or c != self.spec.image_channels:
            raise BuildError(
                f"image shape {image.data.shape[1:]} does not match spec "
                f"{(self.spec.image_channels, *self.spec.input_size)}"
            )

    def forward(self, image: Tensor, center_map: Optional[Tensor] = None,
                up_to_stage: Optional[int] = None) -> List[Tensor]:
        """Run all stages (or the first ``up_to_stage``); one belief tensor each.

        Stage t > 1 consumes concat(image features, previous beliefs, center
        map); the spatial context function is realized purely by the receptive
        field of the context convolutions on those inputs.
        """
        self._check_image(image)
        last = self.spec.stages if up_to_stage is None else min(up_to_stage, self.spec.stages)
        hm = self.spec.heatmap_size
        if self.spec.use_center_map and last >= 2:
            if center_map is None:
                raise BuildError("spec uses a center map; forward requires one")
            cshape = center_map.data.shape
            if cshape != (image.data.shape[0], 1, *hm):
                raise BuildError(
                    f"center map shape {cshape} != {(image.data.shape[0], 1, *hm)}"
                )
        beliefs = [self._stage1.run(image)]
        feat_cache: dict = {}
        for t in range(2, last + 1):
            trunk = self._trunks[t - 1]
            feats = feat_cache.get(id(trunk))
            if feats is None:
                feats = trunk.run(image)
                feat_cache[id(trunk)] = feats
            pieces = [feats, beliefs[-1]]
            if self.spec.use_center_map:
                pieces.append(center_map)
            x = concat_channels(*pieces)
            beliefs.append(self._contexts[t - 2].run(x))
        return beliefs

    def run_stage(self, t: int, image: Tensor, prev_beliefs: Tensor,
                  center_map: Optional[Tensor] = None) -> Tensor:
        """Run a single stage t >= 2 on explicitly provided previous beliefs."""
        if t < 2 or t > self.spec.stages:
            raise BuildError(f"run_stage needs 2 <= t <= {self.spec.stages}, got {t}")
        feats = self._trunks[t - 1].run(image)
        pieces = [feats, prev_beliefs]
        if self.spec.use_center_map:
            if center_map is None:
                raise BuildError("spec uses a center map; run_stage requires one")
            pieces.append(center_map)
        return self._contexts[t - 2].run(concat_channels(*pieces))

    def predict(self, image: np.ndarray, center_map: Optional[np.ndarray] = None):
        """Single-sample forward returning one BeliefStack per stage."""
        from .beliefs import BeliefStack

        img = Tensor(image[None].astype(self.dtype, copy=False))
        cm = None
        if center_map is not None:
            cm = Tensor(center_map[None].astype(self.dtype, copy=False))
        outs = self.forward(img, cm)
        return [BeliefStack(scores=o.data[0].copy()) for o in outs]


def build_cpm(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Validate a spec and construct the model with seeded initialization."""
    return Model(spec, dtype=dtype, seed=seed)


# -- model checkpoints -----------------------------------------------------


def save_model(model: Model, path, extra: Optional[dict] = None,
               extra_arrays: Optional[dict] = None) -> None:
    payload = dict(extra or {})
    payload["arch_spec"] = spec_to_dict(model.spec)
    payload["dtype"] = model.dtype.name
    save_checkpoint(path, model.parameters, fingerprint=model.fingerprint,
                    extra=payload, extra_arrays=extra_arrays)


def load_model(path, expected_spec: Optional[ModelSpec] = None) -> Tuple[Model, CheckpointData]:
    """Rebuild a model from a checkpoint, verifying its fingerprint.

    The checkpoint embeds the architecture spec; its recomputed fingerprint
    must match the stored one, and, when ``expected_spec`` is given, that
    spec's fingerprint as well.
    """
    data = load_checkpoint(path)
    spec = spec_from_dict(data.extra["arch_spec"])
    recomputed = fingerprint_spec(spec)
    if recomputed != data.fingerprint:
        raise FingerprintMismatch(
            f"{path}: embedded spec fingerprint {recomputed} != stored {data.fingerprint}"
        )
    if expected_spec is not None and fingerprint_spec(expected_spec) != data.fingerprint:
        raise FingerprintMismatch(
            f"{path}: checkpoint fingerprint {data.fingerprint} does not match the "
            f"requested spec ({fingerprint_spec(expected_spec)})"
        )
    model = Model(spec, dtype=np.dtype(data.extra.get("dtype", "float32")), seed=0)
    by_name = {p.name: p for p in model.parameters}
    if set(by_name) != set(data.arrays):
        raise FingerprintMismatch(f"{path}: parameter names do not match the spec")
    for p in model.unique_parameters():
        arr = data.arrays[p.name].astype(model.dtype, copy=True)
        if arr.shape != p.tensor.data.shape:
            raise FingerprintMismatch(
                f"{path}: shape mismatch for '{p.name}': {arr.shape} vs {p.tensor.data.shape}"
            )
        p.tensor.data = arr
    return model, data
