"""Assembly of the four-stage detection network.

Stage layout (all convolutions are bias-free; the fully connected head
carries a bias):

* Stage 1, residual feature learning: a 3x3 grouped adjustment convolution
  (input planes -> block1_channels, one group per residual plane) followed by
  block1_count pre-activation residual units of two grouped 3x3 convolutions.
* Stage 2, spatiotemporal feature learning: a 1x1 pointwise adjustment
  (block1_channels -> block2_channels) followed by block2_count residual
  units of two depthwise-separable 3x3 convolutions.
* Stage 3, high-level feature learning: block3_count two-path downsampling
  blocks.  Path A: 1x1 pointwise conv, stride 2, then BN.  Path B: 3x3
  depthwise-separable conv, BN, ReLU, 2x2 average pool stride 2.  The paths
  are summed; output widths follow block3_channel_plan.
* Stage 4, classification: depthwise-separable 3x3 conv, BN, ReLU, global
  average pooling, FC to 2 classes, softmax.

Stages 1-2 never pool, so feature maps keep the input crop size there.

The reference parameter total (218,010) does not come with the stage-3
channel widths; solve_channel_plan recovers candidate widths by exhaustive
search under an explicit counting convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import InvalidInputError
from .nn import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, ParamStore,
                 ReLU, ResidualUnit, Sequential, TwoPath, depthwise_separable, softmax)

PARAM_TARGET = 218010
MAC_TARGET_BATCH64 = 493.14e9

# Recovered by solve_channel_plan (exhaustive search, bias-free convs,
# BN affine counted): exactly PARAM_TARGET parameters, and the exact match
# whose 64-stack MAC total lies closest to the reference complexity figure.
DEFAULT_CHANNEL_PLAN = (126, 126, 130, 143)

DESK_CHANNEL_PLAN = (30, 60, 120)


@dataclass(frozen=True)
class NetConfig:
    input_planes: int = 5
    crop_size: int = 256
    block1_count: int = 5
    block1_channels: int = 60
    groups: int = 5
    block2_count: int = 5
    block2_channels: int = 30
    block3_channel_plan: tuple[int, ...] = DEFAULT_CHANNEL_PLAN
    seed: int = 0

    @property
    def block3_count(self) -> int:
        return len(self.block3_channel_plan)

    def validate(self):
        if self.block1_channels % self.groups:
            raise InvalidInputError("block1_channels must be divisible by groups")
        if self.input_planes != self.groups:
            raise InvalidInputError("one group per input residual plane is required")
        if any(c <= 0 for c in self.block3_channel_plan):
            raise InvalidInputError("channel plan entries must be positive")
        if self.crop_size % (2 ** self.block3_count):
            raise InvalidInputError(
                f"crop size {self.crop_size} must be divisible by "
                f"2^{self.block3_count}")

    def to_manifest(self) -> dict[str, str]:
        return {
            "input_planes": str(self.input_planes),
            "crop_size": str(self.crop_size),
            "block1_count": str(self.block1_count),
            "block1_channels": str(self.block1_channels),
            "groups": str(self.groups),
            "block2_count": str(self.block2_count),
            "block2_channels": str(self.block2_channels),
            "block3_channel_plan": ",".join(map(str, self.block3_channel_plan)),
            "seed": str(self.seed),
        }

    @staticmethod
    def from_manifest(manifest: dict[str, str]) -> "NetConfig":
        plan = tuple(int(v) for v in manifest["block3_channel_plan"].split(","))
        return NetConfig(
            input_planes=int(manifest["input_planes"]),
            crop_size=int(manifest["crop_size"]),
            block1_count=int(manifest["block1_count"]),
            block1_channels=int(manifest["block1_channels"]),
            groups=int(manifest["groups"]),
            block2_count=int(manifest["block2_count"]),
            block2_channels=int(manifest["block2_channels"]),
            block3_channel_plan=plan,
            seed=int(manifest["seed"]),
        )


def desk_config(seed: int = 0, crop_size: int = 64) -> NetConfig:
    """Reduced configuration for CI-scale training: crop 64, stage depths
    (2, 2, 3, 1)."""
    return NetConfig(crop_size=crop_size, block1_count=2, block2_count=2,
                     block3_channel_plan=DESK_CHANNEL_PLAN, seed=seed)


class FcdNet:
    def __init__(self, config: NetConfig, store: ParamStore, net: Sequential):
        self.config = config
        self.store = store
        self.net = net

    def forward(self, stacks: np.ndarray, training: bool = False) -> np.ndarray:
        """(B, planes, S, S) residual stacks -> (B, 2) class probabilities;
        class 0 = original, class 1 = forged."""
        if stacks.ndim != 4 or stacks.shape[1] != self.config.input_planes:
            raise InvalidInputError(
                f"expected (B, {self.config.input_planes}, S, S) input, "
                f"got {stacks.shape}")
        self._logits = self.net.forward(stacks, training)
        return softmax(self._logits)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        return self.net.backward(grad_logits)

    def count_params(self) -> int:
        return nn.count_params(self.store)

    def count_macs(self, crop_size: int | None = None) -> int:
        s = crop_size or self.config.crop_size
        return nn.count_macs(self.net, (self.config.input_planes, s, s))

    def save(self, path, extra_manifest: dict[str, str] | None = None):
        manifest = self.config.to_manifest()
        if extra_manifest:
            manifest.update(extra_manifest)
        nn.save_checkpoint(path, self.store, manifest)


def classify(probs_row: np.ndarray) -> int:
    """Argmax with the tie (p = [0.5, 0.5]) resolved as forged."""
    return 1 if probs_row[1] >= probs_row[0] else 0


def build(config: NetConfig, dtype=np.float32) -> FcdNet:
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    g = config.groups
    c1 = config.block1_channels
    c2 = config.block2_channels
    layers: list = []

    layers.append(Conv2d(store, "b1.adj", config.input_planes, c1, 3, pad=1,
                         groups=g, rng=rng, dtype=dtype))
    for i in range(config.block1_count):
        body = Sequential(
            BatchNorm2d(store, f"b1.u{i}.bn1", c1, dtype=dtype), ReLU(),
            Conv2d(store, f"b1.u{i}.conv1", c1, c1, 3, pad=1, groups=g, rng=rng, dtype=dtype),
            BatchNorm2d(store, f"b1.u{i}.bn2", c1, dtype=dtype), ReLU(),
            Conv2d(store, f"b1.u{i}.conv2", c1, c1, 3, pad=1, groups=g, rng=rng, dtype=dtype),
        )
        layers.append(ResidualUnit(body))

    layers.append(Conv2d(store, "b2.adj", c1, c2, 1, rng=rng, dtype=dtype))
    for i in range(config.block2_count):
        body = Sequential(
            BatchNorm2d(store, f"b2.u{i}.bn1", c2, dtype=dtype), ReLU(),
            depthwise_separable(store, f"b2.u{i}.ds1", c2, c2, rng=rng, dtype=dtype),
            BatchNorm2d(store, f"b2.u{i}.bn2", c2, dtype=dtype), ReLU(),
            depthwise_separable(store, f"b2.u{i}.ds2", c2, c2, rng=rng, dtype=dtype),
        )
        layers.append(ResidualUnit(body))

    cin = c2
    for i, cout in enumerate(config.block3_channel_plan):
        path_a = Sequential(
            Conv2d(store, f"b3.u{i}.short", cin, cout, 1, stride=2, rng=rng, dtype=dtype),
            BatchNorm2d(store, f"b3.u{i}.short_bn", cout, dtype=dtype),
        )
        path_b = Sequential(
            depthwise_separable(store, f"b3.u{i}.ds", cin, cout, rng=rng, dtype=dtype),
            BatchNorm2d(store, f"b3.u{i}.bn", cout, dtype=dtype), ReLU(),
            AvgPool2d(2, 2),
        )
        layers.append(TwoPath(path_a, path_b))
        cin = cout

    layers.append(depthwise_separable(store, "b4.ds", cin, cin, rng=rng, dtype=dtype))
    layers.append(BatchNorm2d(store, "b4.bn", cin, dtype=dtype))
    layers.append(ReLU())
    layers.append(GlobalAvgPool())
    layers.append(Linear(store, "b4.fc", cin, 2, rng=rng, dtype=dtype))
    return FcdNet(config, store, Sequential(*layers))


def load(path, dtype=np.float32) -> FcdNet:
    params, buffers, manifest = nn.load_checkpoint(path)
    config = NetConfig.from_manifest(manifest)
    net = build(config, dtype=dtype)
    for p in net.store.params():
        if p.name not in params:
            raise InvalidInputError(f"checkpoint missing parameter {p.name}")
        p.value[...] = params[p.name].astype(dtype)
    for name, buf in net.store.buffers.items():
        if name in buffers:
            buf[...] = buffers[name].astype(dtype)
    return net


# ---------------------------------------------------------------------------
# Analytic parameter / MAC accounting and the channel-plan solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountingConvention:
    conv_bias: bool = False
    bn_affine: bool = True

    def label(self) -> str:
        return (f"conv_bias={'yes' if self.conv_bias else 'no'}, "
                f"bn_affine={'counted' if self.bn_affine else 'excluded'}")


def plan_param_count(plan, config: NetConfig | None = None,
                     convention: CountingConvention = CountingConvention()):
    """Analytic trainable-parameter count for a stage-3 channel plan.

    Vectorizes over numpy arrays: plan entries may be arrays of candidate
    widths (all broadcast together).
    """
    cfg = config or NetConfig()
    cb = convention.conv_bias
    bn = convention.bn_affine
    g, c1, c2, p = cfg.groups, cfg.block1_channels, cfg.block2_channels, cfg.input_planes

    def bn_params(c):
        return 2 * c if bn else 0 * c

    total = c1 * (p // g) * 9 + (c1 if cb else 0)  # stage-1 adjustment
    unit1 = 2 * (bn_params(c1) + c1 * (c1 // g) * 9 + (c1 if cb else 0))
    total += cfg.block1_count * unit1
    total += c2 * c1 + (c2 if cb else 0)  # stage-2 adjustment
    ds22 = c2 * 9 + (c2 if cb else 0) + c2 * c2 + (c2 if cb else 0)
    unit2 = 2 * (bn_params(c2) + ds22)
    total += cfg.block2_count * unit2

    cin = c2
    for cout in plan:
        path_a = cin * cout + (cout if cb else 0) + bn_params(cout)
        path_b = (cin * 9 + (cin if cb else 0)          # depthwise
                  + cin * cout + (cout if cb else 0)    # pointwise
                  + bn_params(cout))
        total = total + path_a + path_b
        cin = cout
    # stage 4: depthwise-separable (cin -> cin), BN, FC(cin -> 2) with bias
    total = total + cin * 9 + (cin if cb else 0) + cin * cin + (cin if cb else 0) \
        + bn_params(cin) + 2 * cin + 2
    return total


def plan_mac_count(plan, config: NetConfig | None = None) -> int:
    """Analytic per-stack MAC count (conv: out elements x k^2 x c_in / groups;
    FC: in x out)."""
    cfg = config or NetConfig()
    s = cfg.crop_size
    g, c1, c2, p = cfg.groups, cfg.block1_channels, cfg.block2_channels, cfg.input_planes
    area = s * s
    total = area * c1 * 9 * (p // g)
    total += cfg.block1_count * 2 * area * c1 * 9 * (c1 // g)
    total += area * c2 * c1
    total += cfg.block2_count * 2 * (area * c2 * 9 + area * c2 * c2)
    cin, h = c2, s
    for cout in plan:
        total += (h // 2) * (h // 2) * cout * cin        # path A pointwise, stride 2
        total += h * h * cin * 9 + h * h * cout * cin    # path B depthwise + pointwise
        cin, h = cout, h // 2
    total += h * h * cin * 9 + h * h * cin * cin         # stage 4 separable conv
    total += cin * 2                                     # FC
    return total


@dataclass
class SolverResult:
    plan: tuple[int, ...]
    params: int
    exact: bool
    delta: int
    macs_per_stack: int
    macs_per_batch64: int
    convention_counts: dict[str, int]
    n_exact_matches: int


_CONVENTIONS = (
    CountingConvention(conv_bias=False, bn_affine=True),
    CountingConvention(conv_bias=True, bn_affine=True),
    CountingConvention(conv_bias=False, bn_affine=False),
    CountingConvention(conv_bias=True, bn_affine=False),
)


def solve_channel_plan(target_params: int = PARAM_TARGET, lo: int = 30, hi: int = 512,
                       step: int = 1, config: NetConfig | None = None,
                       convention: CountingConvention = CountingConvention()) -> SolverResult:
    """Exhaustive search for a monotone non-decreasing stage-3 channel plan
    (4 widths in [lo, hi]) whose analytic parameter count hits the target.

    The first three widths sweep the grid with the given step; the last width
    is solved exactly from the quadratic the count reduces to, so it is
    effectively searched at step 1.  Among exact matches the plan whose
    64-stack MAC count is closest to the reference complexity figure wins
    (then lexicographic order).  Without an exact match the closest plan and
    its delta are returned.
    """
    if lo > hi:
        raise InvalidInputError("empty search space")
    cfg = config or NetConfig()
    values = np.arange(lo, hi + 1, step, dtype=np.int64)

    def count_abc_d(a, b, c, d):
        return plan_param_count((a, b, c, d), cfg, convention)

    exact: list[tuple[int, int, int, int]] = []
    closest_plan = None
    closest_delta = None
    bb, cc = np.meshgrid(values, values, indexing="ij")
    upper = np.int64(hi)
    for a in values:
        mono = (bb >= a) & (cc >= bb)
        # the count is quadratic in d with leading coefficient 1; recover the
        # linear/constant coefficients numerically
        n1 = count_abc_d(a, bb, cc, np.int64(1))
        n2 = count_abc_d(a, bb, cc, np.int64(2))
        coef_b = (n2 - n1) - 3
        coef_c = n1 - 1 - coef_b
        disc = coef_b * coef_b - 4 * (coef_c - target_params)
        ok = mono & (disc >= 0)
        root = np.zeros_like(disc, dtype=np.float64)
        sq = np.zeros_like(disc)
        sq[ok] = np.floor(np.sqrt(disc[ok].astype(np.float64)) + 0.5).astype(np.int64)
        perfect = ok & (sq * sq == disc)
        d_num = -coef_b + sq
        hit = perfect & (d_num >= 0) & (d_num % 2 == 0)
        d_val = np.where(hit, d_num // 2, 0)
        hit &= (d_val >= cc) & (d_val <= upper)
        for i, j in zip(*np.nonzero(hit)):
            exact.append((int(a), int(bb[i, j]), int(cc[i, j]), int(d_val[i, j])))
        # track the closest achievable count around the real root
        root[ok] = (-coef_b[ok] + np.sqrt(disc[ok].astype(np.float64))) / 2.0
        for cand in (np.floor(root), np.ceil(root)):
            cand = np.clip(cand, cc, upper).astype(np.int64)
            counts = count_abc_d(a, bb, cc, cand)
            delta = np.abs(counts - target_params)
            delta[~mono] = np.iinfo(np.int64).max
            idx = np.unravel_index(np.argmin(delta), delta.shape)
            if closest_delta is None or delta[idx] < closest_delta:
                closest_delta = int(delta[idx])
                closest_plan = (int(a), int(bb[idx]), int(cc[idx]), int(cand[idx]))

    if exact:
        def mac_key(plan):
            return (abs(64 * plan_mac_count(plan, cfg) - MAC_TARGET_BATCH64), plan)
        best = min(exact, key=mac_key)
        chosen, is_exact, delta = best, True, 0
    else:
        chosen, is_exact, delta = closest_plan, False, closest_delta
    params = int(plan_param_count(chosen, cfg, convention))
    macs = int(plan_mac_count(chosen, cfg))
    conv_table = {conv.label(): int(plan_param_count(chosen, cfg, conv))
                  for conv in _CONVENTIONS}
    return SolverResult(tuple(chosen), params, is_exact, delta, macs, 64 * macs,
                        conv_table, len(exact))


def write_plan_report(path, result: SolverResult, target_params: int = PARAM_TARGET):
    """Persist the solver outcome and the counting-convention table."""
    lines = [
        "# Stage-3 channel plan search",
        "",
        f"Target trainable parameters: {target_params}",
        f"Chosen plan: {list(result.plan)}",
        f"Parameter count under the default convention: {result.params}"
        + (" (exact match)" if result.exact else f" (closest, delta {result.delta})"),
        f"Exact matches found in the search space: {result.n_exact_matches}",
        f"MACs per stack: {result.macs_per_stack:,}",
        f"MACs per 64-stack batch: {result.macs_per_batch64:,} "
        f"(reference complexity figure: {MAC_TARGET_BATCH64:,.0f})",
        "",
        "Counts of the chosen plan under alternate counting conventions:",
        "",
    ]
    for label, count in result.convention_counts.items():
        lines.append(f"- {label}: {count}")
    lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
