"""Octree surrogate: BC Net -> octree U-Net -> branch/trunk velocity head.

The U-Net output on the finest octree level is a continuous representation of
the velocity field: any spatial point gets a feature vector by trilinear
interpolation, the spatial head turns it into three branch vectors (one per
velocity component) and the trunk net maps a normalised time to a vector of
the same size; velocities are their dot products plus a per-component bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import octree as ot
from .autodiff import (
    Tensor,
    avg_pool1d,
    concat,
    conv1d,
    fully_connected,
    global_mean_pool,
    interpolate_op,
    lrelu,
    octree_conv,
    octree_conv_strided,
    octree_conv_transposed,
    operator_product,
    parameter,
    repeat_rows,
    reshape,
    sparse_matmul,
)
from .hemo_bc import InflowWaveform
from .vasctree import PointCloud


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    unet_channels: tuple[int, ...] = (32, 64, 128, 256)
    encoder_blocks: tuple[int, ...] = (2, 3, 4, 6)
    decoder_blocks: int = 2
    bottleneck_divisor: int = 4
    bc_channels: tuple[int, ...] = (8, 16, 32, 4)
    bc_kernel: int = 5
    waveform_length: int = 256
    waveform_scale_mls: float = 5.0
    trunk_width: int = 64
    trunk_layers: int = 5
    head_hidden: int = 128
    lrelu_slope: float = 0.01
    octree_depth: int = 10

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.unet_channels) != 4 or len(self.encoder_blocks) != 4:
            raise ValueError("the U-Net has exactly four levels")
        if self.bc_channels[-1] != 4:
            raise ValueError("BC Net must end in a 4-dimensional feature")
        if self.waveform_length % 2 ** len(self.bc_channels):
            raise ValueError("waveform_length must be divisible by 2**(BC Net blocks)")

    @property
    def in_channels(self) -> int:
        return 1 + self.bc_channels[-1]


def _uniform(rng, shape, fan_in, gain=6.0):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Counters:
    unet_calls: int = 0
    level_log: list[int] = field(default_factory=list)


class SurrogateModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, velocity_scale: float = 1.0):
        self.config = config
        self.velocity_scale = velocity_scale
        self.counters = Counters()
        self.params: dict[str, Tensor] = {}
        self._gains: dict[str, float] = {}
        self._calibrating = False
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = parameter(value)

    def _conv(self, rng, name, taps, cin, cout, gain=6.0):
        self._add(f"{name}.w", _uniform(rng, (taps, cin, cout), taps * cin, gain))
        self._add(f"{name}.b", np.zeros(cout))
        self._gains[name] = gain

    def _block(self, rng, name, c):
        mid = max(1, c // self.config.bottleneck_divisor)
        self._conv(rng, f"{name}.a", 27, c, mid)
        self._conv(rng, f"{name}.b", 27, mid, c, gain=1.0)
        self._conv(rng, f"{name}.p", 1, c, c, gain=3.0)

    def _init_params(self, rng):
        cfg = self.config
        cin = 1
        for i, cout in enumerate(cfg.bc_channels):
            self._add(f"bc.{i}.w", _uniform(rng, (cout, cin, cfg.bc_kernel), cin * cfg.bc_kernel))
            self._add(f"bc.{i}.b", np.zeros(cout))
            cin = cout
        ch = cfg.unet_channels
        self._conv(rng, "unet.stem", 27, cfg.in_channels, ch[0])
        for lv, n_blocks in enumerate(cfg.encoder_blocks):
            if lv > 0:
                self._conv(rng, f"unet.down{lv}", 8, ch[lv - 1], ch[lv])
            for j in range(n_blocks):
                self._block(rng, f"unet.enc{lv}.{j}", ch[lv])
        for lv in (2, 1, 0):
            self._conv(rng, f"unet.up{lv}", 8, ch[lv + 1], ch[lv])
            self._conv(rng, f"unet.merge{lv}", 1, 2 * ch[lv], ch[lv])
            for j in range(cfg.decoder_blocks):
                self._block(rng, f"unet.dec{lv}.{j}", ch[lv])
        d = cfg.latent_dim
        self._add("head.fc1.w", _uniform(rng, (ch[0], cfg.head_hidden), ch[0]))
        self._add("head.fc1.b", np.zeros(cfg.head_hidden))
        self._add("head.fc2.w", _uniform(rng, (cfg.head_hidden, 3 * d), cfg.head_hidden, gain=3.0 / d))
        self._add("head.fc2.b", np.zeros(3 * d))
        widths = [1] + [cfg.trunk_width] * (cfg.trunk_layers - 1) + [d]
        for i in range(cfg.trunk_layers):
            gain = 6.0 if i < cfg.trunk_layers - 1 else 3.0
            self._add(f"trunk.{i}.w", _uniform(rng, (widths[i], widths[i + 1]), widths[i], gain))
            self._add(f"trunk.{i}.b", np.zeros(widths[i + 1]) if i else rng.uniform(-1, 1, widths[1]))
        self._add("out.c", np.zeros(3))

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.params:
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def _p(self, name) -> Tensor:
        return self.params[name]

    # -- block (a): boundary conditions and point features -----------------

    def bc_net_forward(self, waveform_samples) -> Tensor:
        cfg = self.config
        x = np.asarray(waveform_samples, dtype=float)
        if x.shape != (cfg.waveform_length,):
            raise ValueError(f"BC Net expects {cfg.waveform_length} samples, got shape {x.shape}")
        h = Tensor(x[None] / cfg.waveform_scale_mls)
        for i in range(len(cfg.bc_channels)):
            h = conv1d(h, self._p(f"bc.{i}.w"), self._p(f"bc.{i}.b"))
            h = lrelu(avg_pool1d(h, 2), cfg.lrelu_slope)
        return global_mean_pool(h)

    def waveform_input(self, waveform: InflowWaveform) -> np.ndarray:
        return waveform.resampled(self.config.waveform_length)

    @staticmethod
    def assemble_features(cloud: PointCloud, bc_vec) -> Tensor:
        df = Tensor(np.asarray(cloud.wall_distance, dtype=float)[:, None])
        return concat([df, repeat_rows(bc_vec, len(cloud))], axis=1)

    # -- block (b): octree U-Net -------------------------------------------

    def _calibrated(self, y: Tensor, name: str) -> Tensor:
        """During calibration, rescale layer ``name`` so its pre-bias output has the target std."""
        if not self._calibrating:
            return y
        b = self.params[f"{name}.b"].data
        std = float((y.data - b).std())
        if std > 0:
            ratio = std / np.sqrt(self._gains[name] / 6.0)
            self.params[f"{name}.w"].data /= ratio
            y = Tensor((y.data - b) / ratio + b)
        return y

    def _conv_op(self, x, name, octree, level):
        y = octree_conv(x, self._p(f"{name}.w"), self._p(f"{name}.b"), octree, level)
        return self._calibrated(y, name)

    def calibrate(self, cloud: PointCloud, waveform: InflowWaveform, octree: ot.Octree) -> None:
        """Data-dependent rescaling of the U-Net convolutions, in forward order.

        Fan-in scaling assumes every kernel tap sees an occupied node; on sparse
        levels most taps see empty space and activations shrink layer by layer.
        One forward pass divides each convolution's weights by the ratio of its
        measured output std to the std its init gain targets for unit-variance input.
        """
        self._calibrating = True
        try:
            self.encode(cloud, waveform, octree)
        finally:
            self._calibrating = False

    def _bottleneck(self, x, name, octree, level):
        s = self.config.lrelu_slope
        h = lrelu(self._conv_op(x, f"{name}.a", octree, level), s)
        h = lrelu(self._conv_op(h, f"{name}.b", octree, level), s)
        return self._conv_op(x, f"{name}.p", octree, level) + h

    def unet_forward(self, octree: ot.Octree, finest_field) -> Tensor:
        cfg = self.config
        s = cfg.lrelu_slope
        top = cfg.octree_depth
        if octree.max_depth < top:
            raise ValueError(f"octree depth {octree.max_depth} is shallower than level {top}")
        if octree.n_nodes(top - 3) == 0:
            raise ValueError(f"octree level {top - 3} is empty")
        self.counters.unet_calls += 1
        log = self.counters.level_log
        x = lrelu(self._conv_op(finest_field, "unet.stem", octree, top), s)
        skips = []
        for lv, n_blocks in enumerate(cfg.encoder_blocks):
            level = top - lv
            if lv > 0:
                y = octree_conv_strided(x, self._p(f"unet.down{lv}.w"), self._p(f"unet.down{lv}.b"), octree, level + 1)
                x = lrelu(self._calibrated(y, f"unet.down{lv}"), s)
            log.append(level)
            for j in range(n_blocks):
                x = self._bottleneck(x, f"unet.enc{lv}.{j}", octree, level)
            skips.append(x)
        for lv in (2, 1, 0):
            level = top - lv
            y = octree_conv_transposed(x, self._p(f"unet.up{lv}.w"), self._p(f"unet.up{lv}.b"), octree, level - 1)
            x = lrelu(self._calibrated(y, f"unet.up{lv}"), s)
            log.append(level)
            x = lrelu(self._conv_op(concat([x, skips[lv]], axis=1), f"unet.merge{lv}", octree, level), s)
            for j in range(cfg.decoder_blocks):
                x = self._bottleneck(x, f"unet.dec{lv}.{j}", octree, level)
        return x

    def encode(self, cloud: PointCloud, waveform: InflowWaveform, octree: ot.Octree) -> Tensor:
        """BC Net, feature assembly, node averaging and one U-Net pass."""
        bc = self.bc_net_forward(self.waveform_input(waveform))
        feats = self.assemble_features(cloud, bc)
        nodes = sparse_matmul(ot.average_matrix(octree), feats)
        return self.unet_forward(octree, nodes)

    # -- block (c): neural function evaluation -----------------------------

    def spatial_head(self, field, octree: ot.Octree, x, matrix=None) -> Tensor:
        """Branch vectors b_x of shape (N, 3, d) at query points ``x`` (N, 3)."""
        f = interpolate_op(field, octree, points=None if matrix is not None else x, matrix=matrix)
        h = lrelu(fully_connected(f, self._p("head.fc1.w"), self._p("head.fc1.b")), self.config.lrelu_slope)
        out = fully_connected(h, self._p("head.fc2.w"), self._p("head.fc2.b"))
        return reshape(out, (len(f), 3, self.config.latent_dim))

    def trunk_forward(self, t) -> Tensor:
        """Trunk vectors r_t of shape (T, d) for normalised times ``t`` (T,)."""
        h = Tensor(np.atleast_1d(np.asarray(t, dtype=float))[:, None])
        if not np.all(np.isfinite(h.data)):
            raise ValueError("trunk net times must be finite")
        n = self.config.trunk_layers
        for i in range(n):
            h = fully_connected(h, self._p(f"trunk.{i}.w"), self._p(f"trunk.{i}.b"))
            if i < n - 1:
                h = lrelu(h, self.config.lrelu_slope)
        return h

    def evaluate_velocity(self, b, r) -> Tensor:
        """u[t, n, i] = <b[n, i], r[t]> + c_i, in units of ``velocity_scale``."""
        return operator_product(b, r, self._p("out.c"))

    def predict(self, cloud: PointCloud, waveform: InflowWaveform, points, times_ms,
                duration_ms: float, octree: ot.Octree | None = None, chunk: int = 65536) -> np.ndarray:
        """Velocities (m/s) of shape (N_t, N_s, 3); the U-Net runs exactly once."""
        if octree is None:
            octree = ot.build(cloud, ot.OctreeConfig(self.config.octree_depth))
        field = self.encode(cloud, waveform, octree)
        r = self.trunk_forward(np.asarray(times_ms, dtype=float) / duration_ms)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty((len(r), len(pts), 3))
        for lo in range(0, len(pts), chunk):
            b = self.spatial_head(field, octree, pts[lo:lo + chunk])
            out[:, lo:lo + chunk] = self.evaluate_velocity(b, r).data
        return out * self.velocity_scale
