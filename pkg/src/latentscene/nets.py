"""Model definitions: shared encoder, visual/concept decoders, latent
recurrence, and the stacked+parallel GRU sequence predictor.

All four models share one convolutional trunk family. The encoder maps an
RGB frame to the mean and log-variance of a diagonal Gaussian over the
latent vector; the latent vector is partitioned into a cars segment, a
generic middle, and a lanes segment. Each decoder mirrors the encoder with
transpose convolutions; concept decoders consume only their segment and
emit a probability map.

Parameters live in a flat name->Tensor dict so checkpoints and the
optimizer can treat every model uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, UsageError


@dataclass(frozen=True)
class LatentLayout:
    """Partition of the latent vector: [cars | generic | lanes]."""
    n_total: int
    n_cars: int
    n_lanes: int

    def validate(self):
        if min(self.n_total, self.n_cars, self.n_lanes) < 1:
            raise ConfigError(f"latent widths must be positive: {self}")
        if self.n_cars + self.n_lanes >= self.n_total:
            raise ConfigError(f"cars+lanes segments ({self.n_cars}+{self.n_lanes})"
                              f" must leave room in {self.n_total} latent units")
        return self

    @property
    def n_mid(self):
        return self.n_total - self.n_cars - self.n_lanes

    def segment(self, concept):
        if concept == "cars":
            return 0, self.n_cars
        if concept == "lanes":
            return self.n_total - self.n_lanes, self.n_total
        if concept == "mid":
            return self.n_cars, self.n_total - self.n_lanes
        raise UsageError(f"unknown concept {concept!r}")


def project_latent(layout, z, concept):
    """Slice the segment of `z` holding one concept (gradient flows through)."""
    if z.shape[-1] != layout.n_total:
        raise ShapeError(f"latent width {z.shape[-1]} does not match layout"
                         f" {layout.n_total}")
    start, stop = layout.segment(concept)
    return T.narrow(z, start, stop)


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    filters: int
    stride: int


@dataclass(frozen=True)
class ArchConfig:
    """Geometry of the encoder/decoder trunk at one input resolution."""
    resolution: int
    layout: LatentLayout
    conv_specs: tuple        # encoder convolutions, applied in order
    enc_dense: tuple         # hidden dense widths after flattening
    dec_dense: tuple         # hidden dense widths before the grid projection
    rnn_hidden: int          # latent recurrence hidden width
    dec_grid_channels: int   # channels of the decoder's first spatial grid
    predictor_inputs: int = 8
    predictor_outputs: int = 4

    def validate(self):
        self.layout.validate()
        if self.resolution < 2 ** len(self.conv_specs):
            raise ConfigError(f"resolution {self.resolution} too small for"
                              f" {len(self.conv_specs)} stride-2 stages")
        for spec in self.conv_specs:
            if spec.kernel % 2 != 1:
                raise ConfigError(f"kernel extents must be odd, got {spec.kernel}")
        if self.predictor_inputs < 1 or self.predictor_outputs < 1:
            raise ConfigError("predictor window sizes must be >= 1")
        return self

    @property
    def grid(self):
        side = self.resolution
        for spec in self.conv_specs:
            side = (side + 2 * (spec.kernel // 2) - spec.kernel) // spec.stride + 1
        return side

    @property
    def flat_width(self):
        return self.conv_specs[-1].filters * self.grid * self.grid

    @property
    def dec_flat_width(self):
        return self.dec_grid_channels * self.grid * self.grid

    def describe(self):
        convs = ",".join(f"{s.kernel}x{s.filters}s{s.stride}" for s in self.conv_specs)
        return (f"res={self.resolution};latent={self.layout.n_total}/"
                f"{self.layout.n_cars}/{self.layout.n_lanes};convs={convs};"
                f"enc={self.enc_dense};dec={self.dec_dense};grid={self.dec_grid_channels};"
                f"rnn={self.rnn_hidden};"
                f"pred={self.predictor_inputs}->{self.predictor_outputs}")


def desk_arch(resolution=64, layout=None):
    """Desk-scale preset: same topology as the full-scale stack, smaller widths."""
    layout = layout or LatentLayout(32, 8, 8)
    return ArchConfig(
        resolution=resolution,
        layout=layout,
        conv_specs=(ConvSpec(7, 8, 2), ConvSpec(7, 16, 2),
                    ConvSpec(5, 16, 2), ConvSpec(5, 16, 2)),
        enc_dense=(128, 64),
        dec_dense=(128,),
        rnn_hidden=layout.n_total,
        dec_grid_channels=16,
    ).validate()


def paper_arch():
    """Full-scale preset: 256x256 input, 128-wide latent with 16/16 segments."""
    layout = LatentLayout(128, 16, 16)
    return ArchConfig(
        resolution=256,
        layout=layout,
        conv_specs=(ConvSpec(7, 16, 2), ConvSpec(7, 32, 2),
                    ConvSpec(5, 32, 2), ConvSpec(5, 32, 2)),
        enc_dense=(2048, 512),
        dec_dense=(2048,),
        rnn_hidden=layout.n_total,
        dec_grid_channels=16,
    ).validate()


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_encoder(params, arch, rng, dtype):
    cin = 3
    for i, spec in enumerate(arch.conv_specs):
        fan = cin * spec.kernel * spec.kernel
        params[f"enc.conv{i}.w"] = _uniform(rng, (spec.filters, cin, spec.kernel,
                                                  spec.kernel), fan, dtype)
        params[f"enc.conv{i}.b"] = np.zeros(spec.filters, dtype=dtype)
        cin = spec.filters
    width = arch.flat_width
    for i, out in enumerate(arch.enc_dense):
        params[f"enc.fc{i}.w"] = _uniform(rng, (width, out), width, dtype)
        params[f"enc.fc{i}.b"] = np.zeros(out, dtype=dtype)
        width = out
    out = 2 * arch.layout.n_total
    params["enc.out.w"] = _uniform(rng, (width, out), width, dtype)
    params["enc.out.b"] = np.zeros(out, dtype=dtype)


def _init_decoder(params, arch, prefix, in_width, out_channels, rng, dtype):
    width = in_width
    for i, out in enumerate(arch.dec_dense):
        params[f"{prefix}.fc{i}.w"] = _uniform(rng, (width, out), width, dtype)
        params[f"{prefix}.fc{i}.b"] = np.zeros(out, dtype=dtype)
        width = out
    params[f"{prefix}.grid.w"] = _uniform(rng, (width, arch.dec_flat_width), width, dtype)
    params[f"{prefix}.grid.b"] = np.zeros(arch.dec_flat_width, dtype=dtype)
    specs = list(arch.conv_specs)[::-1]
    cin = arch.dec_grid_channels
    for i, spec in enumerate(specs):
        cout = specs[i + 1].filters if i + 1 < len(specs) else out_channels
        fan = cin * spec.kernel * spec.kernel
        params[f"{prefix}.tconv{i}.w"] = _uniform(rng, (cin, cout, spec.kernel,
                                                        spec.kernel), fan, dtype)
        params[f"{prefix}.tconv{i}.b"] = np.zeros(cout, dtype=dtype)
        cin = cout


def _init_gru(params, prefix, in_width, hidden, rng, dtype):
    for gate in ("r", "u", "c"):
        params[f"{prefix}.w{gate}"] = _uniform(rng, (in_width, hidden), in_width, dtype)
        params[f"{prefix}.u{gate}"] = _uniform(rng, (hidden, hidden), hidden, dtype)
        params[f"{prefix}.b{gate}"] = np.zeros(hidden, dtype=dtype)


def init_params(arch, kind, seed, dtype=np.float32):
    """Fresh parameter arrays for one model kind, deterministic in `seed`."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0]))
    params = {}
    n = arch.layout.n_total
    if kind in ("net1", "net2", "net3"):
        _init_encoder(params, arch, rng, dtype)
        _init_decoder(params, arch, "dec_v", n, 3, rng, dtype)
    if kind in ("net2", "net3"):
        _init_decoder(params, arch, "dec_c", arch.layout.n_cars, 1, rng, dtype)
        _init_decoder(params, arch, "dec_l", arch.layout.n_lanes, 1, rng, dtype)
    if kind == "net3":
        h = arch.rnn_hidden
        params["rnn.wx"] = _uniform(rng, (n, h), n, dtype)
        params["rnn.wh"] = _uniform(rng, (h, h), h, dtype)
        params["rnn.bh"] = np.zeros(h, dtype=dtype)
        params["rnn.wo"] = _uniform(rng, (h, n), h, dtype)
        params["rnn.bo"] = np.zeros(n, dtype=dtype)
    if kind == "net4":
        _init_gru(params, "pred.stack0", n, n, rng, dtype)
        _init_gru(params, "pred.stack1", n, n, rng, dtype)
        for k in range(arch.predictor_outputs):
            _init_gru(params, f"pred.par{k}", n, n, rng, dtype)
        params["pred.norm.mean"] = np.zeros(n, dtype=dtype)
        params["pred.norm.scale"] = np.ones(n, dtype=dtype)
    if not params:
        raise UsageError(f"unknown model kind {kind!r}")
    return params


def as_tensors(params, trainable=True):
    """Wrap raw arrays as (optionally tracked) tensors, preserving order."""
    wrapped = {}
    for name, value in params.items():
        trk = trainable and not name.startswith("pred.norm.")
        wrapped[name] = T.Tensor(value, requires_grad=trk)
    return wrapped


def as_arrays(params):
    return {name: t.data for name, t in params.items()}


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def encode(params, arch, x):
    """Image batch (B,3,R,R) -> (mu, log_var), each (B, n_total)."""
    if x.shape[-2:] != (arch.resolution, arch.resolution) or x.shape[-3] != 3:
        raise ShapeError(f"encoder expects (*,3,{arch.resolution},"
                         f"{arch.resolution}), got {x.shape}")
    h = x
    for i, spec in enumerate(arch.conv_specs):
        h = T.conv2d(h, params[f"enc.conv{i}.w"], spec.stride, spec.kernel // 2)
        h = T.relu(T.add_channel_bias(h, params[f"enc.conv{i}.b"]))
    h = T.reshape(h, (h.shape[0], arch.flat_width))
    for i in range(len(arch.enc_dense)):
        h = T.relu(T.dense(h, params[f"enc.fc{i}.w"], params[f"enc.fc{i}.b"]))
    out = T.dense(h, params["enc.out.w"], params["enc.out.b"])
    n = arch.layout.n_total
    return T.narrow(out, 0, n), T.narrow(out, n, 2 * n)


def _decode(params, arch, prefix, z, out_channels):
    h = z
    for i in range(len(arch.dec_dense)):
        h = T.relu(T.dense(h, params[f"{prefix}.fc{i}.w"], params[f"{prefix}.fc{i}.b"]))
    h = T.relu(T.dense(h, params[f"{prefix}.grid.w"], params[f"{prefix}.grid.b"]))
    h = T.reshape(h, (h.shape[0], arch.dec_grid_channels, arch.grid, arch.grid))
    specs = list(arch.conv_specs)[::-1]
    for i, spec in enumerate(specs):
        pad = spec.kernel // 2
        out_pad = spec.stride - 1
        h = T.transpose_conv2d(h, params[f"{prefix}.tconv{i}.w"], spec.stride,
                               pad, out_pad)
        h = T.add_channel_bias(h, params[f"{prefix}.tconv{i}.b"])
        h = T.sigmoid(h) if i == len(specs) - 1 else T.relu(h)
    return h


def decode_visual(params, arch, z):
    """Full latent vector (B, n_total) -> RGB image batch in [0,1]."""
    if z.shape[-1] != arch.layout.n_total:
        raise ShapeError(f"visual decoder expects width {arch.layout.n_total},"
                         f" got {z.shape[-1]}")
    return _decode(params, arch, "dec_v", z, 3)


def decode_concept(params, arch, segment, concept):
    """Concept segment -> probability map batch (B,1,R,R)."""
    expected = arch.layout.n_cars if concept == "cars" else arch.layout.n_lanes
    prefix = "dec_c" if concept == "cars" else "dec_l"
    if concept not in ("cars", "lanes"):
        raise UsageError(f"unknown concept {concept!r}")
    if segment.shape[-1] != expected:
        raise ShapeError(f"{concept} decoder expects width {expected},"
                         f" got {segment.shape[-1]}")
    return _decode(params, arch, prefix, segment, 1)


def binarize(prob_map, threshold=0.5):
    """Threshold a probability map into a 0/1 mask array."""
    data = prob_map.data if isinstance(prob_map, T.Tensor) else np.asarray(prob_map)
    return (data > threshold).astype(np.uint8)


def latent_rnn_step(params, z, z1):
    """Order-2 latent recurrence: two latents in, next-but-one latent out."""
    if z.shape != z1.shape:
        raise ShapeError(f"latent inputs {z.shape} and {z1.shape} do not match")
    wx, wh, bh = params["rnn.wx"], params["rnn.wh"], params["rnn.bh"]
    if z.shape[-1] != wx.shape[0]:
        raise ShapeError(f"latent width {z.shape[-1]} does not match recurrence"
                         f" input {wx.shape[0]}")
    h = T.tanh(T.dense(z, wx, bh))
    h = T.tanh(T.dense(z1, wx, bh) + T.dense(h, wh, T.Tensor(
        np.zeros(wh.shape[1], dtype=wh.dtype))))
    return T.dense(h, params["rnn.wo"], params["rnn.bo"])


def _gru_cell(params, prefix, x, h):
    r = T.sigmoid(T.dense(x, params[f"{prefix}.wr"], params[f"{prefix}.br"])
                  + T.dense(h, params[f"{prefix}.ur"], _zero_bias(params, prefix, "r")))
    u = T.sigmoid(T.dense(x, params[f"{prefix}.wu"], params[f"{prefix}.bu"])
                  + T.dense(h, params[f"{prefix}.uu"], _zero_bias(params, prefix, "u")))
    c = T.tanh(T.dense(x, params[f"{prefix}.wc"], params[f"{prefix}.bc"])
               + T.dense(T.mul(r, h), params[f"{prefix}.uc"], _zero_bias(params, prefix, "c")))
    return u * h + (1.0 - u) * c


def _zero_bias(params, prefix, gate):
    w = params[f"{prefix}.u{gate}"]
    return T.Tensor(np.zeros(w.shape[1], dtype=w.dtype))


def _gru_sequence(params, prefix, xs):
    """Run a GRU over a list of (B,N) steps; returns the output sequence."""
    batch = xs[0].shape[0]
    width = params[f"{prefix}.ur"].shape[1]
    h = T.Tensor(np.zeros((batch, width), dtype=xs[0].dtype))
    outputs = []
    for x in xs:
        h = _gru_cell(params, prefix, x, h)
        outputs.append(h)
    return outputs


def sequence_predict(params, arch, inputs):
    """Predict the next `predictor_outputs` latents from `predictor_inputs`.

    The stacked stage passes its whole output sequence to the next GRU;
    each parallel GRU reads that sequence and keeps only its final state,
    specializing on one prediction horizon. Inputs are standardized by the
    stored dataset statistics so the bounded recurrent state covers the
    latent range, and predictions are mapped back.
    """
    if len(inputs) != arch.predictor_inputs:
        raise UsageError(f"predictor expects exactly {arch.predictor_inputs}"
                         f" input latents, got {len(inputs)}")
    n = arch.layout.n_total
    for z in inputs:
        if z.shape[-1] != n:
            raise ShapeError(f"latent width {z.shape[-1]} does not match layout {n}")
    mean = params["pred.norm.mean"]
    scale = params["pred.norm.scale"]
    xs = [T.mul_const(z - _const_like(mean, z), 1.0 / scale.data) for z in inputs]
    seq = _gru_sequence(params, "pred.stack0", xs)
    seq = _gru_sequence(params, "pred.stack1", seq)
    outputs = []
    for k in range(arch.predictor_outputs):
        last = _gru_sequence(params, f"pred.par{k}", seq)[-1]
        outputs.append(T.mul_const(last, scale.data) + _const_like(mean, last))
    return outputs


def _const_like(param, ref):
    data = param.data if isinstance(param, T.Tensor) else param
    return T.Tensor(np.broadcast_to(data, ref.shape).copy())


def set_predictor_normalization(params, mean, std):
    """Install dataset latent statistics; predictions then span mean +/- 3 std."""
    scale = 3.0 * np.maximum(np.asarray(std), 1e-6)
    mean = np.asarray(mean)
    m, s = params["pred.norm.mean"], params["pred.norm.scale"]
    m_arr = m.data if isinstance(m, T.Tensor) else m
    s_arr = s.data if isinstance(s, T.Tensor) else s
    m_arr[...] = mean.astype(m_arr.dtype)
    s_arr[...] = scale.astype(s_arr.dtype)
