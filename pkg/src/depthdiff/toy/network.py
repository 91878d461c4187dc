"""A small convolutional denoiser with analytic gradients.

The network sees ``cat(noisy_latent, conditioning)`` and runs
``hidden_layers`` 3x3 convolutions of ``width`` channels, each followed by a
per-channel timestep-embedding bias and a SiLU, and a final 3x3 convolution
back to ``latent_channels``. All parameters live in one flat ``float64``
vector; :meth:`ToyArchitecture.layout` maps names to slices of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..schedule import Parameterization

MAX_PARAMS = 100_000
MAX_PERIOD = 1000.0


@dataclass(frozen=True)
class ToyArchitecture:
    latent_channels: int = 1
    cond_channels: int = 3
    width: int = 32
    hidden_layers: int = 3
    emb_dim: int = 16

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cond_channels

    def layout(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        c_in = self.in_channels
        for k in range(self.hidden_layers):
            shapes.append((f"conv{k}.w", (9 * c_in, self.width)))
            shapes.append((f"conv{k}.b", (self.width,)))
            shapes.append((f"temb{k}.w", (self.emb_dim, self.width)))
            c_in = self.width
        shapes.append(("out.w", (9 * c_in, self.latent_channels)))
        shapes.append(("out.b", (self.latent_channels,)))
        offsets = {}
        pos = 0
        for name, shape in shapes:
            offsets[name] = (pos, shape)
            pos += int(np.prod(shape))
        return offsets

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout().values())

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        params = np.zeros(self.n_params)
        for name, (pos, shape) in self.layout().items():
            n = int(np.prod(shape))
            if name.endswith(".b"):
                continue
            fan_in = shape[0]
            gain = 0.1 if name.startswith("out") else 1.0
            params[pos : pos + n] = rng.standard_normal(n) * gain / np.sqrt(fan_in)
        return params


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features ``(B, dim)`` of integer timesteps."""
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (B, H, W, C) -> (B, H, W, 9*C), zero padding, taps ordered (kh, kw, C)
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2, w + 2, c))
    padded[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 3, 3, c))
    for kh in range(3):
        for kw in range(3):
            cols[:, :, :, kh, kw] = padded[:, kh : kh + h, kw : kw + w]
    return cols.reshape(b, h, w, 9 * c)


def _col2im(dcols: np.ndarray, c: int) -> np.ndarray:
    b, h, w, _ = dcols.shape
    d = dcols.reshape(b, h, w, 3, 3, c)
    dpad = np.zeros((b, h + 2, w + 2, c))
    for kh in range(3):
        for kw in range(3):
            dpad[:, kh : kh + h, kw : kw + w] += d[:, :, :, kh, kw]
    return dpad[:, 1:-1, 1:-1]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class ToyDenoiser:
    arch: ToyArchitecture
    params: np.ndarray
    parameterization: Parameterization = Parameterization.V
    loss_trace: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.parameterization = Parameterization(self.parameterization)
        if self.params.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.params.shape}")
        if self.arch.n_params > MAX_PARAMS:
            raise ValueError("toy denoiser exceeds the parameter budget")

    @classmethod
    def create(cls, arch: ToyArchitecture, seed: int, parameterization="v") -> "ToyDenoiser":
        return cls(arch, arch.init_params(seed), Parameterization(parameterization))

    @property
    def latent_channels(self) -> int:
        return self.arch.latent_channels

    @property
    def cond_channels(self) -> int:
        return self.arch.cond_channels

    def copy(self, params: np.ndarray | None = None) -> "ToyDenoiser":
        return replace(self, params=(self.params if params is None else params).copy(), loss_trace=[])

    def unpack(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        p = self.params if params is None else params
        return {name: p[pos : pos + int(np.prod(shape))].reshape(shape)
                for name, (pos, shape) in self.arch.layout().items()}

    def apply(self, params: np.ndarray, noisy: np.ndarray, cond: np.ndarray, t) -> tuple[np.ndarray, dict]:
        """Batched forward pass on ``(B, C, H, W)`` inputs; returns output and backward cache."""
        w = self.unpack(params)
        t = np.broadcast_to(np.asarray(t), (noisy.shape[0],))
        x = np.concatenate([noisy, cond], axis=1).transpose(0, 2, 3, 1)
        emb = timestep_embedding(t, self.arch.emb_dim)
        cache = {"emb": emb, "layers": []}
        for k in range(self.arch.hidden_layers):
            cols = _im2col(x)
            z = cols @ w[f"conv{k}.w"] + w[f"conv{k}.b"] + (emb @ w[f"temb{k}.w"])[:, None, None, :]
            s = _sigmoid(z)
            cache["layers"].append((cols, x.shape[-1], z, s))
            x = z * s
        cols = _im2col(x)
        cache["out_cols"] = (cols, x.shape[-1])
        out = cols @ w["out.w"] + w["out.b"]
        return out.transpose(0, 3, 1, 2), cache

    def backward(self, params: np.ndarray, cache: dict, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(grad_out * output)`` with respect to the flat parameters."""
        w = self.unpack(params)
        grads = np.zeros_like(params)
        g = self.unpack(grads)
        dy = grad_out.transpose(0, 2, 3, 1)
        cols, c_in = cache["out_cols"]
        g["out.w"][...] = cols.reshape(-1, cols.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
        g["out.b"][...] = dy.sum(axis=(0, 1, 2))
        dx = _col2im(dy @ w["out.w"].T, c_in)
        emb = cache["emb"]
        for k in reversed(range(self.arch.hidden_layers)):
            cols, c_in, z, s = cache["layers"][k]
            dz = dx * s * (1.0 + z * (1.0 - s))
            dz2 = dz.reshape(-1, dz.shape[-1])
            g[f"conv{k}.w"][...] = cols.reshape(-1, cols.shape[-1]).T @ dz2
            g[f"conv{k}.b"][...] = dz2.sum(axis=0)
            g[f"temb{k}.w"][...] = emb.T @ dz.sum(axis=(1, 2))
            if k > 0:
                dx = _col2im(dz @ w[f"conv{k}.w"].T, c_in)
        return grads

    def predict(self, noisy: np.ndarray, cond: np.ndarray, t, params: np.ndarray | None = None) -> np.ndarray:
        out, _ = self.apply(self.params if params is None else params, noisy, cond, t)
        return out

    def __call__(self, noisy: np.ndarray, cond: np.ndarray, t: int) -> np.ndarray:
        return self.predict(noisy[None], cond[None], np.array([t]))[0]


def widen_input(denoiser: ToyDenoiser) -> ToyDenoiser:
    """Double the input layer by duplicating its weights at half magnitude.

    The widened network sees ``cat(x, x')`` where ``x`` is the original input;
    feeding ``x' == x`` reproduces the original first-layer activations.
    """
    arch = denoiser.arch
    new_arch = replace(arch, cond_channels=arch.cond_channels + arch.in_channels)
    new = ToyDenoiser(new_arch, np.zeros(new_arch.n_params), denoiser.parameterization)
    old_w = denoiser.unpack()
    new_w = new.unpack()
    for name, value in old_w.items():
        if name == "conv0.w":
            # rows are (kh, kw, channel) taps; the appended copy of the
            # original (latent, cond) input follows the original cond block
            per_tap = (value / 2.0).reshape(9, arch.in_channels, arch.width)
            widened = np.concatenate([per_tap, per_tap], axis=1)
            new_w[name][...] = widened.reshape(-1, arch.width)
        else:
            new_w[name][...] = value
    return new
