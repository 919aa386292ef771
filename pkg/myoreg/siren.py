"""
Sinusoidal MLP for the displacement field u(x), with its derivatives.

Every hidden layer computes h = sin(omega * (W h_prev + b)); the output layer is
affine and zero-initialized so a fresh model is the identity map. Besides the
usual activation path, the forward pass can carry the three spatial tangents
dh/dx through every layer, giving the Jacobian of Phi(x) = x + u(x). The
backward pass then differentiates through both paths, so losses on the
Jacobian (the folding penalty) get exact parameter gradients.

Tangents are stored tangent-major, shape (n, 3, width): T[n, k, j] = dh_j/dx_k.
"""

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import NonFiniteGradientError, ShapeMismatchError

INPUT_DIM = 3
OUTPUT_DIM = 3


@dataclass
class SirenModel:
    """Layer weights (out, in) and biases; the last pair is the affine output layer."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    omega: float = 30.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise ShapeMismatchError("a SIREN needs at least one hidden and one output layer")
        fan_in = INPUT_DIM
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != fan_in or b.shape != (w.shape[0],):
                raise ShapeMismatchError(
                    f"layer shapes do not chain: weight {w.shape}, bias {b.shape}, fan-in {fan_in}"
                )
            fan_in = w.shape[0]
        if fan_in != OUTPUT_DIM:
            raise ShapeMismatchError(f"output layer must have {OUTPUT_DIM} units, got {fan_in}")

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [INPUT_DIM] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def parameters(self) -> List[np.ndarray]:
        """Flat parameter list [W1, b1, ..., Wout, bout]; arrays are shared, not copied."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self, dtype=None) -> "SirenModel":
        dtype = dtype or self.dtype
        return SirenModel(
            weights=[w.astype(dtype, copy=True) for w in self.weights],
            biases=[b.astype(dtype, copy=True) for b in self.biases],
            omega=self.omega,
        )

    def fingerprint(self) -> str:
        """Stable hash of the parameters (as little-endian float64) and omega."""
        digest = hashlib.sha256()
        digest.update(np.float64(self.omega).tobytes())
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def displace(self, xs: np.ndarray) -> np.ndarray:
        """u(x) without keeping a tape."""
        u, _ = forward(self, xs)
        return u

    def jacobian(self, xs: np.ndarray) -> np.ndarray:
        """Jacobian of Phi at xs, (n, 3, 3), normalized units."""
        _, tape = forward(self, xs)
        return spatial_jacobian(self, xs, tape)


@dataclass
class BatchTape:
    """Per-batch values the reverse pass needs; produced by forward/spatial_jacobian."""

    inputs: np.ndarray
    activations: List[np.ndarray]
    cosines: List[np.ndarray]
    tangents: Optional[List[np.ndarray]] = None
    pre_tangents: Optional[List[np.ndarray]] = None


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_parameters(cls, params: List[np.ndarray], learning_rate: float, **kwargs) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kwargs,
        )


def init(
    seed: int,
    hidden_layers: int = 5,
    width: int = 256,
    omega: float = 30.0,
    dtype=np.float64,
) -> SirenModel:
    """Identity-start SIREN, deterministic in seed.

    First layer weights ~ U(-1/3, 1/3); hidden weights ~ U(+-sqrt(6/width)/omega);
    biases ~ U(+-1/sqrt(fan_in)); output layer all zeros.
    """
    if hidden_layers < 1 or width < 1:
        raise ShapeMismatchError(f"need hidden_layers >= 1 and width >= 1, got {hidden_layers}, {width}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = INPUT_DIM
    for layer in range(hidden_layers):
        if layer == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / omega
        weights.append(rng.uniform(-bound, bound, size=(width, fan_in)).astype(dtype))
        bias_bound = 1.0 / np.sqrt(fan_in)
        biases.append(rng.uniform(-bias_bound, bias_bound, size=width).astype(dtype))
        fan_in = width
    weights.append(np.zeros((OUTPUT_DIM, width), dtype=dtype))
    biases.append(np.zeros(OUTPUT_DIM, dtype=dtype))
    return SirenModel(weights=weights, biases=biases, omega=float(omega))


def forward(model: SirenModel, xs: np.ndarray) -> Tuple[np.ndarray, BatchTape]:
    """Displacements u(x) for a batch of normalized points, plus the tape."""
    x = np.asarray(xs, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != INPUT_DIM:
        raise ShapeMismatchError(f"expected points of shape (n, 3), got {x.shape}")
    activations = [x]
    cosines = []
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = model.omega * (h @ w.T + b)
        h = np.sin(a)
        activations.append(h)
        cosines.append(np.cos(a))
    u = h @ model.weights[-1].T + model.biases[-1]
    return u, BatchTape(inputs=x, activations=activations, cosines=cosines)


def spatial_jacobian(model: SirenModel, xs: np.ndarray, tape: BatchTape) -> np.ndarray:
    """Forward-mode Jacobian of Phi = x + u at every tape point, (n, 3, 3).

    Rows index the output component, columns the input coordinate. The tangent
    trajectories are recorded on the tape for the mixed reverse pass.
    """
    n = tape.inputs.shape[0]
    if np.shape(xs)[0] != n:
        raise ShapeMismatchError(f"tape holds {n} points, got {np.shape(xs)[0]}")
    tangents = []
    pre_tangents = []
    eye = np.eye(INPUT_DIM, dtype=model.dtype)
    tangent = None
    for layer, (w, c) in enumerate(zip(model.weights[:-1], tape.cosines)):
        if layer == 0:
            # dz/dx of the first layer is W itself
            pre = np.broadcast_to(w.T[None, :, :], (n, INPUT_DIM, w.shape[0]))
        else:
            pre = tangent @ w.T
        tangent = model.omega * c[:, None, :] * pre
        pre_tangents.append(pre)
        tangents.append(tangent)
    tape.pre_tangents = pre_tangents
    tape.tangents = tangents
    du_dx = tangent @ model.weights[-1].T
    return eye[None, :, :] + np.transpose(du_dx, (0, 2, 1))


def backward(
    model: SirenModel,
    tape: BatchTape,
    dl_du: np.ndarray,
    dl_dj: Optional[np.ndarray] = None,
) -> List[np.ndarray]:
    """Parameter gradients, summed over the batch, in parameters() order.

    dl_du is (n, 3). dl_dj is (n, 3, 3) in the Jacobian layout returned by
    spatial_jacobian, and requires that spatial_jacobian ran on this tape.
    """
    n = tape.inputs.shape[0]
    dtype = model.dtype
    gu = np.asarray(dl_du, dtype=dtype)
    if gu.shape != (n, OUTPUT_DIM):
        raise ShapeMismatchError(f"dL/du must have shape ({n}, 3), got {gu.shape}")
    use_tangents = dl_dj is not None
    if use_tangents:
        gj = np.asarray(dl_dj, dtype=dtype)
        if gj.shape != (n, OUTPUT_DIM, INPUT_DIM):
            raise ShapeMismatchError(f"dL/dJ must have shape ({n}, 3, 3), got {gj.shape}")
        if tape.tangents is None:
            raise ShapeMismatchError("dL/dJ given but spatial_jacobian was not run on this tape")
        # tangent-major layout: gd[n, k, o] = dL/d(du_o/dx_k)
        gd = np.transpose(gj, (0, 2, 1))

    hidden = model.hidden_layers
    grads_w: List[np.ndarray] = [None] * (hidden + 1)
    grads_b: List[np.ndarray] = [None] * (hidden + 1)

    w_out = model.weights[-1]
    h_last = tape.activations[-1]
    grads_w[-1] = gu.T @ h_last
    grads_b[-1] = gu.sum(axis=0)
    gh = gu @ w_out
    gt = None
    if use_tangents:
        t_last = tape.tangents[-1]
        grads_w[-1] = grads_w[-1] + gd.reshape(-1, OUTPUT_DIM).T @ t_last.reshape(-1, t_last.shape[-1])
        gt = gd @ w_out

    for layer in range(hidden - 1, -1, -1):
        w = model.weights[layer]
        c = tape.cosines[layer]
        s = tape.activations[layer + 1]
        h_prev = tape.activations[layer]
        ga = gh * c
        if use_tangents:
            pre = tape.pre_tangents[layer]
            # T = omega * cos(a) * P: split the cotangent between cos(a) and P
            g_cos = model.omega * np.einsum("nkj,nkj->nj", gt, pre)
            gp = model.omega * c[:, None, :] * gt
            ga = ga - g_cos * s
        gz = model.omega * ga
        grads_w[layer] = gz.T @ h_prev
        grads_b[layer] = gz.sum(axis=0)
        if use_tangents:
            if layer == 0:
                grads_w[layer] = grads_w[layer] + gp.sum(axis=0).T
            else:
                t_prev = tape.tangents[layer - 1]
                grads_w[layer] = grads_w[layer] + gp.reshape(-1, w.shape[0]).T @ t_prev.reshape(
                    -1, w.shape[1]
                )
        if layer > 0:
            gh = gz @ w
            if use_tangents:
                gt = gp @ w

    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.extend([gw, gb])
    return grads


def adam_step(
    state: AdamState, params: List[np.ndarray], grads: List[np.ndarray]
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Raises NonFiniteGradientError before touching anything if a gradient is
    NaN or infinite.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeMismatchError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError()
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state
