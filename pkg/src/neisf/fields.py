"""Neural implicit fields: geometry, materials, and incident Stokes light.

Six small MLPs over positionally encoded inputs share one autodiff tape:
f_sdf (signed distance, geometric init), f_alb, f_rough, and the three
incident-light heads f_i / f_spec / f_dif.  The incident heads assemble two
partial Stokes vectors that are already rotated into the local BRDF frames:

    s_spec = [f_i, f_spec_0, f_spec_1]      s_dif = [f_i, f_dif, 0]

sharing the intensity head, with the diffuse 45-degree component pinned to
zero since the diffuse Mueller matrix annihilates it anyway.

The spatial gradient of f_sdf is produced by pushing an input Jacobian
through the same tape ops as the values, so the gradient is itself a taped
function of the weights; Eikonal penalties and normal-dependent losses then
backpropagate into the parameters with plain reverse mode.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import formats
from .pbrdf import R_MIN
from .scene import blend_weights, volsdf_density


class EmptyRay(Exception):
    """No queried ray accumulated usable blend weight."""


# -- positional encoding -------------------------------------------------------

def posenc(x, n_freq):
    """[x, sin(2^k x), cos(2^k x)] for k < n_freq, concatenated."""
    feats = [x]
    for k in range(n_freq):
        w = 2.0 ** k
        feats.append(np.sin(w * x))
        feats.append(np.cos(w * x))
    return np.concatenate(feats, axis=-1)


def posenc_dim(d, n_freq):
    return d * (1 + 2 * n_freq)


def posenc_jacobian(x, n_freq):
    """d(posenc)/dx as (N, d, F); each feature depends on one coordinate."""
    n, d = x.shape
    jac = np.zeros((n, d, posenc_dim(d, n_freq)))
    rng_d = np.arange(d)
    jac[:, rng_d, rng_d] = 1.0
    col = d
    for k in range(n_freq):
        w = 2.0 ** k
        jac[:, rng_d, col + rng_d] = w * np.cos(w * x)
        jac[:, rng_d, col + d + rng_d] = -w * np.sin(w * x)
        col += 2 * d
    return jac


# -- multilayer perceptron ----------------------------------------------------------

class Mlp:
    """Fully connected net over positionally encoded inputs.

    in_dims/n_freqs describe the raw inputs; skip layers re-inject the full
    encoding.  activation "softplus" (beta 100, a smooth ReLU stand-in that
    keeps the SDF twice differentiable) or "relu".  geometric_r0 switches on
    sphere initialization: the fresh net starts near d(x) = |x| - r0.
    """

    SOFTPLUS_BETA = 100.0

    def __init__(self, tape, rng, in_dims=(3,), n_freqs=(6,), width=64,
                 hidden=3, out_dim=1, skip=(), activation="relu",
                 geometric_r0=None, dtype=np.float64):
        self.tape = tape
        self.dtype = dtype
        self.in_dims = tuple(in_dims)
        self.n_freqs = tuple(n_freqs)
        self.width = width
        self.hidden = hidden
        self.out_dim = out_dim
        self.skip = tuple(skip)
        self.activation = activation
        self.geometric_r0 = geometric_r0
        self.enc_dim = sum(posenc_dim(d, f) for d, f in zip(in_dims, n_freqs))
        sizes = [self.enc_dim] + [width] * hidden + [out_dim]
        self.weights = []
        self.biases = []
        for i in range(len(sizes) - 1):
            fan_in = sizes[i] + (self.enc_dim if i in self.skip else 0)
            fan_out = sizes[i + 1]
            last = i == len(sizes) - 2
            w, b = self._init_layer(rng, i, fan_in, fan_out, last)
            self.weights.append(tape.var(w.astype(dtype)))
            self.biases.append(tape.var(b.astype(dtype)))

    def _init_layer(self, rng, i, fan_in, fan_out, last):
        if self.geometric_r0 is None:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            return w, np.zeros(fan_out)
        if last:
            w = np.full((fan_in, fan_out), np.sqrt(np.pi / fan_in))
            w += rng.normal(0.0, 1e-4, size=w.shape)
            return w, np.full(fan_out, -self.geometric_r0)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_out), size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        if i == 0:
            w[self.in_dims[0]:, :] = 0.0       # start radially symmetric
        elif i in self.skip:
            w[-self.enc_dim:, :] = 0.0         # ignore re-injected encoding
        return w, b

    def _encode(self, xs):
        return np.concatenate([posenc(np.asarray(x, dtype=self.dtype), f)
                               for x, f in zip(xs, self.n_freqs)], axis=-1)

    def _encode_jacobian(self, xs):
        """Jacobian of the concatenated encoding w.r.t. the FIRST input."""
        x0 = np.asarray(xs[0], dtype=self.dtype)
        j0 = posenc_jacobian(x0, self.n_freqs[0]).astype(self.dtype)
        pad = self.enc_dim - j0.shape[-1]
        if pad:
            j0 = np.concatenate(
                [j0, np.zeros(j0.shape[:2] + (pad,), dtype=self.dtype)], axis=-1)
        return j0

    def _act(self, z):
        if self.activation == "softplus":
            return ad.softplus(z, beta=self.SOFTPLUS_BETA)
        return ad.relu(z)

    def _act_deriv(self, z):
        if self.activation == "softplus":
            return ad.sigmoid(z * self.SOFTPLUS_BETA)
        return self.tape.const((z.data > 0.0).astype(np.float64))

    def forward(self, xs, with_jacobian=False, enc=None):
        """Taped forward; returns (N, out) Var, plus d(out)/d(xs[0]) as an
        (N, d0, out) Var when with_jacobian is set.  A precomputed encoding
        may be passed to share work between nets with identical inputs."""
        if enc is None:
            enc = self._encode(xs)
        h = self.tape.const(enc)
        h0 = h
        jh = j0 = None
        if with_jacobian:
            j0 = self.tape.const(self._encode_jacobian(xs))
            jh = j0
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i in self.skip:
                h = ad.concat([h, h0], axis=-1)
                if with_jacobian:
                    jh = ad.concat([jh, j0], axis=-1)
            z = ad.matmul(h, w) + b
            if with_jacobian:
                jz = ad.matmul(jh, w)
            if i < n_layers - 1:
                h = self._act(z)
                if with_jacobian:
                    da = self._act_deriv(z)
                    jh = jz * ad.reshape(da, (da.data.shape[0], 1, da.data.shape[1]))
            else:
                h = z
                if with_jacobian:
                    jh = jz
        if with_jacobian:
            return h, jh
        return h

    def forward_numpy(self, xs):
        """Detached forward on raw weights; used for coarse sample placement."""
        h = self._encode(xs)
        h0 = h
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i in self.skip:
                h = np.concatenate([h, h0], axis=-1)
            z = h @ w.data + b.data
            if i < n_layers - 1:
                if self.activation == "softplus":
                    bz = np.clip(self.SOFTPLUS_BETA * z, -500.0, 500.0)
                    h = np.logaddexp(0.0, bz) / self.SOFTPLUS_BETA
                else:
                    h = np.maximum(z, 0.0)
            else:
                h = z
        return h

    def param_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


# -- the bundle -------------------------------------------------------------------

class FieldBundle:
    """The learned side of the pipeline: six nets plus volume parameters.

    Queries are taken in world coordinates and shifted by the domain center
    so the geometric initialization surrounds the reconstruction targets.
    """

    def __init__(self, tape, seed=0, center=(0.0, -0.5, 0.0), radius=1.1,
                 r0=0.45, sdf_width=64, sdf_hidden=4, sdf_skip=(2,),
                 width=64, hidden=3, n_freq_x=6, n_freq_dir=4,
                 dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.tape = tape
        self.dtype = dtype
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.config = {"seed": seed, "r0": r0, "radius": radius,
                       "sdf_width": sdf_width, "sdf_hidden": sdf_hidden,
                       "width": width, "hidden": hidden,
                       "n_freq_x": n_freq_x, "n_freq_dir": n_freq_dir}
        self.f_sdf = Mlp(tape, rng, (3,), (n_freq_x,), sdf_width, sdf_hidden, 1,
                         skip=sdf_skip, activation="softplus", geometric_r0=r0,
                         dtype=dtype)
        self.f_alb = Mlp(tape, rng, (3,), (n_freq_x,), width, hidden, 3, dtype=dtype)
        self.f_rough = Mlp(tape, rng, (3,), (n_freq_x,), width, hidden, 1, dtype=dtype)
        dir_in = ((3, 3), (n_freq_x, n_freq_dir))
        self.f_i = Mlp(tape, rng, *dir_in, width, hidden, 3, dtype=dtype)
        self.f_spec = Mlp(tape, rng, *dir_in, width, hidden, 6, dtype=dtype)
        self.f_dif = Mlp(tape, rng, *dir_in, width, hidden, 3, dtype=dtype)
        self.alpha = tape.var(np.asarray(1.0, dtype=dtype))
        self.beta = tape.var(np.asarray(0.1, dtype=dtype))

    NET_NAMES = ("f_sdf", "f_alb", "f_rough", "f_i", "f_spec", "f_dif")

    def nets(self):
        return {name: getattr(self, name) for name in self.NET_NAMES}

    def parameters(self):
        params = []
        for net in self.nets().values():
            params.extend(net.param_arrays())
        params.append(self.alpha)
        params.append(self.beta)
        return params

    # geometry -----------------------------------------------------------

    def sdf(self, x, with_grad=False):
        xc = np.atleast_2d(x) - self.center
        if with_grad:
            y, jac = self.f_sdf.forward((xc,), with_jacobian=True)
            d = ad.reshape(y, (y.data.shape[0],))
            grad = ad.reshape(jac, (jac.data.shape[0], 3))
            return d, grad
        y = self.f_sdf.forward((xc,))
        return ad.reshape(y, (y.data.shape[0],))

    def sdf_numpy(self, x):
        xc = np.atleast_2d(x) - self.center
        return self.f_sdf.forward_numpy((xc,))[:, 0]

    # materials ----------------------------------------------------------

    def material_encoding(self, x):
        xc = np.atleast_2d(x) - self.center
        return self.f_alb._encode((xc,))

    def albedo(self, x, enc=None):
        xc = np.atleast_2d(x) - self.center
        return ad.sigmoid(self.f_alb.forward((xc,), enc=enc))

    def roughness(self, x, enc=None):
        xc = np.atleast_2d(x) - self.center
        r = ad.sigmoid(self.f_rough.forward((xc,), enc=enc))
        r = ad.reshape(r, (r.data.shape[0],))
        return R_MIN + (1.0 - R_MIN) * r

    # incident Stokes ------------------------------------------------------

    def incident(self, x, wi):
        """Already-rotated partial incident Stokes at (x, wi).

        Returns (s_dif, s_spec), each (N, 3 stokes, 3 rgb) on the tape.
        A shared softplus intensity head gives both their s0; the linear
        components are tanh-bounded multiples of it so DoLP stays below 1
        (radially for the specular pair, so s1^2 + s2^2 <= s0^2).
        """
        xc = np.atleast_2d(x) - self.center
        wi = np.atleast_2d(wi)
        enc = self.f_i._encode((xc, wi))
        s0 = ad.softplus(self.f_i.forward((xc, wi), enc=enc))
        raw_spec = self.f_spec.forward((xc, wi), enc=enc)
        r1, r2 = raw_spec[:, 0:3], raw_spec[:, 3:6]
        mag = ad.sqrt(r1 * r1 + r2 * r2 + 1e-12)
        shrink = ad.tanh(mag) / mag
        spec1 = r1 * shrink * s0
        spec2 = r2 * shrink * s0
        dif1 = ad.tanh(self.f_dif.forward((xc, wi), enc=enc)) * s0
        zero = self.tape.const(np.zeros_like(s0.data))
        s_dif = ad.stack([s0, dif1, zero], axis=1)
        s_spec = ad.stack([s0, spec1, spec2], axis=1)
        return s_dif, s_spec

    def incident_intensity(self, x, wi):
        """s0 head alone: the intensity-only field of the no-pol ablation."""
        xc = np.atleast_2d(x) - self.center
        wi = np.atleast_2d(wi)
        return ad.softplus(self.f_i.forward((xc, wi)))

    # persistence ----------------------------------------------------------

    def save(self, path, extra_scalars=None):
        scalars = dict(self.config)
        scalars["alpha"] = float(self.alpha.data)
        scalars["beta"] = float(self.beta.data)
        if extra_scalars:
            scalars.update(extra_scalars)
        networks = {name: [p.data for p in net.param_arrays()]
                    for name, net in self.nets().items()}
        networks["domain"] = [self.center]
        formats.save_checkpoint(path, scalars, networks)

    @classmethod
    def load(cls, path, tape=None, dtype=np.float64):
        scalars, networks = formats.load_checkpoint(path)
        tape = tape if tape is not None else ad.Tape()
        bundle = cls(tape,
                     seed=int(scalars["seed"]),
                     center=networks["domain"][0].astype(np.float64),
                     radius=scalars["radius"], r0=scalars["r0"],
                     sdf_width=int(scalars["sdf_width"]),
                     sdf_hidden=int(scalars["sdf_hidden"]),
                     width=int(scalars["width"]), hidden=int(scalars["hidden"]),
                     n_freq_x=int(scalars["n_freq_x"]),
                     n_freq_dir=int(scalars["n_freq_dir"]),
                     dtype=dtype)
        for name, net in bundle.nets().items():
            stored = networks[name]
            params = net.param_arrays()
            if len(stored) != len(params):
                raise formats.FormatError(f"layer count mismatch for {name}")
            for p, a in zip(params, stored):
                p.data = a.astype(bundle.dtype).reshape(p.data.shape)
        bundle.alpha.data = np.asarray(scalars["alpha"], dtype=bundle.dtype)
        bundle.beta.data = np.asarray(scalars["beta"], dtype=bundle.dtype)
        return bundle, scalars


# -- spec-level ops ---------------------------------------------------------------

def field_sdf(bundle, x):
    """Signed distance and its spatial gradient, both on the tape."""
    return bundle.sdf(x, with_grad=True)


def field_incident(bundle, x, wi):
    return bundle.incident(x, wi)


class AggregateResult:
    """Per-ray alpha-blended surface quantities from volume sampling."""

    __slots__ = ("x_surf", "normal", "albedo", "roughness", "weights",
                 "w_sum", "background", "t", "sdf", "sdf_grad", "valid")

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw[k])


def _ray_sphere_span(origins, dirs, center, radius):
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    disc = b * b - (np.sum(oc * oc, axis=-1) - radius * radius)
    ok = disc > 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    near = np.maximum(-b - root, 1e-3)
    far = -b + root
    ok &= far > near
    return near, far, ok


def volume_aggregate(bundle, origins, dirs, rng=None, n_coarse=64, n_fine=16):
    """Sample f_sdf along rays and alpha-blend surface quantities.

    Coarse stratified samples span the domain sphere; a detached pass places
    extra samples around the first outside-to-inside crossing.  Raises
    EmptyRay when no ray reaches 1e-3 total weight (all background).  The
    blended x_surf is detached: incident and material fields treat positions
    as data, gradients flow through weights, densities, and normals.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    near, far, ok = _ray_sphere_span(origins, dirs, bundle.center, bundle.radius)
    near = np.where(ok, near, 1e-3)
    far = np.where(ok, far, near + 1e-2)

    ks = np.arange(n_coarse)
    uc = rng.random((n, n_coarse)) if rng is not None else 0.5
    t_c = near[:, None] + (far - near)[:, None] * (ks + uc) / n_coarse

    x_c = origins[:, None] + t_c[..., None] * dirs[:, None]
    d_c = bundle.sdf_numpy(x_c.reshape(-1, 3)).reshape(n, n_coarse)
    crossing = (d_c[:, :-1] > 0.0) & (d_c[:, 1:] <= 0.0)
    has_cross = crossing.any(axis=1)
    first = np.where(has_cross, crossing.argmax(axis=1), np.abs(d_c).argmin(axis=1))
    lo = t_c[np.arange(n), np.maximum(first - 1, 0)]
    hi = t_c[np.arange(n), np.minimum(first + 1, n_coarse - 1)]
    uf = rng.random((n, n_fine)) if rng is not None else 0.5
    t_f = lo[:, None] + (hi - lo)[:, None] * (np.arange(n_fine) + uf) / n_fine

    t = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    m = t.shape[1]
    x = origins[:, None] + t[..., None] * dirs[:, None]
    x_flat = x.reshape(-1, 3)

    d_var, grad = bundle.sdf(x_flat, with_grad=True)
    d = ad.reshape(d_var, (n, m))
    sigma = volsdf_density(d, bundle.alpha, ad.maximum(bundle.beta, 1e-3))
    delta = np.concatenate([t[:, 1:] - t[:, :-1],
                            np.maximum(far[:, None] - t[:, -1:], 1e-4)], axis=1)
    w, bg = blend_weights(sigma, bundle.tape.const(delta.astype(bundle.dtype)))
    w_sum = ad.sum_(w, axis=-1)
    valid = ok & (w_sum.data >= 1e-3)
    if not np.any(valid):
        raise EmptyRay("no ray accumulated usable blend weight")

    denom = ad.reshape(ad.maximum(w_sum, 1e-12), (n, 1))
    wn = w / denom
    x_surf = np.sum(wn.data[..., None] * x, axis=1)

    g = ad.reshape(grad, (n, m, 3))
    g_norm = ad.sqrt(ad.sum_(g * g, axis=-1, keepdims=True) + 1e-12)
    n_k = g / g_norm
    wn3 = ad.reshape(wn, (n, m, 1))
    n_blend = ad.sum_(wn3 * n_k, axis=1)
    n_len = ad.sqrt(ad.sum_(n_blend * n_blend, axis=-1, keepdims=True) + 1e-12)
    normal = n_blend / n_len

    enc_mat = bundle.material_encoding(x_flat)
    alb = ad.reshape(bundle.albedo(x_flat, enc=enc_mat), (n, m, 3))
    albedo = ad.sum_(wn3 * alb, axis=1)
    rough = ad.reshape(bundle.roughness(x_flat, enc=enc_mat), (n, m))
    roughness = ad.sum_(wn * rough, axis=1)

    return AggregateResult(x_surf=x_surf, normal=normal, albedo=albedo,
                           roughness=roughness, weights=w, w_sum=w_sum,
                           background=bg, t=t, sdf=d, sdf_grad=g, valid=valid)
