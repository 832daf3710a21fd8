"""Three-stage optimization, evaluation metrics, and the dataset loader.

Stage 1 bootstraps geometry from s0 intensity with a throwaway radiance head
(volume-blended per sample, VolSDF style) plus mask and Eikonal terms.  Stage
2 freezes the signed distance field and fits materials and the incident
Stokes fields against an L1 loss on full Stokes vectors (s0 only for the
no-pol ablation).  Stage 3 unfreezes everything with a reduced geometry
learning rate and keeps the Eikonal regularizer.

The blend sharpness is tied to its support width (alpha = 1/beta, beta
floored at 1e-3): a free alpha lets the opacity stay mushy while beta shrinks
and the blended surface sinks into the interior.
"""

import dataclasses
import json
import os
import time

import numpy as np

from . import autodiff as ad
from . import formats, ops
from .camera import measurement_frame, pixel_rays
from .fields import AggregateResult, EmptyRay, FieldBundle, Mlp, volume_aggregate
from .renderer import (N_QUAD_EVAL, N_QUAD_TRAIN, render_bundle_view,
                       shade_pixel, shade_pixel_nopol)


class NanError(RuntimeError):
    """Loss or image went non-finite; carries the offending batch indices."""

    def __init__(self, message, batch_indices=None):
        super().__init__(message)
        self.batch_indices = [] if batch_indices is None else list(map(int, batch_indices))


@dataclasses.dataclass
class TrainConfig:
    stage_iters: tuple = (2000, 4000, 4000)
    batch: int = 512
    lr: float = 5e-4
    lr_sdf_stage3: float = 1e-4
    eik_weight: float = 0.1
    mask_weight: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ablation: str = "pol"            # "pol" | "nopol"
    n_quad: int = N_QUAD_TRAIN
    n_quad_eval: int = N_QUAD_EVAL
    eik_samples: int = 256
    log_every: int = 25

    def __post_init__(self):
        if len(self.stage_iters) != 3 or any(int(k) <= 0 for k in self.stage_iters):
            raise ValueError("stage_iters must be three positive counts")
        for name in ("batch", "eik_samples"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "lr_sdf_stage3", "eik_weight", "mask_weight",
                     "beta1", "beta2", "eps"):
            if float(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.ablation not in ("pol", "nopol"):
            raise ValueError("ablation must be 'pol' or 'nopol'")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown config keys: {sorted(bad)}")
        d = dict(d)
        if "stage_iters" in d:
            d["stage_iters"] = tuple(int(k) for k in d["stage_iters"])
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stage_iters"] = list(self.stage_iters)
        return d


# -- dataset ------------------------------------------------------------------


class Dataset:
    """A rendered dataset directory: poses, Stokes images, masks, GT AOVs."""

    AOVS = ("normal", "albedo", "roughness", "diffuse", "specular")

    def __init__(self, root):
        self.root = root
        with open(os.path.join(root, "dataset.json")) as f:
            self.meta = json.load(f)
        poses = formats.load_poses(os.path.join(root, "poses.json"))
        self.poses = {p.view: p for p in poses}
        self.train_views = list(self.meta["train_views"])
        self.test_views = list(self.meta["test_views"])
        self._cache = {}

    def stokes(self, view):
        return self._load(("stokes", view),
                          lambda: formats.read_pstk(self._p(f"view_{view:04d}.pstk")))

    def mask(self, view):
        return self._load(("mask", view),
                          lambda: formats.read_pfm(self._p(f"{view:04d}_mask.pfm")))

    def aov(self, view, name):
        if name not in self.AOVS:
            raise KeyError(name)
        return self._load((name, view),
                          lambda: formats.read_pfm(self._p(f"{view:04d}_{name}.pfm")))

    def has_aov(self, view, name):
        return os.path.exists(self._p(f"{view:04d}_{name}.pfm"))

    def _p(self, name):
        return os.path.join(self.root, name)

    def _load(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def ray_table(self, views):
        """Flattened per-pixel training arrays over the given views."""
        o_all, d_all, x_all, s_all, m_all = [], [], [], [], []
        for v in views:
            pose = self.poses[v]
            o, d = pixel_rays(pose)
            frame = measurement_frame(pose, d)
            o_all.append(o)
            d_all.append(d)
            x_all.append(frame.x_axis)
            s_all.append(self.stokes(v).reshape(-1, 3, 3))
            m_all.append(self.mask(v).reshape(-1))
        return {"origins": np.concatenate(o_all), "dirs": np.concatenate(d_all),
                "x_cam": np.concatenate(x_all), "stokes": np.concatenate(s_all),
                "mask": np.concatenate(m_all) > 0.5}


# -- optimizer -----------------------------------------------------------------


class Adam:
    """First/second-moment optimizer over (params, lr) groups of tape Vars."""

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in ps] for ps, _ in self.groups]
        self.v = [[np.zeros_like(p.data) for p in ps] for ps, _ in self.groups]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for gi, (ps, lr) in enumerate(self.groups):
            for pi, p in enumerate(ps):
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data = p.data - lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _tie_blend_sharpness(bundle):
    bundle.beta.data = np.maximum(bundle.beta.data, 1e-3)
    bundle.alpha.data = 1.0 / bundle.beta.data


def _check_finite(loss, batch_idx, stage):
    if not np.isfinite(loss):
        raise NanError(f"non-finite loss in stage {stage}", batch_idx)


def _eikonal(bundle, rng, n_uniform, x_near=None):
    """E[(|grad f_sdf| - 1)^2] over uniform domain points plus jittered
    near-surface points from the current batch."""
    v = rng.normal(size=(n_uniform, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = bundle.radius * rng.random(n_uniform) ** (1.0 / 3.0)
    pts = bundle.center + v * r[:, None]
    if x_near is not None and x_near.shape[0]:
        pts = np.concatenate([pts, x_near + rng.normal(scale=0.02, size=x_near.shape)])
    _, grad = bundle.sdf(pts, with_grad=True)
    norm = ops.sqrt(ops.sum_(grad * grad, axis=-1) + 1e-12)
    return ops.mean((norm - 1.0) ** 2)


def eikonal_residual(bundle, rng, n=2048):
    """Detached convergence probe of the Eikonal term."""
    val = _eikonal(bundle, rng, n)
    out = float(val.data)
    bundle.tape.reset()
    return out


def make_radiance_head(tape, seed, width=64):
    """Stage-1 throwaway color net c(x, d, n); softplus keeps s0 nonnegative
    without clipping bright regions the way a sigmoid would."""
    rng = np.random.default_rng(seed + 77)
    return Mlp(tape, rng, in_dims=(3, 3, 3), n_freqs=(6, 4, 0), width=width,
               hidden=3, out_dim=3)


def _log_row(log_path, stage, it, terms, t0):
    if log_path is None:
        return
    header = ["stage", "iter", "loss", "loss_data", "loss_mask", "loss_eik", "wall_s"]
    row = [stage, it, *[f"{v:.6g}" for v in terms], f"{time.time() - t0:.2f}"]
    formats.append_csv_row(log_path, header, row)


# -- stage 1: geometry ----------------------------------------------------------


def stage1_geometry(dataset, cfg, log_path=None):
    """VolSDF-style bootstrap on s0 with a temporary radiance head.

    Returns the bundle with f_sdf/alpha/beta trained; the head is dropped.
    Samples all pixels (background included) so the mask term can carve
    empty space.
    """
    tape = ad.Tape()
    bundle = FieldBundle(tape, seed=cfg.seed)
    head = make_radiance_head(tape, cfg.seed)
    table = dataset.ray_table(dataset.train_views)
    rng = np.random.default_rng(cfg.seed + 1)
    params = bundle.f_sdf.param_arrays() + [bundle.beta] + head.param_arrays()
    opt = Adam([(params, cfg.lr)], cfg.beta1, cfg.beta2, cfg.eps)
    _tie_blend_sharpness(bundle)
    n_rays = table["origins"].shape[0]
    t0 = time.time()

    for it in range(1, cfg.stage_iters[0] + 1):
        idx = rng.choice(n_rays, size=cfg.batch, replace=False)
        o, d = table["origins"][idx], table["dirs"][idx]
        gt_s0 = table["stokes"][idx][:, 0, :]
        gt_m = table["mask"][idx].astype(np.float64)
        try:
            res = volume_aggregate(bundle, o, d, rng=rng)
        except EmptyRay:
            tape.reset()
            continue
        # per-sample radiance blended with unnormalized weights
        m = res.t.shape[1]
        x_flat = (o[:, None] + res.t[..., None] * d[:, None]).reshape(-1, 3)
        d_rep = np.repeat(d, m, axis=0)
        n_flat = res.sdf_grad.data.reshape(-1, 3)
        n_flat = n_flat / np.maximum(np.linalg.norm(n_flat, axis=-1, keepdims=True), 1e-9)
        rgb = ad.softplus(head.forward((x_flat - bundle.center, d_rep, n_flat)))
        rgb = ad.reshape(rgb, (cfg.batch, m, 3))
        w3 = ad.reshape(res.weights, (cfg.batch, m, 1))
        s0_pred = ops.sum_(w3 * rgb, axis=1)

        loss_data = ops.mean(ops.absval(s0_pred - gt_s0))
        opac = ops.clip(ad.reshape(res.w_sum, (cfg.batch,)), 1e-4, 1.0 - 1e-4)
        bce = -(gt_m * ops.log(opac) + (1.0 - gt_m) * ops.log(1.0 - opac))
        loss_mask = ops.mean(bce)
        x_near = res.x_surf[res.valid & (gt_m > 0.5)]
        loss_eik = _eikonal(bundle, rng, cfg.eik_samples, x_near)
        loss = loss_data + cfg.mask_weight * loss_mask + cfg.eik_weight * loss_eik
        _check_finite(float(loss.data), idx, 1)

        tape.backward(loss)
        opt.step()
        tape.zero_grad()
        tape.reset()
        _tie_blend_sharpness(bundle)
        if it % cfg.log_every == 0 or it == 1:
            _log_row(log_path, 1, it, [float(loss.data), float(loss_data.data),
                                       float(loss_mask.data), float(loss_eik.data)], t0)
    return bundle


# -- stage 2: materials and incident light, geometry frozen -----------------------


class FrozenGeometry:
    """Per-ray cache of the volume pass under a frozen f_sdf.

    Holds detached sample times, normalized blend weights, surface points and
    normals, so stage 2 re-blends only the material nets each iteration.
    """

    def __init__(self, bundle, origins, dirs, chunk=512):
        xs, ws, wsum, nrm, val, bg = [], [], [], [], [], []
        ts = []
        for lo in range(0, origins.shape[0], chunk):
            sl = slice(lo, lo + chunk)
            try:
                res = volume_aggregate(bundle, origins[sl], dirs[sl])
            except EmptyRay:
                p = origins[sl].shape[0]
                m = 80
                ts.append(np.zeros((p, m)))
                ws.append(np.zeros((p, m)))
                wsum.append(np.zeros(p))
                xs.append(np.zeros((p, 3)))
                nrm.append(np.tile([0.0, 0.0, 1.0], (p, 1)))
                val.append(np.zeros(p, dtype=bool))
                bundle.tape.reset()
                continue
            denom = np.maximum(res.w_sum.data, 1e-12)
            ts.append(res.t)
            ws.append(res.weights.data / denom[:, None])
            wsum.append(res.w_sum.data)
            xs.append(res.x_surf)
            nrm.append(res.normal.data)
            val.append(res.valid)
            bundle.tape.reset()
        self.t = np.concatenate(ts)
        self.wn = np.concatenate(ws)
        self.w_sum = np.concatenate(wsum)
        self.x_surf = np.concatenate(xs)
        self.normal = np.concatenate(nrm)
        self.valid = np.concatenate(val)
        self.origins = origins
        self.dirs = dirs

    def aggregate(self, bundle, idx):
        """Rebuild an AggregateResult at idx with live material nets."""
        o, d = self.origins[idx], self.dirs[idx]
        t, wn = self.t[idx], self.wn[idx]
        p, m = t.shape
        x_flat = (o[:, None] + t[..., None] * d[:, None]).reshape(-1, 3)
        enc = bundle.material_encoding(x_flat)
        wn3 = bundle.tape.const(wn[..., None])
        alb = ad.reshape(bundle.albedo(x_flat, enc=enc), (p, m, 3))
        albedo = ops.sum_(wn3 * alb, axis=1)
        rough = ad.reshape(bundle.roughness(x_flat, enc=enc), (p, m))
        roughness = ops.sum_(bundle.tape.const(wn) * rough, axis=1)
        c = bundle.tape.const
        return AggregateResult(
            x_surf=self.x_surf[idx], normal=c(self.normal[idx]),
            albedo=albedo, roughness=roughness,
            weights=c(wn), w_sum=c(self.w_sum[idx]),
            background=c(1.0 - self.w_sum[idx]), t=t,
            sdf=c(np.zeros((p, m))), sdf_grad=c(np.zeros((p, m, 3))),
            valid=self.valid[idx])


def _material_params(bundle):
    return (bundle.f_alb.param_arrays() + bundle.f_rough.param_arrays()
            + bundle.f_i.param_arrays() + bundle.f_spec.param_arrays()
            + bundle.f_dif.param_arrays())


def _stokes_batch_loss(bundle, table, geom, idx, cfg):
    """L1 between shaded and measured Stokes on masked rays; s0 row only
    under the no-pol ablation."""
    o, d, xc = table["origins"][idx], table["dirs"][idx], table["x_cam"][idx]
    agg = geom.aggregate(bundle, idx) if geom is not None else None
    if cfg.ablation == "nopol":
        rgb, valid = shade_pixel_nopol(bundle, o, d, n_quad=cfg.n_quad, aggregate=agg)
        gt = table["stokes"][idx][:, 0, :]
        diff = ops.absval(rgb - gt)
    else:
        stokes, valid = shade_pixel(bundle, o, d, xc, n_quad=cfg.n_quad, aggregate=agg)
        gt = table["stokes"][idx]
        diff = ops.absval(stokes - gt)
    keep = bundle.tape.const(valid.astype(np.float64).reshape((-1,) + (1,) * (diff.data.ndim - 1)))
    denom = max(float(valid.sum()), 1.0) * float(np.prod(diff.data.shape[1:]))
    return ops.sum_(diff * keep) * (1.0 / denom), valid


def stage2_material_light(dataset, bundle, cfg, log_path=None):
    """Fit materials and incident fields under frozen geometry."""
    table = dataset.ray_table(dataset.train_views)
    masked = np.where(table["mask"])[0]
    rng = np.random.default_rng(cfg.seed + 2)
    geom = FrozenGeometry(bundle, table["origins"][masked], table["dirs"][masked])
    sub = {k: v[masked] for k, v in table.items()}
    opt = Adam([(_material_params(bundle), cfg.lr)], cfg.beta1, cfg.beta2, cfg.eps)
    tape = bundle.tape
    t0 = time.time()
    for it in range(1, cfg.stage_iters[1] + 1):
        idx = rng.choice(masked.size, size=min(cfg.batch, masked.size), replace=False)
        loss, _ = _stokes_batch_loss(bundle, sub, geom, idx, cfg)
        _check_finite(float(loss.data), masked[idx], 2)
        tape.backward(loss)
        opt.step()
        tape.zero_grad()
        tape.reset()
        if it % cfg.log_every == 0 or it == 1:
            _log_row(log_path, 2, it, [float(loss.data), float(loss.data), 0.0, 0.0], t0)
    return bundle


def stage3_joint(dataset, bundle, cfg, log_path=None):
    """Joint refinement: full volume pass, reduced geometry learning rate,
    Eikonal regularizer kept on."""
    table = dataset.ray_table(dataset.train_views)
    masked = np.where(table["mask"])[0]
    sub = {k: v[masked] for k, v in table.items()}
    rng = np.random.default_rng(cfg.seed + 3)
    opt = Adam([(_material_params(bundle), cfg.lr),
                (bundle.f_sdf.param_arrays() + [bundle.beta], cfg.lr_sdf_stage3)],
               cfg.beta1, cfg.beta2, cfg.eps)
    tape = bundle.tape
    t0 = time.time()
    for it in range(1, cfg.stage_iters[2] + 1):
        idx = rng.choice(masked.size, size=min(cfg.batch, masked.size), replace=False)
        loss_data, valid = _stokes_batch_loss(bundle, sub, None, idx, cfg)
        loss_eik = _eikonal(bundle, rng, cfg.eik_samples)
        loss = loss_data + cfg.eik_weight * loss_eik
        _check_finite(float(loss.data), masked[idx], 3)
        tape.backward(loss)
        opt.step()
        tape.zero_grad()
        tape.reset()
        _tie_blend_sharpness(bundle)
        if it % cfg.log_every == 0 or it == 1:
            _log_row(log_path, 3, it, [float(loss.data), float(loss_data.data),
                                       0.0, float(loss_eik.data)], t0)
    return bundle


def train_stages(dataset, cfg, stages=(1, 2, 3), bundle=None, out_dir=None,
                 log_path=None):
    """Run the requested stages in order, checkpointing after each.

    Checkpoint names carry the ablation tag from stage 2 on (stage 1 sees
    only s0 and is shared between branches).
    """
    runners = {1: stage1_geometry, 2: stage2_material_light, 3: stage3_joint}
    for s in stages:
        if s == 1:
            bundle = stage1_geometry(dataset, cfg, log_path)
        else:
            if bundle is None:
                raise ValueError(f"stage {s} needs a prior bundle")
            bundle = runners[s](dataset, bundle, cfg, log_path)
        if out_dir is not None:
            bundle.save(os.path.join(out_dir, checkpoint_name(s, cfg.ablation)),
                        extra_scalars={"stage": s})
    return bundle


def checkpoint_name(stage, ablation):
    return f"stage{stage}.ckpt" if stage == 1 else f"stage{stage}_{ablation}.ckpt"


# -- metrics --------------------------------------------------------------------


PSNR_INF = float("inf")


def normal_mae_deg(pred, gt, mask):
    """Mean angular error in degrees over masked pixels."""
    sel = mask > 0.5
    p = pred[sel]
    g = gt[sel]
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    dots = np.clip(np.sum(p * g, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots).mean()))


def psnr(pred, gt, mask):
    """Peak = max of the masked GT; identical images hit the +inf sentinel."""
    sel = mask > 0.5
    err = pred[sel] - gt[sel]
    mse = float(np.mean(err * err))
    if mse == 0.0:
        return PSNR_INF
    peak = float(np.max(np.abs(gt[sel])))
    if peak == 0.0:
        peak = 1.0
    return float(10.0 * np.log10(peak * peak / mse))


def si_l1(pred, gt, mask):
    """Scale-invariant L1: least-squares scalar per channel, then plain L1."""
    sel = mask > 0.5
    p = pred[sel].reshape(sel.sum(), -1)
    g = gt[sel].reshape(sel.sum(), -1)
    denom = np.sum(p * p, axis=0)
    c = np.where(denom > 0.0, np.sum(p * g, axis=0) / np.maximum(denom, 1e-300), 0.0)
    return float(np.mean(np.abs(c * p - g)))


def dolp(stokes_img, eps=1e-6):
    lin = np.sqrt(stokes_img[..., 1, :] ** 2 + stokes_img[..., 2, :] ** 2)
    return lin / np.maximum(stokes_img[..., 0, :], eps)


def dolp_mae(pred_stokes, gt_stokes, mask):
    sel = mask > 0.5
    return float(np.mean(np.abs(dolp(pred_stokes)[sel] - dolp(gt_stokes)[sel])))


@dataclasses.dataclass
class MetricsReport:
    normal_mae_deg: float
    psnr_mixed: float
    psnr_diffuse: float
    psnr_specular: float
    si_l1_albedo: float
    si_l1_roughness: float
    dolp_mae: float
    per_view: list = dataclasses.field(default_factory=list)

    FIELDS = ("normal_mae_deg", "psnr_mixed", "psnr_diffuse", "psnr_specular",
              "si_l1_albedo", "si_l1_roughness", "dolp_mae")

    def to_json(self, path):
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["per_view"] = self.per_view
        with open(path, "w") as f:
            json.dump(d, f, indent=2, default=str)

    def to_csv(self, path):
        header = ["view", *self.FIELDS]
        for row in self.per_view:
            formats.append_csv_row(path, header, [row["view"]] +
                                   [f"{row[k]:.6g}" for k in self.FIELDS])


def evaluate(bundle, dataset, views=None, n_quad=N_QUAD_EVAL, nopol=False,
             chunk=512):
    """Render the held-out views and score them against the GT AOVs."""
    views = dataset.test_views if views is None else list(views)
    rows = []
    for v in views:
        pose = dataset.poses[v]
        out = render_bundle_view(bundle, pose, n_quad=n_quad, chunk=chunk,
                                 nopol=nopol)
        if not np.isfinite(out["stokes"]).all():
            raise NanError(f"non-finite render on view {v}", [v])
        gt_stokes = dataset.stokes(v)
        mask = dataset.mask(v)
        row = {"view": v,
               "normal_mae_deg": normal_mae_deg(out["normal"], dataset.aov(v, "normal"), mask),
               "psnr_mixed": psnr(out["stokes"][..., 0, :], gt_stokes[..., 0, :], mask),
               "psnr_diffuse": psnr(out["diffuse"], dataset.aov(v, "diffuse"), mask),
               "psnr_specular": psnr(out["specular"], dataset.aov(v, "specular"), mask),
               "si_l1_albedo": si_l1(out["albedo"], dataset.aov(v, "albedo"), mask),
               "si_l1_roughness": si_l1(out["roughness"][..., None],
                                        dataset.aov(v, "roughness")[..., None], mask),
               "dolp_mae": dolp_mae(out["stokes"], gt_stokes, mask)}
        rows.append(row)
    agg = {k: float(np.mean([r[k] for r in rows])) for k in MetricsReport.FIELDS}
    return MetricsReport(per_view=rows, **agg)
