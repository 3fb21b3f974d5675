"""Differentiable window objective with a frozen active set.

Every non-smooth choice in the objective (which model Gaussians are gated
by the hand, which pairs make an image Gaussian's top-k, whether its sum is
clamped at the self-energy, which silhouette cells saturate, nearest
neighbours for contact, depth-statistic membership) is computed once per
iteration from the current parameters without gradients. Within an
iteration the objective is then a smooth function of the pose parameters,
which is what both the autograd gradient and the finite-difference check
differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from .energy import EnergyParams, visibility_gate
from .geometry import Camera, pose_points_t, project_t, quat_to_rotmat_t
from .image_sog import ImageSoG
from .object_sog import ObjectSoG
from .priors import (
    BEHIND_CAMERA_PENALTY,
    HandFrame,
    LossWeights,
    cell_centers,
    consistency_signs,
    contact_points_local,
    downsample_mask,
    grid_shape,
    j2d_kernel,
    smooth_kernel,
)

DTYPE = torch.float64
# pairs with |mu_i - mu_j|^2 > PAIR_CUTOFF * (s_i^2 + s_j^2) contribute < exp(-12) of their peak
PAIR_CUTOFF = 12.0
# candidate cache: pixel margin and sigma slack before a rebuild is forced
PAIR_MARGIN = 4.0
PAIR_SIGMA_SLACK = 1.1
# pairs whose colour kernel is below this are never able to contribute measurably
COLOR_FLOOR = 1e-12
STENCIL_SIGMAS = 4.0
# a Gaussian covers a cell for z-buffering within this many sigma
COVER_SIGMAS = 2.0
# depth tolerance of the front layer, in posed 3D sigmas
FRONT_TOLERANCE = 2.0
TERMS = ("energy", "j2d", "depth", "sil", "contact", "smooth")
BLOCKS = ("obj_q", "obj_t", "obj_log_s", "hand_q", "hand_t", "hand_log_s")


class ObjectiveDiverged(RuntimeError):
    pass


@dataclass
class FrameData:
    """Immutable per-frame observations used by the objective."""

    index: int
    cam: Camera
    image_sog: ImageSoG
    mask_o: np.ndarray
    mask_h: Optional[np.ndarray] = None
    hand: Optional[HandFrame] = None
    depth_med_o: Optional[float] = None
    depth_med_h: Optional[float] = None
    sil_target: Optional[np.ndarray] = None

    def ensure_sil_target(self, downsample: int) -> np.ndarray:
        if self.sil_target is None:
            self.sil_target = downsample_mask(self.mask_o, downsample)
        return self.sil_target


@dataclass
class SceneModel:
    """Data shared by every frame: the object SoG and objective settings."""

    object_sog: ObjectSoG
    energy_params: EnergyParams = field(default_factory=EnergyParams)
    weights: LossWeights = field(default_factory=LossWeights)
    contact_indices: Optional[List[int]] = None
    sil_downsample: int = 4
    gating: bool = True

    def __post_init__(self):
        self.mu = torch.as_tensor(self.object_sog.mu, dtype=DTYPE)
        self.sigma = torch.as_tensor(self.object_sog.sigma, dtype=DTYPE)
        self.color = np.asarray(self.object_sog.color, dtype=np.float64)
        self.weight = np.asarray(self.object_sog.weight, dtype=np.float64)
        self.weight_t = torch.as_tensor(self.weight, dtype=DTYPE)


@dataclass
class ParamBlocks:
    """Pose variables of one window. Scales are stored as logs."""

    obj_q: np.ndarray
    obj_t: np.ndarray
    obj_log_s: float
    hand_q: np.ndarray
    hand_t: np.ndarray
    hand_log_s: float

    def __post_init__(self):
        self.obj_q = np.array(self.obj_q, dtype=np.float64).reshape(-1, 4)
        self.obj_t = np.array(self.obj_t, dtype=np.float64).reshape(-1, 3)
        self.hand_q = np.array(self.hand_q, dtype=np.float64).reshape(-1, 4)
        self.hand_t = np.array(self.hand_t, dtype=np.float64).reshape(-1, 3)
        self.obj_log_s = float(self.obj_log_s)
        self.hand_log_s = float(self.hand_log_s)

    def __len__(self):
        return len(self.obj_q)

    def copy(self) -> "ParamBlocks":
        return ParamBlocks(self.obj_q.copy(), self.obj_t.copy(), self.obj_log_s,
                           self.hand_q.copy(), self.hand_t.copy(), self.hand_log_s)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {k: np.array(getattr(self, k), dtype=np.float64) for k in BLOCKS}

    @classmethod
    def from_dict(cls, d) -> "ParamBlocks":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in BLOCKS})

    def tensors(self, requires_grad: bool = False) -> Dict[str, torch.Tensor]:
        return {k: torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad) for k, v in self.as_dict().items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(v) for v in self.as_dict().values()])

    def with_flat(self, x: np.ndarray) -> "ParamBlocks":
        d, i = {}, 0
        for k, v in self.as_dict().items():
            n = v.size
            d[k] = np.asarray(x[i:i + n]).reshape(v.shape)
            i += n
        return ParamBlocks.from_dict(d)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


@dataclass
class ActiveSet:
    """Frozen discrete choices of one iteration, batched over the window's frames."""

    # energy
    pair_i: np.ndarray          # indices into the concatenated image Gaussians
    pair_j: np.ndarray          # flat model index (frame * M + j)
    pair_color: np.ndarray      # colour-kernel * w_i * w_j per pair
    img_mu: np.ndarray
    img_sigma: np.ndarray
    energy_const: float         # sum of self-energies of clamped image Gaussians
    visible: np.ndarray         # (T, M) bool
    # depth
    depth_j: np.ndarray         # flat model index of each front-layer (Gaussian, cell) pair
    depth_cell: np.ndarray      # global cell index of each pair
    depth_xy: np.ndarray        # cell-centre coordinates of each pair
    depth_cells: np.ndarray     # global indices of the mask cells averaged per frame
    depth_frame: np.ndarray     # frame of each averaged cell
    depth_hand: List[Optional[np.ndarray]]
    # silhouette
    sil_j: np.ndarray           # flat model index
    sil_cell: np.ndarray        # flat cell index (frame * cells + cell)
    sil_d2: np.ndarray          # cell-centre coordinates for each pair, (P, 2)
    sil_clamped: np.ndarray     # (T * cells,) bool
    # contact / j2d / smooth
    contact_nn: List[Optional[np.ndarray]]
    j2d_behind: List[Optional[np.ndarray]]
    obj_signs: np.ndarray
    hand_signs: np.ndarray
    stats: Dict[str, float] = field(default_factory=dict)


class WindowProblem:
    """Objective over one window of frames, with gradient and active-set helpers."""

    def __init__(self, frames: List[FrameData], scene: SceneModel):
        self.frames = frames
        self.scene = scene
        self.T = len(frames)
        self.M = len(scene.object_sog)
        self.K = torch.as_tensor(np.stack([f.cam.intrinsics for f in frames]), dtype=DTYPE)
        self.E = torch.as_tensor(np.stack([f.cam.extrinsics for f in frames]), dtype=DTYPE)
        self.f_avg = torch.as_tensor([f.cam.f_avg for f in frames], dtype=DTYPE)
        ds = scene.sil_downsample
        self.grid = [grid_shape(f.cam.width, f.cam.height, ds) for f in frames]
        self.n_cells = [h * w for h, w in self.grid]
        self.cell_offset = np.concatenate([[0], np.cumsum(self.n_cells)]).astype(int)
        self.sil_target_np = [f.ensure_sil_target(ds).ravel() for f in frames]
        self.sil_target = torch.as_tensor(np.concatenate(self.sil_target_np), dtype=DTYPE)
        self.centers = [cell_centers(f.cam.width, f.cam.height, ds).reshape(-1, 2) for f in frames]
        self.has_hand = [f.hand is not None for f in frames]
        self._pair_cache = {}
        self.contact_local = [
            torch.as_tensor(contact_points_local(f.hand, scene.contact_indices), dtype=DTYPE)
            if f.hand is not None else None for f in frames
        ]

    # -- projection helpers -------------------------------------------------

    def project_object_np(self, params: ParamBlocks):
        with torch.no_grad():
            uv, z, sig = self._project_object(
                torch.as_tensor(params.obj_q, dtype=DTYPE), torch.as_tensor(params.obj_t, dtype=DTYPE),
                torch.tensor(params.obj_log_s, dtype=DTYPE))
        return uv.numpy(), z.numpy(), sig.numpy()

    def _project_object(self, q, t, log_s):
        world = pose_points_t(q, t, log_s, self.scene.mu)
        uv, z = project_t(self.K, self.E, world)
        zs = torch.where(z > 1e-9, z, torch.ones_like(z))
        sig = self.f_avg[:, None] * torch.exp(log_s) * self.scene.sigma[None, :] / zs
        return uv, z, sig

    def _posed_hand(self, t_idx: int, q, t, log_s, pts):
        return pose_points_t(q[t_idx:t_idx + 1], t[t_idx:t_idx + 1], log_s, pts)[0]

    # -- active set ---------------------------------------------------------

    def active_set(self, params: ParamBlocks) -> ActiveSet:
        sc = self.scene
        ep = sc.energy_params
        uv, z, sig = self.project_object_np(params)
        T, M = self.T, self.M
        visible = np.zeros((T, M), dtype=bool)
        pi, pj, pc, img_mu, img_sig = [], [], [], [], []
        energy_const = 0.0
        img_off = 0
        n_clamped = 0
        dep_j, dep_cell, dep_xy, dep_cells, dep_fr, dep_hand = [], [], [], [], [], []
        s_obj = float(np.exp(params.obj_log_s))
        sil_j, sil_cell, sil_xy, clamped = [], [], [], []
        contact_nn, behind = [], []
        for t, fr in enumerate(self.frames):
            front = z[t] > 1e-9
            if sc.gating and fr.mask_h is not None:
                vis = visibility_gate(uv[t], fr.mask_h) & front
            else:
                vis = visibility_gate(uv[t], np.zeros(fr.mask_o.shape, dtype=np.uint8)) & front
            visible[t] = vis
            # energy pairs
            img = fr.image_sog
            n_img = len(img)
            img_mu.append(img.mu)
            img_sig.append(img.sigma)
            e_ii = img.weight ** 2 * np.pi * img.sigma ** 2
            if n_img and vis.any():
                ii, jj, kc = self._pairs(t, uv[t], sig[t], front)
                ok = vis[jj]
                ii, jj, kc = ii[ok], jj[ok], kc[ok]
                s1 = img.sigma[ii] ** 2
                s2 = sig[t, jj] ** 2
                d2 = _sqdist(img.mu, ii, uv[t], jj)
                ok = np.flatnonzero(d2 <= PAIR_CUTOFF * (s1 + s2))
                ii, jj, kc, s1, s2, d2 = ii[ok], jj[ok], kc[ok], s1[ok], s2[ok], d2[ok]
                e = kc * 2 * np.pi * s1 * s2 / (s1 + s2) * np.exp(-d2 / (s1 + s2))
                keep = _top_k_mask(ii, e, n_img, ep.top_k, e_ii)
                ii, jj, e, kc = ii[keep], jj[keep], e[keep], kc[keep]
                sums = np.bincount(ii, weights=e, minlength=n_img)
                sat = sums >= e_ii
                energy_const += float(e_ii[sat].sum())
                n_clamped += int(sat.sum())
                live = ~sat[ii]
                pi.append(ii[live] + img_off)
                pj.append(jj[live] + t * M)
                pc.append(kc[live])
            img_off += n_img
            H, W = fr.mask_o.shape
            if fr.hand is not None and fr.mask_h is not None and fr.depth_med_h is not None:
                hv = self._hand_surface_np(t, params, fr)
                huv, hz = fr.cam.project(hv)
                hr = np.floor(huv + 0.5).astype(np.int64)
                ok = (hz > 1e-9) & (hr[:, 0] >= 0) & (hr[:, 0] < W) & (hr[:, 1] >= 0) & (hr[:, 1] < H)
                okid = np.flatnonzero(ok)
                okid = okid[fr.mask_h[hr[okid, 1], hr[okid, 0]] != 0]
                dep_hand.append(okid if len(okid) else None)
            else:
                dep_hand.append(None)
            # silhouette stencils
            fidx = np.flatnonzero(front)
            cj, cc, cen, r2 = _stencil_pairs(uv[t, fidx], sig[t, fidx], self.grid[t], sc.sil_downsample)
            cj = fidx[cj]
            w = sc.weight[cj] * np.exp(-0.5 * r2)
            occ = np.zeros(self.n_cells[t])
            np.add.at(occ, cc, w)
            clamped.append(occ >= 1.0)
            live = ~clamped[-1][cc]
            sil_j.append(cj[live] + t * M)
            sil_cell.append(cc[live] + self.cell_offset[t])
            sil_xy.append(cen[live])
            # rendered object depth: front layer of the visible Gaussians per cell
            if fr.depth_med_o is not None:
                dj, dc, dxy, dcells = _front_layer(cj, cc, cen, r2, z[t], vis, s_obj * sc.object_sog.sigma,
                                              self.sil_target_np[t] > 0.5, self.n_cells[t])
                if len(dcells):
                    dep_j.append(dj + t * M)
                    dep_cell.append(dc + self.cell_offset[t])
                    dep_xy.append(dxy)
                    dep_cells.append(dcells + self.cell_offset[t])
                    dep_fr.append(np.full(len(dcells), t))
            # contact
            if fr.hand is not None and fr.hand.contact_flag and sc.weights.contact > 0:
                cp = self._posed_np(t, params.hand_q, params.hand_t, params.hand_log_s, self.contact_local[t].numpy())
                op = self._posed_np(t, params.obj_q, params.obj_t, params.obj_log_s, sc.object_sog.mu)
                _, nn = cKDTree(op).query(cp)
                contact_nn.append(np.asarray(nn, dtype=int))
            else:
                contact_nn.append(None)
            if fr.hand is not None:
                jp = self._posed_np(t, params.hand_q, params.hand_t, params.hand_log_s, fr.hand.local_joints)
                behind.append(fr.cam.world_to_camera(jp)[:, 2] <= 1e-9)
            else:
                behind.append(None)

        def cat(xs, dt=np.int64, shape=(0,)):
            return np.concatenate(xs).astype(dt) if xs else np.zeros(shape, dtype=dt)

        n_img_total = img_off
        return ActiveSet(
            pair_i=cat(pi), pair_j=cat(pj), pair_color=cat(pc, np.float64),
            img_mu=np.concatenate(img_mu) if img_mu else np.zeros((0, 2)),
            img_sigma=np.concatenate(img_sig) if img_sig else np.zeros(0),
            energy_const=energy_const, visible=visible,
            depth_j=cat(dep_j), depth_cell=cat(dep_cell),
            depth_xy=np.concatenate(dep_xy) if dep_xy else np.zeros((0, 2)),
            depth_cells=cat(dep_cells), depth_frame=cat(dep_fr), depth_hand=dep_hand,
            sil_j=cat(sil_j), sil_cell=cat(sil_cell),
            sil_d2=np.concatenate(sil_xy) if sil_xy else np.zeros((0, 2)),
            sil_clamped=np.concatenate(clamped),
            contact_nn=contact_nn, j2d_behind=behind,
            obj_signs=consistency_signs(params.obj_q), hand_signs=consistency_signs(params.hand_q),
            stats={"visible_fraction": float(visible.mean()) if visible.size else 0.0,
                   "clamped_image_gaussians": float(n_clamped),
                   "image_gaussians": float(n_img_total),
                   "energy_pairs": float(sum(len(x) for x in pi))},
        )

    def _pairs(self, t, uv, sig, front):
        """Colour-compatible candidate pairs of frame t, from a cache rebuilt on large motion.

        The cache is built with a PAIR_MARGIN pixel margin and sigmas inflated
        by PAIR_SIGMA_SLACK, so it is a superset of the exact cutoff set while
        every projected mean stays within the margin of its reference position
        and every sigma within the slack. Pairs are ordered by (image, model).
        """
        c = self._pair_cache.get(t)
        if c is not None:
            f = front & c["front"]
            moved = np.abs(uv[f] - c["uv"][f]).max() if f.any() else 0.0
            if (moved <= PAIR_MARGIN and np.all(sig[front] <= PAIR_SIGMA_SLACK * c["sig"][front])
                    and not np.any(front & ~c["front"])):
                return c["ii"], c["jj"], c["kc"]
        img = self.frames[t].image_sog
        sc = self.scene
        fidx = np.flatnonzero(front)
        ii, jj = _candidate_pairs(img.mu, img.sigma, uv[fidx], PAIR_SIGMA_SLACK * sig[fidx], PAIR_MARGIN)
        jj = fidx[jj]
        dc2 = ((img.color[ii] - sc.color[jj]) ** 2).sum(1)
        kc = img.weight[ii] * sc.weight[jj] * np.exp(-dc2 / sc.energy_params.sigma_c ** 2)
        ok = kc >= COLOR_FLOOR
        ii, jj, kc = ii[ok], jj[ok], kc[ok]
        order = np.lexsort((jj, ii))
        ii, jj, kc = ii[order], jj[order], kc[order]
        self._pair_cache[t] = {"uv": uv.copy(), "sig": sig.copy(), "front": front.copy(),
                               "ii": ii, "jj": jj, "kc": kc}
        return ii, jj, kc

    def _posed_np(self, t, q, tr, log_s, pts):
        R = quat_to_rotmat_t(torch.as_tensor(q[t], dtype=DTYPE)).numpy()
        return np.exp(log_s) * np.asarray(pts) @ R.T + tr[t]

    def _hand_surface_np(self, t, params, fr):
        return self._posed_np(t, params.hand_q, params.hand_t, params.hand_log_s, fr.hand.surface)

    # -- objective ------------------------------------------------------------

    def terms(self, p: Dict[str, torch.Tensor], act: ActiveSet) -> Dict[str, torch.Tensor]:
        """Unweighted objective terms as differentiable tensors."""
        sc = self.scene
        uv, z, sig = self._project_object(p["obj_q"], p["obj_t"], p["obj_log_s"])
        uv_f = uv.reshape(-1, 2)
        z_f = z.reshape(-1)
        sig_f = sig.reshape(-1)
        zero = p["obj_t"].sum() * 0.0

        # alignment energy
        energy = zero + act.energy_const
        if len(act.pair_i):
            pj = torch.as_tensor(act.pair_j)
            mu_i = torch.as_tensor(act.img_mu[act.pair_i], dtype=DTYPE)
            s1 = torch.as_tensor(act.img_sigma[act.pair_i] ** 2, dtype=DTYPE)
            s2 = sig_f[pj] ** 2
            ss = s1 + s2
            d2 = ((mu_i - uv_f[pj]) ** 2).sum(-1)
            e = torch.as_tensor(act.pair_color, dtype=DTYPE) * 2 * np.pi * s1 * s2 / ss * torch.exp(-d2 / ss)
            energy = energy + e.sum()

        # silhouette
        sil = zero
        n_total = int(self.cell_offset[-1])
        occ = torch.zeros(n_total, dtype=DTYPE)
        if len(act.sil_j):
            sj = torch.as_tensor(act.sil_j)
            cen = torch.as_tensor(act.sil_d2, dtype=DTYPE)
            w = sc.weight_t[sj % self.M] * torch.exp(-((cen - uv_f[sj]) ** 2).sum(-1) / (2 * sig_f[sj] ** 2))
            occ = occ.index_add(0, torch.as_tensor(act.sil_cell), w)
        occ = torch.where(torch.as_tensor(act.sil_clamped), torch.ones_like(occ), occ)
        sq = (occ - self.sil_target) ** 2
        for t in range(self.T):
            sil = sil + sq[self.cell_offset[t]:self.cell_offset[t + 1]].mean()

        # depth
        depth = zero
        if len(act.depth_cells):
            dj = torch.as_tensor(act.depth_j)
            cen = torch.as_tensor(act.depth_xy, dtype=DTYPE)
            w = torch.exp(-((cen - uv_f[dj]) ** 2).sum(-1) / (2 * sig_f[dj] ** 2))
            dcell = torch.as_tensor(act.depth_cell)
            num = torch.zeros(n_total, dtype=DTYPE).index_add(0, dcell, w * z_f[dj])
            den = torch.zeros(n_total, dtype=DTYPE).index_add(0, dcell, w)
            cells = torch.as_tensor(act.depth_cells)
            d_cell = num[cells] / den[cells]
            dsum = torch.zeros(self.T, dtype=DTYPE).index_add(0, torch.as_tensor(act.depth_frame), d_cell)
            cnt = np.bincount(act.depth_frame, minlength=self.T)
            for t in np.flatnonzero(cnt):
                depth = depth + torch.abs(dsum[t] / float(cnt[t]) - self.frames[t].depth_med_o)

        j2d = zero
        contact = zero
        for t, fr in enumerate(self.frames):
            if fr.hand is None:
                continue
            joints = self._posed_hand(t, p["hand_q"], p["hand_t"], p["hand_log_s"],
                                      torch.as_tensor(fr.hand.local_joints, dtype=DTYPE))
            juv, jz = project_t(self.K[t:t + 1], self.E[t:t + 1], joints[None])
            j2d = j2d + j2d_kernel(juv[0], jz[0], torch.as_tensor(fr.hand.detected_joints_2d, dtype=DTYPE),
                                   torch.as_tensor(act.j2d_behind[t]))
            hidx = act.depth_hand[t]
            if hidx is not None:
                verts = self._posed_hand(t, p["hand_q"], p["hand_t"], p["hand_log_s"],
                                         torch.as_tensor(fr.hand.surface[hidx], dtype=DTYPE))
                hz = (verts @ self.E[t, :3, :3].T + self.E[t, :3, 3])[:, 2]
                depth = depth + torch.abs(hz.mean() - fr.depth_med_h)
            nn = act.contact_nn[t]
            if nn is not None:
                cp = self._posed_hand(t, p["hand_q"], p["hand_t"], p["hand_log_s"], self.contact_local[t])
                op = self._posed_hand(t, p["obj_q"], p["obj_t"], p["obj_log_s"], sc.mu[torch.as_tensor(nn)])
                contact = contact + ((cp - op) ** 2).sum(-1).mean()

        smooth = smooth_kernel(p["obj_q"], p["obj_t"], torch.as_tensor(act.obj_signs, dtype=DTYPE))
        if any(self.has_hand):
            smooth = smooth + smooth_kernel(p["hand_q"], p["hand_t"], torch.as_tensor(act.hand_signs, dtype=DTYPE))

        return {"energy": energy, "j2d": j2d, "depth": depth, "sil": sil, "contact": contact, "smooth": smooth}

    def total(self, p: Dict[str, torch.Tensor], act: ActiveSet, weights: Optional[LossWeights] = None):
        w = self.scene.weights if weights is None else weights
        terms = self.terms(p, act)
        total = (-w.energy * terms["energy"] + w.j2d * terms["j2d"] + w.depth * terms["depth"]
                 + w.sil * terms["sil"] + w.contact * terms["contact"] + w.smooth * terms["smooth"])
        return total, terms

    def value_and_grad(self, params: ParamBlocks, act: Optional[ActiveSet] = None, weights=None):
        act = self.active_set(params) if act is None else act
        p = params.tensors(requires_grad=True)
        total, terms = self.total(p, act, weights)
        if not torch.isfinite(total):
            raise ObjectiveDiverged("objective diverged")
        total.backward()
        grads = {k: (v.grad.numpy().copy() if v.grad is not None else np.zeros(tuple(v.shape))) for k, v in p.items()}
        return float(total.detach()), grads, {k: float(v.detach()) for k, v in terms.items()}, act

    def value(self, params: ParamBlocks, act: Optional[ActiveSet] = None, weights=None) -> float:
        act = self.active_set(params) if act is None else act
        with torch.no_grad():
            total, _ = self.total(params.tensors(), act, weights)
        return float(total)


def _sqdist(a, ia, b, ib):
    """|a[ia] - b[ib]|^2 for (N, 2) arrays, component-wise."""
    du = a[ia, 0] - b[ib, 0]
    dv = a[ia, 1] - b[ib, 1]
    return du * du + dv * dv


def _candidate_pairs(img_mu, img_sigma, mdl_mu, mdl_sigma, margin: float = 0.0):
    """All (i, j) with |mu_i - mu_j| <= sqrt(PAIR_CUTOFF * (s_i^2 + s_j^2)) + margin.

    Image Gaussians are bucketed by sigma (quad-tree cells come in a few
    sizes) so each bucket needs one fixed-radius tree query.
    """
    empty = np.zeros(0, dtype=np.int64)
    if len(img_mu) == 0 or len(mdl_mu) == 0:
        return empty, empty
    mdl_tree = cKDTree(mdl_mu)
    smax2 = float(np.max(mdl_sigma) ** 2)
    bucket = np.floor(np.log2(np.maximum(img_sigma, 1e-12)) * 2).astype(np.int64)
    iis, jjs = [], []
    for b in np.unique(bucket):
        sel = np.flatnonzero(bucket == b)
        radius = np.sqrt(PAIR_CUTOFF * (float(np.max(img_sigma[sel])) ** 2 + smax2)) + margin
        sdm = cKDTree(img_mu[sel]).sparse_distance_matrix(mdl_tree, radius, output_type="ndarray")
        if len(sdm):
            iis.append(sel[sdm["i"]])
            jjs.append(sdm["j"].astype(np.int64))
    if not iis:
        return empty, empty
    ii = np.concatenate(iis)
    jj = np.concatenate(jjs)
    d = np.sqrt(((img_mu[ii] - mdl_mu[jj]) ** 2).sum(1))
    ok = d <= np.sqrt(PAIR_CUTOFF * (img_sigma[ii] ** 2 + mdl_sigma[jj] ** 2)) + margin
    return ii[ok], jj[ok]


def _top_k_mask(ii, e, n_rows, k, cap=None):
    """Keep each row's k largest values; input sorted by (row, column) so ties keep the lower column.

    With ``cap`` (per-row clamp level), a row whose k largest values provably
    sum to at least its cap is left unsorted: its top-k sum saturates either
    way and none of its pairs stay live. The bound used is
    top-k sum >= (k / count) * row sum.
    """
    counts = np.bincount(ii, minlength=n_rows)
    over = counts > k
    if cap is not None and over.any():
        sums = np.bincount(ii, weights=e, minlength=n_rows)
        over &= (k / np.maximum(counts, 1)) * sums < cap
    keep = np.ones(len(ii), dtype=bool)
    if not over.any():
        return keep
    sel = np.flatnonzero(over[ii])
    order = sel[np.lexsort((-e[sel], ii[sel]))]
    rows = ii[order]
    starts = np.searchsorted(rows, rows, side="left")
    keep[order[(np.arange(len(order)) - starts) >= k]] = False
    return keep


def _front_layer(cj, cc, cen, r2, z, visible, sigma3d, cell_in_mask, n_cells):
    """Front-layer (Gaussian, cell) pairs for the rendered depth map.

    A cell's nearest depth is the minimum over Gaussians covering it within
    COVER_SIGMAS; covering Gaussians within FRONT_TOLERANCE posed sigmas of it
    form the front layer. Returns pair model indices, pair cells, pair cell centres
    and the mask cells that received any front-layer weight.
    """
    keep = np.flatnonzero(visible[cj] & cell_in_mask[cc])
    cj, cc, cen, r2 = cj[keep], cc[keep], cen[keep], r2[keep]
    cover = r2 <= COVER_SIGMAS ** 2
    zmin = np.full(n_cells, np.inf)
    np.minimum.at(zmin, cc[cover], z[cj[cover]])
    zc = zmin[cc]
    front = np.flatnonzero(cover & (z[cj] <= zc + FRONT_TOLERANCE * sigma3d[cj]))
    cells = np.flatnonzero(np.isfinite(zmin))
    return cj[front], cc[front], cen[front], cells


def _stencil_pairs(uv, sig, grid, downsample):
    """(model, cell, cell centre, r^2 / sigma^2) for cells within STENCIL_SIGMAS sigma of each mean."""
    h, w = grid
    if len(sig) == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros((0, 2)), np.zeros(0)
    off = 0.5 * (downsample - 1)
    cu = (uv[:, 0] - off) / downsample
    cv = (uv[:, 1] - off) / downsample
    rad = np.minimum(np.ceil(STENCIL_SIGMAS * sig / downsample).astype(np.int64), max(h, w))
    js, cs, xs, ys, rs = [], [], [], [], []
    for r in np.unique(rad):
        sel = np.flatnonzero(rad == r)
        du, dv = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
        disc = du ** 2 + dv ** 2 <= (r + 1) ** 2
        du, dv = du[disc], dv[disc]
        u = np.rint(cu[sel]).astype(np.int64)[:, None] + du[None]
        v = np.rint(cv[sel]).astype(np.int64)[:, None] + dv[None]
        x = u * downsample + off
        y = v * downsample + off
        r2 = ((x - uv[sel, 0:1]) ** 2 + (y - uv[sel, 1:2]) ** 2) / sig[sel, None] ** 2
        ok = (u >= 0) & (u < w) & (v >= 0) & (v < h) & (r2 <= STENCIL_SIGMAS ** 2)
        js.append(np.broadcast_to(sel[:, None], u.shape)[ok])
        cs.append((v * w + u)[ok])
        xs.append(x[ok])
        ys.append(y[ok])
        rs.append(r2[ok])
    xy = np.stack([np.concatenate(xs), np.concatenate(ys)], axis=1).astype(np.float64)
    return np.concatenate(js), np.concatenate(cs), xy, np.concatenate(rs)
