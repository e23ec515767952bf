"""Synthetic brain-like PET/MR phantoms and a 2-D emission tomography pipeline.

Each case is a short stack of adjacent axial slices. Activity is projected
with a parallel-beam line-integral operator, thinned by Poisson sampling of
``expected / drf`` and reconstructed with OSEM, then rescaled by the dose
reduction factor so every reconstruction shares activity units.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import dkt

log = logging.getLogger(__name__)

REGIONS = ("background", "gray_matter", "white_matter", "thalamus", "putamen", "caudate")
NUCLEI = ("thalamus", "putamen", "caudate")

N_ANGLES = 60
N_BINS = 95
DEFAULT_SIZE = 64
DEFAULT_DEPTH = 5
# expected standard-dose counts per slice
DEFAULT_COUNTS = 5e6


class DomainError(ValueError):
    pass


@dataclass
class PhantomCase:
    """One synthetic subject: label volume, activity and two MR contrasts."""

    labels: np.ndarray
    activity: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    seed: int
    std: Optional[np.ndarray] = None
    low_dose: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    @property
    def masks(self) -> dict[str, np.ndarray]:
        return {name: self.labels == k for k, name in enumerate(REGIONS)}


def _rotate(u, v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return c * u + s * v, -s * u + c * v


def _ellipse(u, v, cu, cv, ru, rv, angle=0.0):
    du, dv = _rotate(u - cu, v - cv, angle)
    return (du / ru) ** 2 + (dv / rv) ** 2 <= 1.0


def _smooth_field(rng, u, v, amplitude):
    coef = rng.normal(scale=amplitude, size=5)
    return 1.0 + coef[0] * u + coef[1] * v + coef[2] * u * v + coef[3] * (u * u - 0.5) + coef[4] * (v * v - 0.5)


def generate_phantom(seed: int, size: int = DEFAULT_SIZE, depth: int = DEFAULT_DEPTH) -> PhantomCase:
    """Randomised ellipse phantom with cortex, white matter and three paired nuclei.

    Activity carries a smooth PET-only uptake gradient that the MR contrasts do
    not show. MR contrasts are monotone remappings of tissue class with mild
    multiplicative bias fields and small Gaussian noise.
    """
    if size < 32:
        raise ValueError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    sup = 2
    grid = (np.arange(size * sup) + 0.5) / (size * sup) * 2.0 - 1.0
    v, u = np.meshgrid(grid, grid, indexing="ij")

    head_a = rng.uniform(0.70, 0.80)
    head_b = rng.uniform(0.80, 0.90)
    tilt = rng.uniform(-0.15, 0.15)
    cu, cv = rng.uniform(-0.03, 0.03, size=2)
    lobes = int(rng.integers(5, 10))
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wm_depth = rng.uniform(0.74, 0.80)
    nuclei_jitter = rng.uniform(-0.02, 0.02, size=(3, 2))
    nuclei_scale = rng.uniform(0.9, 1.1, size=3)

    act_level = {
        "gray_matter": 4.0 * rng.uniform(0.9, 1.1),
        "white_matter": 1.2 * rng.uniform(0.85, 1.15),
        "thalamus": 3.6 * rng.uniform(0.85, 1.15),
        "putamen": 4.8 * rng.uniform(0.85, 1.15),
        "caudate": 4.4 * rng.uniform(0.85, 1.15),
    }
    t1_level = {"gray_matter": 0.55, "white_matter": 0.85, "thalamus": 0.72, "putamen": 0.66, "caudate": 0.62}
    t2_level = {"gray_matter": 0.75, "white_matter": 0.45, "thalamus": 0.55, "putamen": 0.50, "caudate": 0.60}
    grad_dir = rng.uniform(0, 2 * np.pi)
    grad_strength = rng.uniform(0.15, 0.35)
    t1_scale = rng.uniform(0.95, 1.05)
    t2_scale = rng.uniform(0.95, 1.05)
    t1_bias = _smooth_field(rng, u, v, 0.03)
    t2_bias = _smooth_field(rng, u, v, 0.03)

    labels_vol, act_vol, t1_vol, t2_vol = [], [], [], []
    for k in range(depth):
        dz = (k - (depth - 1) / 2.0) * 0.06
        zscale = np.sqrt(max(1.0 - dz * dz * 4.0, 0.5))
        uu, vv = _rotate(u - cu, v - cv, tilt)
        rho = np.sqrt((uu / (head_a * zscale)) ** 2 + (vv / (head_b * zscale)) ** 2)
        phi = np.arctan2(vv, uu)
        boundary = wm_depth + 0.06 * np.sin(lobes * phi + phase[0] + 3 * dz) + 0.03 * np.sin(
            (lobes + 3) * phi + phase[1]
        )
        lab = np.zeros(u.shape, dtype=np.int64)
        lab[rho <= 1.0] = REGIONS.index("gray_matter")
        lab[rho <= boundary] = REGIONS.index("white_matter")
        nuclei = (
            ("thalamus", (0.11, 0.06), (0.085, 0.12)),
            ("putamen", (0.30, -0.04), (0.06, 0.13)),
            ("caudate", (0.16, -0.24), (0.05, 0.07)),
        )
        for idx, (name, (nu, nv), (ru, rv)) in enumerate(nuclei):
            sc = nuclei_scale[idx] * zscale
            ju, jv = nuclei_jitter[idx]
            for side in (-1.0, 1.0):
                inside = _ellipse(uu, vv, side * nu + ju, nv + jv, ru * sc, rv * sc)
                lab[inside & (rho <= boundary)] = REGIONS.index(name)

        act = np.zeros(u.shape)
        t1 = np.zeros(u.shape)
        t2 = np.zeros(u.shape)
        for name in REGIONS[1:]:
            sel = lab == REGIONS.index(name)
            act[sel] = act_level[name]
            t1[sel] = t1_level[name]
            t2[sel] = t2_level[name]
        act *= 1.0 + grad_strength * (np.cos(grad_dir) * u + np.sin(grad_dir) * v)
        t1 *= t1_scale * t1_bias
        t2 *= t2_scale * t2_bias

        def down(a):
            return a.reshape(size, sup, size, sup).mean(axis=(1, 3))

        centre = lab[sup // 2 :: sup, sup // 2 :: sup]
        labels_vol.append(centre)
        act_vol.append(np.clip(down(act), 0.0, None))
        t1_vol.append(down(t1))
        t2_vol.append(down(t2))

    t1_arr = np.stack(t1_vol) + rng.normal(scale=0.01, size=(depth, size, size))
    t2_arr = np.stack(t2_vol) + rng.normal(scale=0.01, size=(depth, size, size))
    return PhantomCase(
        labels=np.stack(labels_vol),
        activity=np.stack(act_vol),
        t1=t1_arr,
        t2=t2_arr,
        seed=seed,
    )


# -- projector ----------------------------------------------------------------
@dataclass
class Sinogram:
    data: np.ndarray
    image_shape: tuple[int, int]
    drf: float = 1.0

    @property
    def n_angles(self) -> int:
        return self.data.shape[-2]

    @property
    def n_bins(self) -> int:
        return self.data.shape[-1]


@functools.lru_cache(maxsize=8)
def projector(height: int, width: int, n_angles: int = N_ANGLES, n_bins: int = N_BINS) -> sp.csr_matrix:
    """Parallel-beam line-integral matrix with bilinear sampling.

    Rows are ordered (angle, bin). Angle 0 integrates down each image column;
    bins and ray samples are spaced one pixel apart around the image centre.
    """
    theta = np.arange(n_angles) * np.pi / n_angles
    t = np.arange(n_bins) - (n_bins - 1) / 2.0
    n_samples = max(n_bins, int(np.ceil(np.hypot(height, width))) + 1)
    if (n_samples - n_bins) % 2:
        n_samples += 1
    s = np.arange(n_samples) - (n_samples - 1) / 2.0
    cos = np.cos(theta)[:, None, None]
    sin = np.sin(theta)[:, None, None]
    x = t[None, :, None] * cos - s[None, None, :] * sin
    y = t[None, :, None] * sin + s[None, None, :] * cos
    col = x + (width - 1) / 2.0
    row = y + (height - 1) / 2.0
    c0 = np.floor(col).astype(np.int64)
    r0 = np.floor(row).astype(np.int64)
    fc = col - c0
    fr = row - r0
    ray = np.broadcast_to(
        (np.arange(n_angles)[:, None, None] * n_bins + np.arange(n_bins)[None, :, None]), x.shape
    )
    rows, cols, vals = [], [], []
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width) & (wgt > 0)
        rows.append(ray[ok])
        cols.append(rr[ok] * width + cc[ok])
        vals.append(wgt[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_angles * n_bins, height * width),
    ).tocsr()
    mat.sum_duplicates()
    return mat


def radon_forward(image, n_angles: int = N_ANGLES, n_bins: int = N_BINS) -> Sinogram:
    img = np.asarray(image, dtype=np.float64)
    if np.any(img < 0):
        raise DomainError("activity image must be non-negative")
    h, w = img.shape[-2:]
    a = projector(h, w, n_angles, n_bins)
    flat = img.reshape(-1, h * w)
    data = (a @ flat.T).T.reshape(img.shape[:-2] + (n_angles, n_bins))
    return Sinogram(data, (h, w))


def radon_adjoint(sino: Sinogram) -> np.ndarray:
    h, w = sino.image_shape
    a = projector(h, w, sino.n_angles, sino.n_bins)
    flat = sino.data.reshape(-1, sino.n_angles * sino.n_bins)
    return (a.T @ flat.T).T.reshape(sino.data.shape[:-2] + (h, w))


def poisson_sample(sino: Sinogram, drf: float, seed) -> Sinogram:
    """Counts ~ Poisson(expected / drf)."""
    if drf < 1:
        raise DomainError(f"dose reduction factor must be >= 1, got {drf}")
    if np.any(sino.data < 0):
        raise DomainError("expected counts must be non-negative")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(sino.data / drf).astype(np.float64)
    return Sinogram(counts, sino.image_shape, drf)


def angle_subsets(n_angles: int, n_bins: int, subsets: int) -> list[np.ndarray]:
    """Interleaved angle subsets as sinogram row indices."""
    if subsets < 1 or n_angles % subsets:
        raise ValueError(f"{subsets} subsets do not divide {n_angles} angles")
    out = []
    for k in range(subsets):
        angles = np.arange(k, n_angles, subsets)
        out.append((angles[:, None] * n_bins + np.arange(n_bins)[None, :]).ravel())
    return out


def osem(
    a,
    y,
    iters: int,
    subset_rows: Optional[Sequence[np.ndarray]] = None,
    x0=None,
    history: Optional[list] = None,
) -> np.ndarray:
    """Multiplicative EM updates ``x <- x * A_S^T(y_S / A_S x) / A_S^T 1`` over subsets.

    ``y`` may hold several sinograms as columns. Pixels with zero sensitivity
    are frozen at zero. When ``history`` is a list the iterate after each full
    iteration is appended to it.
    """
    a = sp.csr_matrix(a) if not sp.issparse(a) else a.tocsr()
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if np.any(y < 0):
        raise DomainError("counts must be non-negative")
    n_pix = a.shape[1]
    if subset_rows is None:
        subset_rows = [np.arange(a.shape[0])]
    x = np.ones((n_pix, y.shape[1])) if x0 is None else np.array(x0, dtype=np.float64).reshape(n_pix, -1)
    blocks = [(a[rows], y[rows]) for rows in subset_rows]
    sens = [np.asarray(blk.sum(axis=0)).ravel() for blk, _ in blocks]
    dead = np.zeros(n_pix, dtype=bool)
    for s_k in sens:
        dead |= s_k <= 0
    if dead.any():
        warnings.warn(f"{int(dead.sum())} pixels have zero sensitivity and are frozen at 0", RuntimeWarning)
        x[dead] = 0.0
    for _ in range(iters):
        for (blk, yk), s_k in zip(blocks, sens):
            proj = blk @ x
            ratio = np.divide(yk, proj, out=np.zeros_like(proj), where=proj > 0)
            back = blk.T @ ratio
            safe = np.where(s_k > 0, s_k, 1.0)[:, None]
            x = np.where(dead[:, None], 0.0, x * back / safe)
        if history is not None:
            history.append(x[:, 0].copy() if squeeze else x.copy())
    return x[:, 0] if squeeze else x


def poisson_loglik(a, y, x) -> float:
    """Poisson log-likelihood up to the ``log y!`` constant."""
    proj = np.asarray(a @ x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logs = np.where(y > 0, np.log(np.maximum(proj, 1e-300)), 0.0)
    return float(np.sum(y * logs - proj))


def mlem_reconstruct(counts: Sinogram, iters: int = 21, subsets: int = 3, history: Optional[list] = None) -> np.ndarray:
    """OSEM reconstruction of one or more stacked sinograms, rescaled by ``counts.drf``."""
    h, w = counts.image_shape
    a = projector(h, w, counts.n_angles, counts.n_bins)
    rows = angle_subsets(counts.n_angles, counts.n_bins, subsets)
    y = counts.data.reshape(-1, counts.n_angles * counts.n_bins).T
    x = osem(a, y, iters, rows, history=history)
    return (x.T * counts.drf).reshape(counts.data.shape[:-2] + (h, w))


# -- dataset ------------------------------------------------------------------
def simulate_case(
    case: PhantomCase,
    drfs: Sequence[int],
    seed: int,
    counts: float = DEFAULT_COUNTS,
    n_angles: int = N_ANGLES,
    n_bins: int = N_BINS,
    iters: int = 21,
    subsets: int = 3,
) -> PhantomCase:
    """Fill ``case.std`` (DRF 1) and ``case.low_dose`` with OSEM reconstructions."""
    expected = radon_forward(case.activity, n_angles, n_bins)
    per_slice = expected.data.reshape(expected.data.shape[0], -1).sum(axis=1)
    calib = counts / per_slice.mean()
    expected.data = expected.data * calib
    levels = [1] + [int(d) for d in drfs if int(d) != 1]
    sinos = []
    for drf in levels:
        ss = np.random.SeedSequence([seed, case.seed, drf, 0xC0DE])
        s = poisson_sample(expected, drf, ss)
        sinos.append(s.data * drf)
    stacked = Sinogram(np.concatenate(sinos, axis=0), expected.image_shape, 1.0)
    recon = mlem_reconstruct(stacked, iters, subsets) / calib
    depth = case.activity.shape[0]
    for k, drf in enumerate(levels):
        img = recon[k * depth : (k + 1) * depth]
        if drf == 1:
            case.std = img
        if drf in drfs:
            case.low_dose[drf] = img
    return case


def make_dataset(
    n_cases: int,
    drf_list: Sequence[int],
    seed: int,
    out_dir,
    size: int = DEFAULT_SIZE,
    depth: int = DEFAULT_DEPTH,
    n_folds: int = 5,
    counts: float = DEFAULT_COUNTS,
    n_angles: int = N_ANGLES,
    n_bins: int = N_BINS,
    iters: int = 21,
    subsets: int = 3,
) -> dict:
    """Generate ``n_cases`` phantoms with reconstructions and write them to ``out_dir``."""
    from .trainer import cross_validation_split

    drfs = sorted({int(d) for d in drf_list})
    if not drfs:
        raise ValueError("drf_list must not be empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n_cases):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        case = generate_phantom(case_seed, size, depth)
        simulate_case(case, drfs, seed, counts, n_angles, n_bins, iters, subsets)
        cid = f"{i:03d}"
        cdir = out / f"case_{cid}"
        cdir.mkdir(exist_ok=True)
        dkt.save(cdir / "masks.dkt1", case.labels.astype(np.float32))
        dkt.save(cdir / "activity.dkt1", case.activity.astype(np.float32))
        dkt.save(cdir / "t1.dkt1", case.t1.astype(np.float32))
        dkt.save(cdir / "t2.dkt1", case.t2.astype(np.float32))
        dkt.save(cdir / "std.dkt1", case.std.astype(np.float32))
        for drf in drfs:
            dkt.save(cdir / f"ld_x{drf}.dkt1", case.low_dose[drf].astype(np.float32))
        cases.append({"id": cid, "dir": f"case_{cid}", "seed": case_seed})
        log.info("case %s written", cid)
    folds = cross_validation_split(n_cases, n_folds, seed)
    manifest = {
        "format": "deepkernel-dataset/1",
        "seed": seed,
        "size": size,
        "depth": depth,
        "drfs": drfs,
        "regions": list(REGIONS),
        "cases": cases,
        "folds": folds,
        "projector": {
            "n_angles": n_angles,
            "n_bins": n_bins,
            "iters": iters,
            "subsets": subsets,
            "counts_per_slice": counts,
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    with open(path) as fh:
        return json.load(fh)


def load_case(data_dir, entry: dict, drfs: Optional[Sequence[int]] = None) -> PhantomCase:
    cdir = Path(data_dir) / entry["dir"]
    case = PhantomCase(
        labels=dkt.load(cdir / "masks.dkt1").astype(np.int64),
        activity=dkt.load(cdir / "activity.dkt1"),
        t1=dkt.load(cdir / "t1.dkt1"),
        t2=dkt.load(cdir / "t2.dkt1"),
        seed=entry["seed"],
        std=dkt.load(cdir / "std.dkt1"),
    )
    for drf in drfs or []:
        path = cdir / f"ld_x{int(drf)}.dkt1"
        if path.exists():
            case.low_dose[int(drf)] = dkt.load(path)
    return case


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def directory_digest(root) -> str:
    """SHA-256 over every file under ``root`` in sorted path order."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(os.fsencode(str(path.relative_to(root))))
        h.update(file_digest(path).encode())
    return h.hexdigest()
