"""Patch-based stochastic allocation.

The core loop: candidate (kernel) pixels are drawn by generalized rejection
sampling over all transitions at once, one core is drawn uniformly among them,
a patch is grown around it and committed, the effective global rate is updated
from the remaining targets, and the state density p(y|u) is periodically
re-estimated on the not-yet-allocated pixels. Rank-based pruning baselines are
provided for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import DENSITY_FLOOR, TransitionModel
from .density import fit_binned_kde, terrell_bandwidth
from .features import FeatureSpace
from .raster import CATEGORICAL, RasterGrid, GridDimensionError

# consecutive empty candidate sweeps tolerated while targets remain; a genuine
# all-zero probability state still terminates immediately
MAX_EMPTY_SWEEPS = 50


@dataclass(frozen=True)
class PatchParams:
    """Patch shape controls: lognormal area distribution and elongation."""

    mean_area: float = 1.0
    area_variance: float = 0.0
    elongation: float = 1.0
    connectivity: int = 4

    def __post_init__(self):
        if self.mean_area < 1:
            raise ValueError("mean_area must be >= 1")
        if self.area_variance < 0:
            raise ValueError("area_variance must be >= 0")
        if self.elongation < 1:
            raise ValueError("elongation must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass(frozen=True)
class PruningConfig:
    strategy: str = "none"  # none | dinamica_rank | lcm_rank | unbiased_sample
    F: float = 10.0

    def __post_init__(self):
        if self.strategy not in ("none", "dinamica_rank", "lcm_rank", "unbiased_sample"):
            raise ValueError(f"unknown pruning strategy {self.strategy!r}")
        if self.F < 1:
            raise ValueError("pruning factor F must be >= 1")


@dataclass
class AllocationState:
    """Mutable bookkeeping for one initial state during an allocation run."""

    unallocated: np.ndarray          # bool over the state-u pixel list
    remaining_target: np.ndarray     # per-transition pixel counts left
    allocated_since_refresh: int = 0
    refresh_threshold: float = 0.05
    drawn_areas: list = field(default_factory=list)


def draw_kernel_pixels(probs: np.ndarray, rng: np.random.Generator
                       ) -> tuple[np.ndarray, np.ndarray]:
    """One rejection-sampling sweep over all pixels and transitions.

    probs: (N, V) scaled interval lengths per pixel and candidate transition;
    each row must sum to <= 1 (remainder = no transition). Returns candidate
    row indices and the column (transition) each one drew.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    cum = np.cumsum(probs, axis=1)
    total = cum[:, -1]
    if np.any(total > 1.0 + 1e-9):
        raise ValueError("scaled probabilities sum above 1 for some pixel")
    r = rng.random(len(probs))
    hit = r < total
    idx = np.nonzero(hit)[0]
    vcol = np.argmax(r[idx, None] < cum[idx], axis=1)
    return idx, vcol


def draw_patch_area(params: PatchParams, rng: np.random.Generator,
                    remaining: int) -> int:
    """Draw a patch area from the lognormal fitted to (mean, variance),
    truncated to the remaining target; always >= 1."""
    if remaining < 1:
        return 0
    if params.area_variance <= 0:
        area = int(round(params.mean_area))
    else:
        s2 = math.log(1.0 + params.area_variance / params.mean_area ** 2)
        mu = math.log(params.mean_area) - 0.5 * s2
        area = int(round(rng.lognormal(mu, math.sqrt(s2))))
    return max(1, min(area, remaining))


_NEIGHBORS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_NEIGHBORS_8 = _NEIGHBORS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def grow_patch(available: np.ndarray, core: tuple[int, int], area: int,
               params: PatchParams, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Stochastic frontier accretion around the core pixel.

    available is a 2-d bool mask of pixels that may be absorbed (state u and
    not yet allocated). Frontier pixels are drawn with weight
    exp(kappa * cos^2(phi - axis)) where axis is a per-patch random direction
    and kappa = ln(elongation). Returns a connected set containing the core;
    a fully blocked core yields just the core.
    """
    h, w = available.shape
    neighbors = _NEIGHBORS_4 if params.connectivity == 4 else _NEIGHBORS_8
    kappa = math.log(params.elongation)
    axis = rng.uniform(0.0, math.pi)
    patch = [core]
    in_patch = {core}
    frontier: list[tuple[int, int]] = []
    fweights: list[float] = []
    fset: set[tuple[int, int]] = set()

    def weight(cell):
        if kappa == 0.0:
            return 1.0
        dr = cell[0] - core[0]
        dc = cell[1] - core[1]
        if dr == 0 and dc == 0:
            return 1.0
        phi = math.atan2(dr, dc)
        c = math.cos(phi - axis)
        return math.exp(kappa * c * c)

    def push_neighbors(cell):
        for dr, dc in neighbors:
            r, c = cell[0] + dr, cell[1] + dc
            if 0 <= r < h and 0 <= c < w and available[r, c] \
                    and (r, c) not in in_patch and (r, c) not in fset:
                frontier.append((r, c))
                fweights.append(weight((r, c)))
                fset.add((r, c))

    push_neighbors(core)
    while len(patch) < area and frontier:
        wsum = np.cumsum(fweights)
        pick = int(np.searchsorted(wsum, rng.uniform(0.0, wsum[-1]), side="right"))
        pick = min(pick, len(frontier) - 1)
        cell = frontier.pop(pick)
        fweights.pop(pick)
        fset.discard(cell)
        patch.append(cell)
        in_patch.add(cell)
        push_neighbors(cell)
    return patch


def _density_uv_at(model: TransitionModel, features: FeatureSpace,
                   u: int, v: int, flat_idx: np.ndarray) -> np.ndarray:
    """p(y|u,v) at the given flat pixel indices, in the state's whitened space."""
    if (u, v) not in model.density_uv or u not in model.whitening:
        raise ValueError(
            f"model has no fitted density for transition {u}->{v}")
    zw = model.whitening[u].transform(features.values[flat_idx])
    return model.density_uv[(u, v)].estimate(zw)


def prune_candidates(model: TransitionModel, map_in: RasterGrid,
                     features: FeatureSpace, u: int, v: int, target_count: int,
                     config: PruningConfig, rng: np.random.Generator) -> np.ndarray:
    """Pre-select core candidates for u->v among map_in's state-u pixels.

    dinamica_rank: top F*target by P(v|u,y); lcm_rank: top target by p(y|u,v);
    unbiased_sample: target pixels drawn without replacement with weights
    proportional to p(y|u,v). Returns flat pixel indices.
    """
    if target_count < 0:
        raise ValueError("target_count must be >= 0")
    if target_count == 0:
        return np.empty(0, dtype=np.int64)
    flat_u = np.nonzero(((map_in.values == u) & ~map_in.mask).reshape(-1))[0]
    if config.strategy == "none":
        return flat_u
    if config.strategy == "dinamica_rank":
        probs = model.prob_maps[(u, v)].values.reshape(-1)[flat_u]
        keep = min(int(round(config.F * target_count)), len(flat_u))
        # stable sort on (-p, index) gives deterministic tie-breaking
        order = np.lexsort((flat_u, -probs))
        return np.sort(flat_u[order[:keep]])
    dens = _density_uv_at(model, features, u, v, flat_u)
    keep = min(target_count, len(flat_u))
    if config.strategy == "lcm_rank":
        order = np.lexsort((flat_u, -dens))
        return np.sort(flat_u[order[:keep]])
    # unbiased_sample: Efraimidis-Spirakis keys give a weight-proportional
    # sample without replacement
    pos = dens > 0
    keep = min(keep, int(pos.sum()))
    keys = np.full(len(flat_u), -np.inf)
    keys[pos] = np.log(rng.random(int(pos.sum()))) / dens[pos]
    order = np.argsort(-keys, kind="stable")
    return np.sort(flat_u[order[:keep]])


def lcm_style_allocate(model: TransitionModel, map_in: RasterGrid,
                       features: FeatureSpace, u: int, v: int,
                       target_count: int) -> RasterGrid:
    """Deterministic rank-and-commit allocation: the top target_count state-u
    pixels by p(y|u,v) transit to v. Repeat runs are bit-identical."""
    chosen = prune_candidates(model, map_in, features, u, v, target_count,
                              PruningConfig("lcm_rank"),
                              np.random.default_rng(0))
    out = map_in.values.copy()
    flat = out.reshape(-1)
    flat[chosen] = v
    return map_in.with_values(out)


def allocate(model: TransitionModel, map_in: RasterGrid, features: FeatureSpace,
             patch_params: dict[tuple[int, int], PatchParams],
             pruning: PruningConfig | None = None, seed: int = 0,
             refresh_threshold: float = 0.05, core_draw: str = "auto",
             return_info: bool = False):
    """Simulate one time step; returns the new categorical map.

    patch_params maps each (u, v) transition to its PatchParams. The loop per
    initial state: sweep-draw kernel pixels, pick one core uniformly, grow and
    commit its patch, update the effective rate from remaining targets, and
    refresh p(y|u) once the allocated fraction since the last refresh exceeds
    refresh_threshold (requires fitted densities; skipped otherwise).
    """
    if map_in.kind != CATEGORICAL:
        raise ValueError("allocation needs a categorical input map")
    for (u, v) in model.transitions:
        pm = model.prob_maps[(u, v)]
        if pm.values.shape != map_in.values.shape:
            raise GridDimensionError("model probability maps not aligned to map_in")
    if features.values.shape[0] != map_in.values.size:
        raise GridDimensionError("features not row-aligned with map_in")
    pruning = pruning or PruningConfig()
    if pruning.strategy == "lcm_rank":
        raise ValueError("lcm_rank is a direct allocation; use lcm_style_allocate")
    rng = np.random.default_rng(seed)
    out = map_in.values.copy()
    shape = out.shape
    flat_out = out.reshape(-1)
    info = {"transitions": {}, "refreshes": 0}

    for u in sorted({uu for uu, _ in model.transitions}):
        vs = sorted(v for uu, v in model.transitions if uu == u)
        in_u = (map_in.values == u) & ~map_in.mask
        flat_u = np.nonzero(in_u.reshape(-1))[0]
        n0 = len(flat_u)
        if n0 == 0:
            continue
        probs0 = np.column_stack(
            [model.prob_maps[(u, v)].values.reshape(-1)[flat_u] for v in vs])
        means0 = probs0.mean(axis=0)
        targets = np.round(means0 * n0).astype(np.int64)
        if not targets.any():
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(means0 > 0, probs0 / means0, 0.0)
        mean_areas = np.array([max(1.0, patch_params[(u, v)].mean_area) for v in vs])

        core_ok = np.ones(n0, dtype=bool)
        if pruning.strategy in ("dinamica_rank", "unbiased_sample"):
            core_ok[:] = False
            for j, v in enumerate(vs):
                count = (int(targets[j]) if pruning.strategy == "dinamica_rank"
                         else max(1, int(round(targets[j] / mean_areas[j]))))
                sel = prune_candidates(model, map_in, features, u, v,
                                       count, pruning, rng)
                core_ok[np.isin(flat_u, sel)] = True

        state = AllocationState(np.ones(n0, dtype=bool), targets.copy(),
                                refresh_threshold=refresh_threshold)
        avail = in_u.copy()
        can_refresh = (u in model.whitening and u in model.density_u
                       and all((u, v) in model.density_uv for v in vs))
        _run_state_loop(state, vs, flat_u, ratio, mean_areas, avail, flat_out,
                        shape, patch_params, u, model, features, rng,
                        core_ok, can_refresh, core_draw, info)
        info["transitions"].update(
            {(u, v): {"target": int(targets[j]),
                      "allocated": int(targets[j] - state.remaining_target[j]),
                      "drawn_areas": [a for vv, a in state.drawn_areas if vv == v]}
             for j, v in enumerate(vs)})

    grid = map_in.with_values(out)
    return (grid, info) if return_info else grid


def _current_probs(ratio, p_eff):
    p = np.clip(ratio * p_eff, 0.0, 1.0)
    tot = p.sum(axis=1)
    over = tot > 1.0
    if over.any():
        p[over] /= tot[over, None]
    return p


def _run_state_loop(state, vs, flat_u, ratio, mean_areas, avail, flat_out,
                    shape, patch_params, u, model, features, rng,
                    core_ok, can_refresh, core_draw, info):
    n0 = len(flat_u)
    rows = flat_u // shape[1]
    cols = flat_u % shape[1]
    expected_patches = float(np.sum(state.remaining_target / mean_areas))
    use_sweep = core_draw == "sweep" or (
        core_draw == "auto" and n0 * max(expected_patches, 1.0) <= 2e8)
    empty_streak = 0
    ratio = ratio.copy()
    # poisson-mode caches, rebuilt periodically
    cache = None
    since_rebuild = 0
    # each rebuild costs O(n0), so space rebuilds out when many patches are
    # expected; staleness between rebuilds is absorbed by the rejection bound
    rebuild_every = max(32, n0 // 1000)

    while True:
        live = state.remaining_target >= 1
        if not live.any():
            break
        n_un = int(state.unallocated.sum())
        if n_un == 0:
            break
        p_eff = np.where(live, state.remaining_target / n_un, 0.0)
        e_areas = np.minimum(mean_areas, np.maximum(state.remaining_target, 1.0))

        if use_sweep:
            probs = _current_probs(ratio, p_eff) / e_areas
            probs[~state.unallocated] = 0.0
            probs[~core_ok] = 0.0
            idx, vcol = draw_kernel_pixels(probs, rng)
            if len(idx) == 0:
                empty_streak += 1
                if empty_streak > MAX_EMPTY_SWEEPS or probs.sum() == 0.0:
                    break
                continue
            empty_streak = 0
            k = int(rng.integers(len(idx)))
            core_row = int(idx[k])
            j = int(vcol[k])
        else:
            if cache is None or since_rebuild >= rebuild_every \
                    or not np.array_equal(e_areas, cache["e"]):
                w = _current_probs(ratio, p_eff) / e_areas
                w[~state.unallocated] = 0.0
                w[~core_ok] = 0.0
                # s_v tracks sum(ratio/e) over live cores so the total rate can
                # follow p_eff between rebuilds without an O(N) pass
                rr = ratio / e_areas
                rr[~state.unallocated] = 0.0
                rr[~core_ok] = 0.0
                cache = {"w": w, "cum": np.cumsum(w.sum(axis=1)),
                         "p_eff": p_eff.copy(), "e": e_areas.copy(),
                         "rr": rr, "s": rr.sum(axis=0)}
                since_rebuild = 0
            since_rebuild += 1
            lam = float(p_eff @ cache["s"])
            if lam <= 0.0:
                break
            if rng.random() < math.exp(-lam):
                empty_streak += 1
                if empty_streak > MAX_EMPTY_SWEEPS:
                    break
                continue
            empty_streak = 0
            # rejection sampling against the cached weight table; the bound
            # covers drift in the effective rate since the rebuild
            bound = float(np.max(np.divide(
                p_eff, cache["p_eff"],
                out=np.ones_like(p_eff), where=cache["p_eff"] > 0)))
            bound = max(bound, 1.0)
            total = cache["cum"][-1]
            core_row = -1
            wrow = None
            for _ in range(10000):
                i = int(np.searchsorted(cache["cum"],
                                        rng.uniform(0.0, total), side="right"))
                i = min(i, n0 - 1)
                if not state.unallocated[i]:
                    continue
                wi_cache = cache["w"][i].sum()
                if wi_cache <= 0:
                    continue
                wrow = _current_probs(ratio[i:i + 1], p_eff)[0] / e_areas
                wi_now = wrow.sum()
                if rng.random() * wi_cache * bound <= wi_now:
                    core_row = i
                    break
            if core_row < 0:
                cache = None
                continue
            j = int(rng.choice(len(vs), p=wrow / wrow.sum())) \
                if len(vs) > 1 else 0

        v = vs[j]
        params = patch_params[(u, v)]
        area = draw_patch_area(params, rng, int(state.remaining_target[j]))
        if area == 0:
            continue
        state.drawn_areas.append((v, area))
        core_rc = (int(rows[core_row]), int(cols[core_row]))
        patch = grow_patch(avail, core_rc, area, params, rng)
        for (r, c) in patch:
            flat_out[r * shape[1] + c] = v
            avail[r, c] = False
        # mark patch members unallocated=False via their row positions
        patch_flat = np.array([r * shape[1] + c for (r, c) in patch])
        positions = np.searchsorted(flat_u, patch_flat)
        state.unallocated[positions] = False
        state.remaining_target[j] -= len(patch)
        state.allocated_since_refresh += len(patch)
        if cache is not None:
            cache["s"] -= cache["rr"][positions].sum(axis=0)
            cache["rr"][positions] = 0.0

        if can_refresh and state.allocated_since_refresh / n0 > state.refresh_threshold:
            _refresh_ratio(state, vs, flat_u, ratio, u, model, features)
            info["refreshes"] += 1
            state.allocated_since_refresh = 0
            cache = None


def _refresh_ratio(state, vs, flat_u, ratio, u, model, features):
    """Re-estimate p(y|u) on the unallocated pixels and rebuild the Bayes
    ratio p(y|u,v)/p(y|u) for them (steps 5-6 of the loop)."""
    alive = state.unallocated
    if alive.sum() < 2:
        return
    zw = model.whitening[u].transform(features.values[flat_u[alive]])
    cfg = model.kde_config
    h = cfg.bandwidth_override or terrell_bandwidth(len(zw), zw.shape[1], cfg.kernel)
    kde_u = fit_binned_kde(zw, h, cfg.q, cfg.kernel)
    p_u = kde_u.estimate(zw)
    for j, v in enumerate(vs):
        p_uv = model.density_uv[(u, v)].estimate(zw)
        # the ratio is a relative weight, not a probability: no clamping here
        # (the caller caps p_eff * ratio at 1)
        ratio[alive, j] = np.where(p_u > DENSITY_FLOOR, p_uv / np.maximum(p_u, DENSITY_FLOOR), 0.0)
