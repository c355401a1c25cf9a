//! Fuzzy connectedness: per-link affinities, max-min (strongest path)
//! propagation from a single seed, and thresholding to an object.
//!
//! The strength of a path is its weakest link; the connectedness of a voxel
//! is the strength of its strongest path from the seed. Propagation is the
//! widest-path variant of Dijkstra: pop the voxel with the largest tentative
//! strength, relax its neighbors with `min(popped, link affinity)`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Adjacency, BoundingBox, Grid, VoxelCoord};
use crate::labeling::{component_containing, connected_components, LabelMode};
use crate::volume::{crop, threshold, Mask, Volume};

/// HU threshold for the bone pre-mask used by seed selection and σ estimation.
pub const BONE_HU: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityParams {
    pub sigma: f64,
    pub adjacency: Adjacency,
}

impl AffinityParams {
    pub fn new(sigma: f64, adjacency: Adjacency) -> Result<Self> {
        check_sigma(sigma)?;
        if adjacency.is_planar() {
            return Err(Error::invalid("affinity adjacency must be 6, 18 or 26"));
        }
        Ok(Self { sigma, adjacency })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// How link affinities are derived from the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityMode {
    /// Gaussian of the mean gradient magnitude at the two voxels.
    GradientMagnitude,
    /// Gaussian of the intensity gradient along the link, |I(p) - I(q)| / |p - q|.
    Directional,
}

impl std::str::FromStr for AffinityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient-magnitude" => Ok(AffinityMode::GradientMagnitude),
            "directional" => Ok(AffinityMode::Directional),
            _ => Err(Error::invalid(format!("unknown affinity mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for AffinityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AffinityMode::GradientMagnitude => "gradient-magnitude",
            AffinityMode::Directional => "directional",
        })
    }
}

#[inline]
fn gaussian(m: f64, sigma: f64) -> f64 {
    (-(m * m) / (2.0 * sigma * sigma)).exp()
}

/// `exp(-m² / 2σ²)` with `m` the mean of the two gradient magnitudes.
pub fn affinity(gp: f64, gq: f64, params: &AffinityParams) -> Result<f64> {
    check_sigma(params.sigma)?;
    if gp < 0.0 || gq < 0.0 {
        return Err(Error::invalid("gradient magnitudes must be nonnegative"));
    }
    Ok(gaussian(0.5 * (gp + gq), params.sigma))
}

/// `exp(-d² / 2σ²)` with `d = |ip - iq| / length_mm`.
pub fn directional_affinity(ip: f64, iq: f64, length_mm: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if !(length_mm > 0.0) {
        return Err(Error::invalid("link length must be positive"));
    }
    Ok(gaussian((ip - iq).abs() / length_mm, sigma))
}

/// Weakest link along a path; a single-voxel path has strength 1.
pub fn path_strength(links: &[f64]) -> f64 {
    links.iter().copied().fold(1.0, f64::min)
}

/// Median gradient magnitude over boundary voxels of `bone` (bone voxels with
/// an in-grid non-bone 6-neighbor). Falls back to the median of all nonzero
/// gradients when that median is zero or no boundary exists.
pub fn estimate_sigma(grad: &Volume, bone: &Mask) -> Result<f64> {
    if grad.dims() != bone.dims() {
        return Err(Error::DimensionMismatch("gradient and bone mask".into()));
    }
    if bone.is_empty() {
        return Err(Error::invalid("bone mask is empty"));
    }
    let grid = *bone.grid();
    let offsets = Adjacency::Six.offsets();
    let boundary: Vec<f64> = bone
        .iter_indices()
        .filter(|&i| {
            let mut any = false;
            grid.for_each_neighbor(i, &offsets, |j, _| any |= !bone.contains_index(j));
            any
        })
        .map(|i| grad.data()[i])
        .collect();
    if let Some(m) = median(boundary).filter(|&m| m > 0.0) {
        return Ok(m);
    }
    let nonzero: Vec<f64> = grad.data().iter().copied().filter(|&g| g > 0.0).collect();
    match median(nonzero) {
        Some(m) if m > 0.0 => Ok(m),
        _ => Err(Error::invalid("gradient is zero everywhere; cannot estimate sigma")),
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Intensity window for seed candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedWindow {
    /// Voxels at or above this level form the bone components.
    pub min_hu: f64,
    /// Candidates above this level are skipped when any remain below it.
    pub max_hu: f64,
    /// Prefer candidates whose in-grid 26-neighbors all lie in
    /// `[min_hu, max_hu]`.
    #[serde(default)]
    pub interior: bool,
}

impl Default for SeedWindow {
    fn default() -> Self {
        Self {
            min_hu: BONE_HU,
            max_hu: f64::INFINITY,
            interior: false,
        }
    }
}

/// Brightest voxel of the largest 26-connected bone component inside `b`.
/// Ties go to the smallest (z, y, x).
pub fn select_seed(v: &Volume, b: &BoundingBox) -> Result<VoxelCoord> {
    select_seed_in_window(v, b, &SeedWindow::default())
}

pub fn select_seed_in_window(v: &Volume, b: &BoundingBox, window: &SeedWindow) -> Result<VoxelCoord> {
    let sub = crop(v, b)?;
    let bone = threshold(&sub, window.min_hu, f64::INFINITY)?;
    let labels = connected_components(&bone, Adjacency::TwentySix, LabelMode::Volume)?;
    let Some(largest) = labels.largest_label() else {
        return Err(Error::NoSeed(format!(
            "no voxel >= {} HU inside box {}..{}",
            window.min_hu, b.min, b.max
        )));
    };
    let offsets = Adjacency::TwentySix.offsets();
    let in_window = |val: f64| val >= window.min_hu && val <= window.max_hu;
    let is_interior = |i: usize| {
        let mut ok = true;
        sub.grid().for_each_neighbor(i, &offsets, |j, _| ok &= in_window(sub.data()[j]));
        ok
    };
    let pick = |capped: bool, interior: bool| {
        let mut best: Option<(f64, usize)> = None;
        // Scan order is (z, y, x) ascending, so strict > keeps the first tie.
        for (i, &l) in labels.labels.iter().enumerate() {
            let val = sub.data()[i];
            if l != largest || (capped && val > window.max_hu) {
                continue;
            }
            if best.is_none_or(|(bv, _)| val > bv) && (!interior || is_interior(i)) {
                best = Some((val, i));
            }
        }
        best
    };
    let interior = if window.interior { pick(true, true) } else { None };
    let (_, idx) = interior
        .or_else(|| pick(true, false))
        .or_else(|| pick(false, false))
        .expect("largest component is nonempty");
    Ok(b.to_global(sub.grid().coord(idx)))
}

/// Per-voxel connectedness to a single seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMap {
    pub grid: Grid,
    pub strength: Vec<f64>,
    pub seed: VoxelCoord,
}

impl ConnectivityMap {
    pub fn at(&self, c: VoxelCoord) -> f64 {
        self.strength[self.grid.index_of(c)]
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.grid, self.strength.clone()).expect("strength matches grid")
    }
}

#[derive(Clone, Copy)]
struct Entry {
    strength: f64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        self.strength
            .total_cmp(&o.strength)
            .then_with(|| o.index.cmp(&self.index))
    }
}

/// Strongest-path propagation with an arbitrary symmetric link affinity
/// `affinity(p, q, offset)`, where `offset` points from `p` to `q`.
pub fn propagate<F>(grid: &Grid, seed: VoxelCoord, adjacency: Adjacency, affinity: F) -> Result<ConnectivityMap>
where
    F: Fn(usize, usize, [isize; 3]) -> f64,
{
    propagate_with_offsets(grid, seed, &adjacency.offsets(), affinity)
}

pub(crate) fn propagate_with_offsets<F>(
    grid: &Grid,
    seed: VoxelCoord,
    offsets: &[[isize; 3]],
    affinity: F,
) -> Result<ConnectivityMap>
where
    F: Fn(usize, usize, [isize; 3]) -> f64,
{
    if !grid.contains(seed) {
        return Err(Error::invalid(format!("seed {seed} outside dims {:?}", grid.dims)));
    }
    let n = grid.len();
    let mut strength = vec![0.0f64; n];
    let mut done = vec![false; n];
    let s = grid.index_of(seed);
    strength[s] = 1.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry { strength: 1.0, index: s });
    while let Some(Entry { strength: f, index: p }) = heap.pop() {
        if done[p] || f < strength[p] {
            continue;
        }
        done[p] = true;
        grid.for_each_neighbor(p, offsets, |q, off| {
            if done[q] {
                return;
            }
            let cand = f.min(affinity(p, q, off));
            if cand > strength[q] {
                strength[q] = cand;
                heap.push(Entry { strength: cand, index: q });
            }
        });
    }
    Ok(ConnectivityMap {
        grid: *grid,
        strength,
        seed,
    })
}

/// Link affinity closure for the gradient-magnitude form.
pub fn gradient_link(grad: &Volume, sigma: f64) -> impl Fn(usize, usize, [isize; 3]) -> f64 + '_ {
    let g = grad.data();
    move |p, q, _| gaussian(0.5 * (g[p] + g[q]), sigma)
}

/// Link affinity closure for the directional (along-link gradient) form.
pub fn directional_link(intensity: &Volume, sigma: f64) -> impl Fn(usize, usize, [isize; 3]) -> f64 + '_ {
    let d = intensity.data();
    let grid = *intensity.grid();
    move |p, q, off| gaussian((d[p] - d[q]).abs() / grid.offset_length(off), sigma)
}

/// Connectedness over a gradient-magnitude volume.
pub fn compute_connectivity(grad: &Volume, seed: VoxelCoord, params: &AffinityParams) -> Result<ConnectivityMap> {
    check_sigma(params.sigma)?;
    if grad.data().iter().any(|&g| g < 0.0) {
        return Err(Error::invalid("gradient magnitudes must be nonnegative"));
    }
    propagate(grad.grid(), seed, params.adjacency, gradient_link(grad, params.sigma))
}

/// Connectedness over an intensity volume using along-link gradients.
pub fn compute_connectivity_directional(
    intensity: &Volume,
    seed: VoxelCoord,
    params: &AffinityParams,
) -> Result<ConnectivityMap> {
    check_sigma(params.sigma)?;
    propagate(intensity.grid(), seed, params.adjacency, directional_link(intensity, params.sigma))
}

/// Largest grid the exhaustive oracles accept.
pub const BRUTE_FORCE_LIMIT: usize = 32;

/// Exhaustive oracle over a gradient-magnitude volume; see [`brute_force_with`].
pub fn brute_force_connectivity(grad: &Volume, seed: VoxelCoord, params: &AffinityParams) -> Result<ConnectivityMap> {
    check_sigma(params.sigma)?;
    brute_force_with(grad.grid(), seed, params.adjacency, gradient_link(grad, params.sigma))
}

/// Exact connectedness by exhaustive search over strength levels.
///
/// A voxel has connectedness ≥ t iff some path reaches it using only links of
/// affinity ≥ t. Every link affinity is a candidate level; for each level,
/// in decreasing order, plain BFS over the qualifying links decides
/// reachability. The first level at which a voxel is reached is its strength.
/// Shares nothing with the priority-queue propagation.
pub fn brute_force_with<F>(grid: &Grid, seed: VoxelCoord, adjacency: Adjacency, affinity: F) -> Result<ConnectivityMap>
where
    F: Fn(usize, usize, [isize; 3]) -> f64,
{
    let n = grid.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            voxels: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if !grid.contains(seed) {
        return Err(Error::invalid("seed outside grid"));
    }
    let offsets = adjacency.offsets();
    let mut links: Vec<(usize, usize, f64)> = Vec::new();
    for p in 0..n {
        grid.for_each_neighbor(p, &offsets, |q, off| links.push((p, q, affinity(p, q, off))));
    }
    let mut levels: Vec<f64> = links.iter().map(|l| l.2).collect();
    levels.push(1.0);
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();

    let s = grid.index_of(seed);
    let mut strength = vec![0.0; n];
    let mut assigned = vec![false; n];
    strength[s] = 1.0;
    assigned[s] = true;
    for &t in &levels {
        let mut reached = vec![false; n];
        reached[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(p) = queue.pop_front() {
            for &(a, b, w) in &links {
                if a == p && w >= t && !reached[b] {
                    reached[b] = true;
                    queue.push_back(b);
                }
            }
        }
        for q in 0..n {
            if reached[q] && !assigned[q] {
                strength[q] = t;
                assigned[q] = true;
            }
        }
    }
    Ok(ConnectivityMap {
        grid: *grid,
        strength,
        seed,
    })
}

/// Largest grid [`simple_path_connectivity`] accepts.
pub const SIMPLE_PATH_LIMIT: usize = 12;

/// Literal definition: maximum over every simple path from the seed of the
/// path's weakest link. Exponential; for tiny grids only.
pub fn simple_path_connectivity<F>(grid: &Grid, seed: VoxelCoord, adjacency: Adjacency, affinity: F) -> Result<ConnectivityMap>
where
    F: Fn(usize, usize, [isize; 3]) -> f64,
{
    let n = grid.len();
    if n > SIMPLE_PATH_LIMIT {
        return Err(Error::TooLarge {
            voxels: n,
            limit: SIMPLE_PATH_LIMIT,
        });
    }
    if !grid.contains(seed) {
        return Err(Error::invalid("seed outside grid"));
    }
    let offsets = adjacency.offsets();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (p, row) in adj.iter_mut().enumerate() {
        grid.for_each_neighbor(p, &offsets, |q, off| row.push((q, affinity(p, q, off))));
    }
    let s = grid.index_of(seed);
    let mut best = vec![0.0; n];
    let mut on_path = vec![false; n];
    let mut links = Vec::new();

    fn walk(p: usize, adj: &[Vec<(usize, f64)>], on_path: &mut [bool], links: &mut Vec<f64>, best: &mut [f64]) {
        let strength = path_strength(links);
        if strength > best[p] {
            best[p] = strength;
        }
        on_path[p] = true;
        for &(q, w) in &adj[p] {
            if !on_path[q] {
                links.push(w);
                walk(q, adj, on_path, links, best);
                links.pop();
            }
        }
        on_path[p] = false;
    }
    walk(s, &adj, &mut on_path, &mut links, &mut best);
    Ok(ConnectivityMap {
        grid: *grid,
        strength: best,
        seed,
    })
}

/// Largest deviation from the fixed point
/// `strength(p) = max_q min(strength(q), affinity(q, p))` over non-seed voxels,
/// together with the seed-maximality check.
pub fn bellman_residual<F>(map: &ConnectivityMap, adjacency: Adjacency, affinity: F) -> f64
where
    F: Fn(usize, usize, [isize; 3]) -> f64,
{
    let grid = map.grid;
    let offsets = adjacency.offsets();
    let s = grid.index_of(map.seed);
    let mut worst = (map.strength[s] - 1.0).abs();
    for p in 0..grid.len() {
        if map.strength[p] > 1.0 || map.strength[p] < 0.0 {
            worst = worst.max(1.0);
        }
        if p == s {
            continue;
        }
        let mut best = 0.0f64;
        grid.for_each_neighbor(p, &offsets, |q, off| {
            let back = [-off[0], -off[1], -off[2]];
            best = best.max(map.strength[q].min(affinity(q, p, back)));
        });
        worst = worst.max((best - map.strength[p]).abs());
    }
    worst
}

/// Voxels with strength ≥ `theta`, restricted to the 26-component holding the seed.
pub fn threshold_object(c: &ConnectivityMap, theta: f64) -> Result<Mask> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid(format!("theta must be in (0, 1], got {theta}")));
    }
    let raw = Mask::new(c.grid, c.strength.iter().map(|&s| s >= theta).collect())?;
    Ok(component_containing(&raw, c.grid.index_of(c.seed), Adjacency::TwentySix))
}
