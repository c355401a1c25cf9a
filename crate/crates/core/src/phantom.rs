//! Synthetic head CT with a horseshoe mandible, teeth, rami and a skull slab.
//!
//! Axes: x runs left–right, y anterior (low) to posterior (high), z inferior
//! to superior. Geometry is jittered by the seed; all HU levels are
//! configurable.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid};
use crate::metrics::Severity;
use crate::volume::{Mask, Volume};

/// Voxels at or above this level are treated as teeth by [`add_artifacts`].
pub const TEETH_DETECT_HU: f64 = 1500.0;
pub const METAL_HU: f64 = 3000.0;
pub const STREAK_HU: f64 = 600.0;
const STREAK_LENGTH: f64 = 48.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub air_hu: f64,
    pub soft_hu: f64,
    pub bone_hu: f64,
    pub teeth_hu: f64,
    /// Mid-line radius of the arch, in in-plane voxels.
    pub arch_radius: f64,
    /// Radial thickness of the arch, in in-plane voxels.
    pub arch_thickness: f64,
    /// Empty slices between the condyle tops and the skull slab.
    pub condyle_gap: usize,
    pub noise_sigma: f64,
    pub severity: Severity,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [96, 96, 80],
            spacing: [1.12, 1.12, 3.0],
            air_hu: -1000.0,
            soft_hu: 40.0,
            bone_hu: 1200.0,
            teeth_hu: 1800.0,
            arch_radius: 26.0,
            arch_thickness: 9.0,
            condyle_gap: 2,
            noise_sigma: 20.0,
            severity: Severity::Low,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub volume: Volume,
    pub gt_mandible: Mask,
    pub gt_teeth: Mask,
    pub gt_skull: Mask,
    pub gt_box: BoundingBox,
    pub severity: Severity,
}

// Slice counts of the vertical structure.
const BODY_SLICES: usize = 13;
const TEETH_SLICES: usize = 5;
const RAMUS_SLICES: usize = 18;
const SKULL_SLICES: usize = 8;
const EXTENSION_ROWS: f64 = 10.0;
const RAMUS_ROWS: f64 = 12.0;
const TEETH_COUNT: usize = 8;
const TOOTH_RADIUS: f64 = 2.0;
const TEETH_SPREAD_DEG: f64 = 55.0;
const JITTER: i64 = 2;

pub fn generate(params: &PhantomParams) -> Result<PhantomCase> {
    let grid = Grid::new(params.dims, params.spacing)?;
    if params.dims.iter().any(|&d| d < 32) {
        return Err(Error::invalid(format!("phantom dims {:?} must be at least 32 each", params.dims)));
    }
    if !(params.arch_thickness > 0.0 && params.arch_radius > params.arch_thickness) {
        return Err(Error::invalid("arch radius must exceed a positive arch thickness"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut jit = || rng.random_range(-JITTER..=JITTER) as f64;
    let [nx, ny, nz] = params.dims;
    let cx = nx as f64 / 2.0 + jit();
    let cy = ny as f64 / 2.0 + 8.0 + jit();
    let radius = params.arch_radius + jit();
    let z0 = (12 + jit() as i64) as usize;
    let r_in = radius - params.arch_thickness / 2.0;
    let r_out = radius + params.arch_thickness / 2.0;

    let body_top = z0 + BODY_SLICES - 1;
    let ramus_top = body_top + RAMUS_SLICES;
    let skull_lo = ramus_top + 1 + params.condyle_gap;
    let skull_hi = skull_lo + SKULL_SLICES - 1;
    let margin = 2.0;
    if cx - r_out < margin
        || cx + r_out > nx as f64 - 1.0 - margin
        || cy - r_out < margin
        || cy + EXTENSION_ROWS > ny as f64 - 1.0 - margin
        || skull_hi >= nz
    {
        return Err(Error::invalid(format!(
            "phantom geometry (arch radius {radius}, skull top z={skull_hi}) does not fit dims {:?}",
            params.dims
        )));
    }

    let in_arm = |x: f64| (r_in..=r_out).contains(&(x - cx).abs());
    let arch = |x: f64, y: f64| {
        if y <= cy {
            let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            (r_in..=r_out).contains(&r)
        } else {
            y <= cy + EXTENSION_ROWS && in_arm(x)
        }
    };
    let ramus = |x: f64, y: f64| in_arm(x) && y > cy + EXTENSION_ROWS - RAMUS_ROWS && y <= cy + EXTENSION_ROWS;
    let tooth_centers: Vec<(f64, f64)> = (0..TEETH_COUNT)
        .map(|i| {
            let t = -TEETH_SPREAD_DEG + 2.0 * TEETH_SPREAD_DEG * i as f64 / (TEETH_COUNT - 1) as f64;
            let a = t.to_radians();
            (cx + radius * a.sin(), cy - radius * a.cos())
        })
        .collect();
    let tooth = |x: f64, y: f64| {
        tooth_centers
            .iter()
            .any(|&(tx, ty)| (x - tx).powi(2) + (y - ty).powi(2) <= TOOTH_RADIUS * TOOTH_RADIUS)
    };
    let (hx, hy) = (nx as f64 / 2.0 - 4.0, ny as f64 / 2.0 - 4.0);
    let head = |x: f64, y: f64| {
        ((x - nx as f64 / 2.0) / hx).powi(2) + ((y - ny as f64 / 2.0) / hy).powi(2) <= 1.0
    };

    let gt_mandible = Mask::from_fn(grid, |x, y, z| {
        let (x, y) = (x as f64, y as f64);
        ((z0..=body_top).contains(&z) && arch(x, y)) || ((body_top + 1..=ramus_top).contains(&z) && ramus(x, y))
    });
    let gt_teeth = Mask::from_fn(grid, |x, y, z| {
        (body_top + 1..=body_top + TEETH_SLICES).contains(&z) && tooth(x as f64, y as f64)
    });
    let gt_skull = Mask::from_fn(grid, |x, y, z| (skull_lo..=skull_hi).contains(&z) && head(x as f64, y as f64));
    let clean = Volume::from_fn(grid, |x, y, z| {
        let i = grid.index(x, y, z);
        if gt_teeth.contains_index(i) {
            params.teeth_hu
        } else if gt_mandible.contains_index(i) || gt_skull.contains_index(i) {
            params.bone_hu
        } else if head(x as f64, y as f64) {
            params.soft_hu
        } else {
            params.air_hu
        }
    });
    let volume = add_artifacts_in(&clean, &gt_teeth, params.severity, params.noise_sigma, params.seed)?;
    let gt_box = gt_mandible.tight_box().expect("mandible fits the grid");
    Ok(PhantomCase {
        volume,
        gt_mandible,
        gt_teeth,
        gt_skull,
        gt_box,
        severity: params.severity,
    })
}

/// Adds noise and severity-dependent metal artifacts around voxels at or
/// above [`TEETH_DETECT_HU`].
pub fn add_artifacts(v: &Volume, severity: Severity, rng_seed: u64) -> Result<Volume> {
    let teeth = Mask::from_fn(*v.grid(), |x, y, z| v.get(x, y, z) >= TEETH_DETECT_HU);
    add_artifacts_in(v, &teeth, severity, PhantomParams::default().noise_sigma, rng_seed)
}

/// Gaussian noise for every severity; medium adds 2–4 streaks of ±600 HU
/// through the teeth slices, high adds 6–10 streaks and two 3000 HU blobs
/// inside the teeth.
///
/// Noise and artifacts use separate streams, so the noise term is identical
/// across severities for a given seed.
pub fn add_artifacts_in(v: &Volume, teeth: &Mask, severity: Severity, noise_sigma: f64, rng_seed: u64) -> Result<Volume> {
    crate::volume::check_same_dims(v.grid(), teeth.grid())?;
    let grid = *v.grid();
    let mut out = v.clone();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for x in out.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let (streaks, blobs) = match severity {
        Severity::Low => return Ok(out),
        Severity::Medium => (2..=4, 0),
        Severity::High => (6..=10, 2),
    };
    let teeth_idx: Vec<usize> = teeth.iter_indices().collect();
    let [nx, ny, _] = grid.dims;
    let (z_lo, z_hi, anchors) = match teeth.tight_box() {
        Some(b) => (b.min.z, b.max.z, teeth_idx.clone()),
        None => {
            let mid = grid.index(nx / 2, ny / 2, grid.dims[2] / 2);
            (grid.dims[2] / 2, grid.dims[2] / 2, vec![mid])
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed_a27f_ac75);
    let n_streaks = rng.random_range(streaks);
    for _ in 0..n_streaks {
        let c = grid.coord(*anchors.choose(&mut rng).expect("anchors are nonempty"));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy) = (angle.cos(), angle.sin());
        let mut pixels = Vec::new();
        let steps = (STREAK_LENGTH * 2.0) as i64;
        for s in -steps / 2..=steps / 2 {
            let t = s as f64 * 0.5;
            let x = (c.x as f64 + t * dx).round();
            let y = (c.y as f64 + t * dy).round();
            if x >= 0.0 && y >= 0.0 && (x as usize) < nx && (y as usize) < ny {
                pixels.push((x as usize, y as usize));
            }
        }
        pixels.sort_unstable();
        pixels.dedup();
        for z in z_lo..=z_hi {
            for &(x, y) in &pixels {
                let i = grid.index(x, y, z);
                out.data_mut()[i] += sign * STREAK_HU;
            }
        }
    }
    if blobs > 0 && !teeth_idx.is_empty() {
        // Prefer centers whose whole 3x3x3 neighborhood is tooth.
        let offsets = crate::grid::Adjacency::TwentySix.offsets();
        let interior: Vec<usize> = teeth_idx
            .iter()
            .copied()
            .filter(|&i| {
                let mut n = 0;
                grid.for_each_neighbor(i, &offsets, |j, _| n += usize::from(teeth.contains_index(j)));
                n == 26
            })
            .collect();
        let pool = if interior.len() >= blobs { &interior } else { &teeth_idx };
        for &center in pool.choose_multiple(&mut rng, blobs) {
            out.data_mut()[center] = METAL_HU;
            grid.for_each_neighbor(center, &offsets, |j, _| {
                if teeth.contains_index(j) {
                    out.data_mut()[j] = METAL_HU;
                }
            });
        }
    }
    Ok(out)
}
