//! Slice-by-slice cleanup of a delineated mandible.
//!
//! Axial slices are walked from inferior to superior through five states.
//! In the teeth state each slice is split along the anterior–posterior axis
//! with 2-means and the anterior cluster is dropped; once an abrupt jump in
//! width or height flags a leak, every later slice keeps only the components
//! that mostly overlap the previous accepted slice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Adjacency;
use crate::labeling::label_slice;
use crate::volume::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub z: usize,
    /// Number of 8-connected components.
    pub components: usize,
    /// Component areas in mm², in label order.
    pub sizes_mm2: Vec<f64>,
    pub area_mm2: f64,
    pub width_mm: f64,
    pub height_mm: f64,
}

impl SliceStats {
    pub fn largest_mm2(&self) -> f64 {
        self.sizes_mm2.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.components == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineState {
    Initial,
    Base,
    Teeth,
    Leak,
    Ending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceAction {
    None,
    TeethSeparated,
    LeakPruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub z: usize,
    pub state: RefineState,
    /// Stats of the input slice, before any action.
    pub stats: SliceStats,
    pub action: SliceAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrace {
    pub entries: Vec<TraceEntry>,
}

impl StateTrace {
    pub fn states(&self) -> Vec<RefineState> {
        self.entries.iter().map(|e| e.state).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Largest-component area (mm²) that moves Initial to Base.
    pub base_area_mm2: f64,
    /// Component count that moves Base to Teeth.
    pub teeth_components: usize,
    /// Relative width or height change that flags a leak.
    pub abrupt_change_ratio: f64,
    /// Fraction of a component's own area that must overlap the previous
    /// accepted slice for it to survive leak pruning.
    pub overlap_fraction: f64,
    /// Anterior is toward y = 0 when true.
    pub anterior_low_y: bool,
    /// Keep the anterior cluster instead of removing it.
    pub retain_teeth: bool,
    /// No split when the two cluster centers are closer than this.
    pub teeth_min_separation_mm: f64,
    /// No split unless the clusters are separated by at least this much
    /// empty space along the anterior–posterior axis.
    pub teeth_min_gap_mm: f64,
    pub kmeans_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            base_area_mm2: 300.0,
            teeth_components: 3,
            abrupt_change_ratio: 0.30,
            overlap_fraction: 0.5,
            anterior_low_y: true,
            retain_teeth: false,
            teeth_min_separation_mm: 5.0,
            teeth_min_gap_mm: 1.0,
            kmeans_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_area_mm2 > 0.0) {
            return Err(Error::invalid("base area threshold must be positive"));
        }
        if self.teeth_components == 0 {
            return Err(Error::invalid("teeth component threshold must be positive"));
        }
        if !(self.abrupt_change_ratio > 0.0 && self.abrupt_change_ratio < 1.0) {
            return Err(Error::invalid("abrupt change ratio must be in (0, 1)"));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(Error::invalid("overlap fraction must be in (0, 1]"));
        }
        if !(self.teeth_min_separation_mm >= 0.0) || !(self.teeth_min_gap_mm >= 0.0) {
            return Err(Error::invalid("teeth guards must be nonnegative"));
        }
        Ok(())
    }
}

/// Row-major view of one axial slice with its pixel spacing.
#[derive(Clone, Copy)]
struct Plane {
    nx: usize,
    ny: usize,
    sx: f64,
    sy: f64,
}

impl Plane {
    fn of(m: &Mask) -> Self {
        let [nx, ny, _] = m.dims();
        let [sx, sy, _] = m.spacing();
        Plane { nx, ny, sx, sy }
    }

    fn stats(&self, bits: &[bool], z: usize) -> SliceStats {
        let (_, sizes) = label_slice(bits, self.nx, self.ny, Adjacency::Eight);
        let px = self.sx * self.sy;
        let sizes_mm2: Vec<f64> = sizes.iter().map(|&s| s as f64 * px).collect();
        let mut lo = [usize::MAX; 2];
        let mut hi = [0usize; 2];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = (i % self.nx, i / self.nx);
            lo = [lo[0].min(x), lo[1].min(y)];
            hi = [hi[0].max(x), hi[1].max(y)];
        }
        let (width_mm, height_mm) = if sizes.is_empty() {
            (0.0, 0.0)
        } else {
            (
                (hi[0] - lo[0] + 1) as f64 * self.sx,
                (hi[1] - lo[1] + 1) as f64 * self.sy,
            )
        };
        SliceStats {
            z,
            components: sizes.len(),
            area_mm2: sizes.iter().sum::<usize>() as f64 * px,
            sizes_mm2,
            width_mm,
            height_mm,
        }
    }
}

pub fn slice_stats(m: &Mask, z: usize) -> Result<SliceStats> {
    if z >= m.dims()[2] {
        return Err(Error::invalid(format!("slice z={z} outside 0..{}", m.dims()[2])));
    }
    Ok(Plane::of(m).stats(m.axial_slice(z), z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Sorted ascending by first coordinate.
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after initialization and after each update.
    pub objective: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm from farthest-point initialization.
///
/// The first center is a point drawn with `rng_seed`; each further center is
/// the point farthest from those chosen so far (lowest index on ties).
pub fn kmeans(points: &[Vec<f64>], k: usize, rng_seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("{} points cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points must share a nonzero dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let mut best = 0;
        for (i, &d) in nearest.iter().enumerate() {
            if d > nearest[best] {
                best = i;
            }
        }
        let c = points[best].clone();
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, &c));
        }
        centers.push(c);
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (j, c) in centers.iter().enumerate() {
                    let d = dist2(p, c);
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                total += best.0;
                best.1
            })
            .collect();
        (a, total)
    };

    let (mut assignments, obj) = assign(&centers);
    let mut objective = vec![obj];
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // An empty cluster keeps its previous center.
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, obj) = assign(&centers);
        objective.push(obj);
        if next == assignments {
            break;
        }
        assignments = next;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a][0].total_cmp(&centers[b][0]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    Ok(KMeans {
        centers: order.iter().map(|&j| centers[j].clone()).collect(),
        assignments: assignments.iter().map(|&a| rank[a]).collect(),
        objective,
    })
}

/// Splits axial slice `z` into (mandible, teeth) slices, each row-major
/// `nx * ny`.
pub fn separate_teeth(m: &Mask, z: usize, cfg: &RefineConfig) -> Result<(Vec<bool>, Vec<bool>)> {
    if z >= m.dims()[2] {
        return Err(Error::invalid(format!("slice z={z} outside 0..{}", m.dims()[2])));
    }
    Ok(split_plane(Plane::of(m), m.axial_slice(z), cfg))
}

fn split_plane(plane: Plane, bits: &[bool], cfg: &RefineConfig) -> (Vec<bool>, Vec<bool>) {
    let mut mandible = bits.to_vec();
    let mut teeth = vec![false; bits.len()];
    let fg: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    let points: Vec<Vec<f64>> = fg.iter().map(|&i| vec![(i / plane.nx) as f64 * plane.sy]).collect();
    let Ok(km) = kmeans(&points, 2, cfg.kmeans_seed) else {
        return (mandible, teeth);
    };
    if km.centers[1][0] - km.centers[0][0] < cfg.teeth_min_separation_mm {
        return (mandible, teeth);
    }
    let row = |i: usize| i / plane.nx;
    let low_max = fg.iter().zip(&km.assignments).filter(|(_, &a)| a == 0).map(|(&i, _)| row(i)).max();
    let high_min = fg.iter().zip(&km.assignments).filter(|(_, &a)| a == 1).map(|(&i, _)| row(i)).min();
    let (Some(low_max), Some(high_min)) = (low_max, high_min) else {
        return (mandible, teeth);
    };
    let gap_mm = high_min.saturating_sub(low_max + 1) as f64 * plane.sy;
    if high_min <= low_max || gap_mm < cfg.teeth_min_gap_mm {
        return (mandible, teeth);
    }
    let anterior = if cfg.anterior_low_y { 0 } else { 1 };
    for (&i, &a) in fg.iter().zip(&km.assignments) {
        if a == anterior {
            mandible[i] = false;
            teeth[i] = true;
        }
    }
    (mandible, teeth)
}

/// Keeps the 8-connected components of `slice` that overlap `prev` by at
/// least the configured fraction of their own area.
pub fn prune_leak(slice: &[bool], prev: &[bool], width: usize, height: usize, cfg: &RefineConfig) -> Result<Vec<bool>> {
    if slice.len() != width * height || prev.len() != slice.len() {
        return Err(Error::DimensionMismatch(format!(
            "slices of {} and {} pixels for a {width}x{height} plane",
            slice.len(),
            prev.len()
        )));
    }
    let (labels, sizes) = label_slice(slice, width, height, Adjacency::Eight);
    let mut overlap = vec![0usize; sizes.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 && prev[i] {
            overlap[l as usize - 1] += 1;
        }
    }
    let keep: Vec<bool> = overlap
        .iter()
        .zip(&sizes)
        .map(|(&o, &s)| o as f64 >= cfg.overlap_fraction * s as f64)
        .collect();
    Ok(labels.iter().map(|&l| l > 0 && keep[l as usize - 1]).collect())
}

fn abrupt(prev: f64, cur: f64, ratio: f64) -> bool {
    prev > 0.0 && (cur - prev).abs() > ratio * prev
}

/// State trace of `m` under `cfg`, identical to the one returned by [`refine`].
pub fn run_state_machine(m: &Mask, cfg: &RefineConfig) -> Result<StateTrace> {
    refine(m, cfg).map(|(_, t)| t)
}

/// Applies teeth separation and leak pruning; the result is a subset of `m`.
pub fn refine(m: &Mask, cfg: &RefineConfig) -> Result<(Mask, StateTrace)> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::invalid("cannot refine an empty mask"));
    }
    let plane = Plane::of(m);
    let nz = m.dims()[2];
    let mut out = m.clone();
    let mut entries = Vec::with_capacity(nz);
    let mut state = RefineState::Initial;
    let mut seen_foreground = false;
    // Output of the previous slice with the state it was accepted under.
    let mut prev: Option<(RefineState, Vec<bool>, SliceStats)> = None;

    for z in 0..nz {
        let bits = m.axial_slice(z);
        let stats = plane.stats(bits, z);
        let prior = state;

        if stats.is_empty() {
            if seen_foreground {
                state = RefineState::Ending;
            }
        } else {
            seen_foreground = true;
        }
        if state == RefineState::Initial && stats.largest_mm2() >= cfg.base_area_mm2 {
            state = RefineState::Base;
        }
        if state == RefineState::Base && stats.components >= cfg.teeth_components {
            state = RefineState::Teeth;
        }

        let mut action = SliceAction::None;
        let mut slice = bits.to_vec();
        if state == RefineState::Teeth {
            let (mandible, teeth) = split_plane(plane, &slice, cfg);
            if teeth.iter().any(|&t| t) {
                action = SliceAction::TeethSeparated;
                if !cfg.retain_teeth {
                    slice = mandible;
                }
            }
        }
        if matches!(state, RefineState::Base | RefineState::Teeth) {
            if let Some((prev_state, _, prev_stats)) = &prev {
                let cand = plane.stats(&slice, z);
                if *prev_state == state
                    && !cand.is_empty()
                    && (abrupt(prev_stats.width_mm, cand.width_mm, cfg.abrupt_change_ratio)
                        || abrupt(prev_stats.height_mm, cand.height_mm, cfg.abrupt_change_ratio))
                {
                    state = RefineState::Leak;
                    // Teeth removal does not apply once the leak has begun.
                    slice = bits.to_vec();
                    action = SliceAction::None;
                }
            }
        }
        if state == RefineState::Leak {
            let reference = prev.as_ref().map(|(_, p, _)| p.clone()).unwrap_or_else(|| vec![false; slice.len()]);
            let pruned = prune_leak(&slice, &reference, plane.nx, plane.ny, cfg)?;
            if pruned != slice {
                action = SliceAction::LeakPruned;
            }
            slice = pruned;
        }
        debug_assert!(state >= prior);

        if state != RefineState::Ending {
            out.set_axial_slice(z, &slice);
            let accepted = plane.stats(&slice, z);
            prev = Some((state, slice, accepted));
        }
        entries.push(TraceEntry {
            z,
            state,
            stats,
            action,
        });
    }
    Ok((out, StateTrace { entries }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [1.0; 3]).unwrap()
    }

    fn rect(m: &mut Mask, z: usize, x: (usize, usize), y: (usize, usize)) {
        for yy in y.0..=y.1 {
            for xx in x.0..=x.1 {
                m.set(xx, yy, z, true);
            }
        }
    }

    #[test]
    fn stats_of_rectangle_and_blobs() {
        let mut m = Mask::empty(grid([10, 10, 2]));
        let e = slice_stats(&m, 0).unwrap();
        assert_eq!((e.components, e.width_mm, e.height_mm), (0, 0.0, 0.0));
        rect(&mut m, 0, (2, 4), (5, 6));
        let s = slice_stats(&m, 0).unwrap();
        assert_eq!((s.components, s.area_mm2, s.width_mm, s.height_mm), (1, 6.0, 3.0, 2.0));
        rect(&mut m, 0, (8, 9), (0, 0));
        let s = slice_stats(&m, 0).unwrap();
        assert_eq!(s.components, 2);
        assert_eq!(s.sizes_mm2.iter().sum::<f64>(), s.area_mm2);
        assert!(slice_stats(&m, 2).is_err());
    }

    #[test]
    fn stats_use_spacing() {
        let mut m = Mask::empty(Grid::new([10, 10, 1], [0.5, 2.0, 3.0]).unwrap());
        rect(&mut m, 0, (0, 2), (0, 1));
        let s = slice_stats(&m, 0).unwrap();
        assert_eq!((s.area_mm2, s.width_mm, s.height_mm), (6.0, 1.5, 4.0));
    }

    #[test]
    fn scripted_sequence() {
        // 40x40 plane, spacing 1: "small" = 4x4, "large" = 20x20 (400 mm²).
        let mut m = Mask::empty(grid([40, 40, 7]));
        rect(&mut m, 0, (10, 13), (10, 13));
        rect(&mut m, 1, (10, 13), (10, 13));
        rect(&mut m, 2, (10, 29), (10, 29));
        // Large body plus three small detached pieces on the same row span.
        rect(&mut m, 3, (10, 29), (20, 29));
        for x in [10, 20, 28] {
            rect(&mut m, 3, (x, x + 1), (10, 10));
        }
        // A detached blob widens the slice abruptly.
        rect(&mut m, 4, (10, 29), (20, 29));
        rect(&mut m, 4, (33, 39), (20, 29));
        let trace = run_state_machine(&m, &RefineConfig::default()).unwrap();
        use RefineState::*;
        assert_eq!(trace.states(), vec![Initial, Initial, Base, Teeth, Leak, Ending, Ending]);
        assert_eq!(trace.entries[3].action, SliceAction::TeethSeparated);
        assert_eq!(trace.entries[4].action, SliceAction::LeakPruned);
    }

    #[test]
    fn uniform_mask_stays_in_base() {
        let mut m = Mask::empty(grid([30, 30, 8]));
        for z in 1..8 {
            rect(&mut m, z, (5, 24), (5, 24));
        }
        let (out, trace) = refine(&m, &RefineConfig::default()).unwrap();
        let mut expect = vec![RefineState::Base; 8];
        expect[0] = RefineState::Initial;
        assert_eq!(trace.states(), expect);
        assert_eq!(out, m);
        assert!(trace.entries.iter().all(|e| e.action == SliceAction::None));
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(refine(&Mask::empty(grid([3, 3, 3])), &RefineConfig::default()).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let pts: Vec<Vec<f64>> = [0.0, 1.0, 10.0, 11.0].iter().map(|&v| vec![v]).collect();
        for seed in 0..8 {
            let km = kmeans(&pts, 2, seed).unwrap();
            assert_eq!(km.centers, vec![vec![0.5], vec![10.5]]);
            assert_eq!(km.assignments, vec![0, 0, 1, 1]);
        }
        let same = vec![vec![3.0]; 5];
        let km = kmeans(&same, 2, 1).unwrap();
        assert_eq!(km.centers[0], km.centers[1]);
        assert!(kmeans(&[vec![1.0]], 2, 0).is_err());
    }

    /// Best 2-partition by exhaustive search over all subsets.
    fn best_split_cost(v: &[f64]) -> f64 {
        let n = v.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let group: Vec<f64> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| v[i]).collect();
                let mean = group.iter().sum::<f64>() / group.len() as f64;
                cost += group.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn kmeans_matches_exhaustive_on_separated_data() {
        let v = [0.0, 1.0, 10.0, 11.0];
        let km = kmeans(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>(), 2, 3).unwrap();
        assert!((km.objective.last().unwrap() - best_split_cost(&v)).abs() < 1e-12);
    }

    #[test]
    fn teeth_bars_are_anterior() {
        let mut m = Mask::empty(grid([50, 50, 1]));
        rect(&mut m, 0, (10, 40), (5, 5));
        rect(&mut m, 0, (10, 40), (40, 40));
        let (mandible, teeth) = separate_teeth(&m, 0, &RefineConfig::default()).unwrap();
        for x in 10..=40 {
            assert!(teeth[5 * 50 + x] && !mandible[5 * 50 + x]);
            assert!(mandible[40 * 50 + x] && !teeth[40 * 50 + x]);
        }
        let flipped = RefineConfig {
            anterior_low_y: false,
            ..RefineConfig::default()
        };
        let (mandible, _) = separate_teeth(&m, 0, &flipped).unwrap();
        assert!(mandible[5 * 50 + 10] && !mandible[40 * 50 + 10]);
    }

    #[test]
    fn single_blob_is_not_split() {
        let mut m = Mask::empty(grid([50, 50, 1]));
        rect(&mut m, 0, (20, 30), (30, 45));
        let (mandible, teeth) = separate_teeth(&m, 0, &RefineConfig::default()).unwrap();
        assert_eq!(mandible, m.axial_slice(0));
        assert!(teeth.iter().all(|&t| !t));
        let e = Mask::empty(grid([5, 5, 1]));
        let (a, b) = separate_teeth(&e, 0, &RefineConfig::default()).unwrap();
        assert!(a.iter().chain(&b).all(|&x| !x));
    }

    #[test]
    fn prune_examples() {
        let cfg = RefineConfig::default();
        let (w, h) = (20, 20);
        let mut cur = vec![false; w * h];
        let mut prev = vec![false; w * h];
        // Ramus: 10 pixels, 9 overlap the previous slice.
        for x in 0..10 {
            cur[x] = true;
        }
        for x in 1..10 {
            prev[x] = true;
        }
        // Skull blob with no overlap.
        for x in 5..15 {
            cur[10 * w + x] = true;
        }
        let out = prune_leak(&cur, &prev, w, h, &cfg).unwrap();
        assert!(out[..10].iter().all(|&b| b));
        assert!(out[10 * w..].iter().all(|&b| !b));
        assert_eq!(prune_leak(&cur, &cur, w, h, &cfg).unwrap(), cur);
        assert!(prune_leak(&cur, &vec![false; w * h], w, h, &cfg).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn trace_serializes() {
        let m = Mask::full(grid([20, 20, 3]));
        let (_, t) = refine(&m, &RefineConfig::default()).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"state\":\"base\""));
        let back: StateTrace = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (4usize..12, 4usize..12, 1usize..8).prop_flat_map(|(nx, ny, nz)| {
            proptest::collection::vec(prop::bool::weighted(0.4), nx * ny * nz)
                .prop_filter("nonempty", |b| b.iter().any(|&x| x))
                .prop_map(move |bits| Mask::new(Grid::new([nx, ny, nz], [4.0, 4.0, 1.0]).unwrap(), bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn refine_only_removes(m in arb_mask()) {
            let (out, trace) = refine(&m, &RefineConfig::default()).unwrap();
            prop_assert!(out.is_subset_of(&m));
            prop_assert_eq!(trace.entries.len(), m.dims()[2]);
            for (z, e) in trace.entries.iter().enumerate() {
                prop_assert_eq!(e.z, z);
            }
            for w in trace.entries.windows(2) {
                prop_assert!(w[0].state <= w[1].state);
            }
        }

        #[test]
        fn teeth_split_partitions_slice(m in arb_mask(), sep in 0.0f64..6.0) {
            let cfg = RefineConfig { teeth_min_separation_mm: sep, teeth_min_gap_mm: 0.0, ..RefineConfig::default() };
            let (a, b) = separate_teeth(&m, 0, &cfg).unwrap();
            for (i, &bit) in m.axial_slice(0).iter().enumerate() {
                prop_assert_eq!(a[i] || b[i], bit);
                prop_assert!(!(a[i] && b[i]));
            }
        }

        #[test]
        fn kmeans_objective_never_increases(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..40),
            seed in 0u64..100,
        ) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|(a, b)| vec![a, b]).collect();
            let km = kmeans(&pts, 2, seed).unwrap();
            for w in km.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert_eq!(&km, &kmeans(&pts, 2, seed).unwrap());
            prop_assert!(km.centers[0][0] <= km.centers[1][0]);
        }
    }
}
