//! Slice-level mandible detection.
//!
//! Every slice along each of the three axes is summarized by a fixed feature
//! vector and scored by a per-view random-forest regressor trained on 0/1
//! slice labels. Per-axis scores are thresholded into intervals whose product
//! is the detection box.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{Adjacency, BoundingBox, VoxelCoord};
use crate::labeling::label_slice;
use crate::volume::{Mask, Volume};

pub const HIST_BINS: usize = 32;
pub const HIST_MIN_HU: f64 = -1000.0;
pub const HIST_MAX_HU: f64 = 3000.0;
const FRACTION_LEVELS: [f64; 3] = [200.0, 600.0, 1100.0];
const COMPONENT_HU: f64 = 600.0;

/// Length of the vector returned by [`extract_features`].
pub const FEATURE_LEN: usize = HIST_BINS + FRACTION_LEVELS.len() + 1 + 2 + 2;

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Slices of constant x.
    Sagittal,
    /// Slices of constant y.
    Coronal,
    /// Slices of constant z.
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Sagittal, Axis::Coronal, Axis::Axial];

    pub fn index(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        })
    }
}

/// Slice `i` along `axis` as a row-major 2D image with its (width, height).
///
/// Sagittal slices are (y, z) images, coronal (x, z), axial (x, y).
pub fn extract_slice(v: &Volume, axis: Axis, i: usize) -> (Vec<f64>, usize, usize) {
    let [nx, ny, nz] = v.dims();
    match axis {
        Axis::Sagittal => {
            let mut out = Vec::with_capacity(ny * nz);
            for z in 0..nz {
                for y in 0..ny {
                    out.push(v.get(i, y, z));
                }
            }
            (out, ny, nz)
        }
        Axis::Coronal => {
            let mut out = Vec::with_capacity(nx * nz);
            for z in 0..nz {
                for x in 0..nx {
                    out.push(v.get(x, i, z));
                }
            }
            (out, nx, nz)
        }
        Axis::Axial => {
            let start = nx * ny * i;
            (v.data()[start..start + nx * ny].to_vec(), nx, ny)
        }
    }
}

/// Feature vector of one 2D slice:
/// 32-bin HU histogram over [-1000, 3000] normalized to sum 1, fractions of
/// pixels at or above 200/600/1100 HU, number of 8-connected components at or
/// above 600 HU, mean and standard deviation of HU, and the normalized
/// centroid of pixels at or above 600 HU ((0.5, 0.5) when there are none).
pub fn extract_features(slice: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    if slice.is_empty() || slice.len() != width * height {
        return Err(Error::invalid(format!(
            "slice of {} values does not match {width}x{height}",
            slice.len()
        )));
    }
    let n = slice.len() as f64;
    let bin_width = (HIST_MAX_HU - HIST_MIN_HU) / HIST_BINS as f64;
    let mut f = vec![0.0; FEATURE_LEN];
    let mut bone = vec![false; slice.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let (mut cx, mut cy, mut nb) = (0.0, 0.0, 0usize);
    for (i, &v) in slice.iter().enumerate() {
        let b = (((v.clamp(HIST_MIN_HU, HIST_MAX_HU) - HIST_MIN_HU) / bin_width) as usize).min(HIST_BINS - 1);
        f[b] += 1.0;
        for (k, &level) in FRACTION_LEVELS.iter().enumerate() {
            if v >= level {
                f[HIST_BINS + k] += 1.0;
            }
        }
        sum += v;
        sum_sq += v * v;
        if v >= COMPONENT_HU {
            bone[i] = true;
            cx += ((i % width) as f64 + 0.5) / width as f64;
            cy += ((i / width) as f64 + 0.5) / height as f64;
            nb += 1;
        }
    }
    for x in &mut f[..HIST_BINS + FRACTION_LEVELS.len()] {
        *x /= n;
    }
    let mut k = HIST_BINS + FRACTION_LEVELS.len();
    f[k] = label_slice(&bone, width, height, Adjacency::Eight).1.len() as f64;
    k += 1;
    let mean = sum / n;
    f[k] = mean;
    f[k + 1] = (sum_sq / n - mean * mean).max(0.0).sqrt();
    k += 2;
    if nb > 0 {
        f[k] = cx / nb as f64;
        f[k + 1] = cy / nb as f64;
    } else {
        f[k] = 0.5;
        f[k + 1] = 0.5;
    }
    Ok(f)
}

/// Features of every slice along `axis`, in slice order.
pub fn axis_features(v: &Volume, axis: Axis) -> Vec<Vec<f64>> {
    (0..v.dims()[axis.index()])
        .into_par_iter()
        .map(|i| {
            let (s, w, h) = extract_slice(v, axis, i);
            extract_features(&s, w, h).expect("volume slices are nonempty")
        })
        .collect()
}

/// Slice `i` is labeled 1 iff at least `min_positive` ground-truth voxels lie in it.
pub fn make_labels(gt: &Mask, axis: Axis, min_positive: usize) -> Vec<u8> {
    let mut counts = vec![0usize; gt.dims()[axis.index()]];
    for idx in gt.iter_indices() {
        let c = gt.grid().coord(idx);
        counts[[c.x, c.y, c.z][axis.index()]] += 1;
    }
    counts.iter().map(|&c| u8::from(c >= min_positive && c > 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 50,
            max_depth: 12,
            min_leaf: 5,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.min_leaf == 0 {
            return Err(Error::invalid("tree count and min leaf size must be positive"));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::invalid("features per split must be positive"));
        }
        Ok(())
    }

    fn split_features(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree stored as a flat node list rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub version: u32,
    pub n_features: usize,
    pub params: ForestParams,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn from_trees(n_features: usize, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::invalid("a forest needs at least one tree"));
        }
        Ok(Forest {
            version: FOREST_FORMAT_VERSION,
            n_features,
            params: ForestParams {
                trees: trees.len(),
                ..ForestParams::default()
            },
            seed: 0,
            trees,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "feature vector of length {}, forest expects {}",
                x.len(),
                self.n_features
            )));
        }
        Ok(self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse {
            what: "forest",
            message: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Forest = serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "forest",
            message: e.to_string(),
        })?;
        if f.version != FOREST_FORMAT_VERSION {
            return Err(Error::Parse {
                what: "forest",
                message: format!("unsupported format version {}", f.version),
            });
        }
        if f.trees.is_empty() {
            return Err(Error::Parse {
                what: "forest",
                message: "no trees".into(),
            });
        }
        Ok(f)
    }
}

/// Trains a regression forest. Tree `i` uses seed `rng_seed + i`, so the
/// result does not depend on how trees are scheduled across threads.
pub fn train_forest(features: &[Vec<f64>], labels: &[f64], params: &ForestParams, rng_seed: u64) -> Result<Forest> {
    params.validate()?;
    if features.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows must share a nonzero length"));
    }
    if labels.iter().chain(features.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data must be finite"));
    }
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(i as u64));
            let n = features.len();
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder = TreeBuilder {
                x: features,
                y: labels,
                params,
                mtry: params.split_features(d),
                rng,
                nodes: Vec::new(),
            };
            builder.grow(rows, 0);
            Tree { nodes: builder.nodes }
        })
        .collect();
    Ok(Forest {
        version: FOREST_FORMAT_VERSION,
        n_features: d,
        params: params.clone(),
        seed: rng_seed,
        trees,
    })
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct SplitChoice {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });
        let pure = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if pure || depth >= self.params.max_depth || rows.len() < 2 * self.params.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Largest reduction in squared error over a random feature subset; ties
    /// go to the lowest feature index, then the lowest threshold.
    fn best_split(&mut self, rows: &[usize]) -> Option<SplitChoice> {
        let d = self.x[0].len();
        let mut feats = sample(&mut self.rng, d, self.mtry).into_vec();
        feats.sort_unstable();
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.y[r]).sum();
        let parent = total * total / n as f64;
        let min_leaf = self.params.min_leaf;
        let mut best: Option<SplitChoice> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &f in &feats {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.y[order[k]];
                let (lo, hi) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                let nl = k + 1;
                if lo == hi || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64 - parent;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(SplitChoice {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisScores {
    pub axis: Axis,
    pub scores: Vec<f64>,
}

pub fn score_axis(v: &Volume, forest: &Forest, axis: Axis) -> Result<AxisScores> {
    let scores = axis_features(v, axis)
        .iter()
        .map(|f| forest.predict(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(AxisScores { axis, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionConfig {
    pub threshold: f64,
    /// Runs of at most this many below-threshold slices between
    /// above-threshold ones are filled in.
    pub gap_bridge: usize,
    pub padding: usize,
    /// Ground-truth voxels a slice needs to be labeled positive.
    pub min_positive: usize,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            gap_bridge: 2,
            padding: 3,
            min_positive: 10,
        }
    }
}

impl RecognitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("recognition threshold must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Longest run of above-threshold slices after gap bridging; the first one
/// wins ties.
pub fn longest_run(scores: &[f64], threshold: f64, gap_bridge: usize) -> Option<(usize, usize)> {
    let mut on: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let mut last_on: Option<usize> = None;
    for i in 0..on.len() {
        if on[i] {
            if let Some(p) = last_on {
                if i - p - 1 <= gap_bridge {
                    on[p + 1..i].iter_mut().for_each(|b| *b = true);
                }
            }
            last_on = Some(i);
        }
    }
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for i in 0..=on.len() {
        match (i < on.len() && on[i], start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| i - s > b - a + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Detection box before padding (`core`) and after (`padded`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedBox {
    pub core: BoundingBox,
    pub padded: BoundingBox,
}

pub fn fuse(sx: &AxisScores, sy: &AxisScores, sz: &AxisScores, cfg: &RecognitionConfig) -> Result<FusedBox> {
    cfg.validate()?;
    let mut lo = [0; 3];
    let mut hi = [0; 3];
    let mut plo = [0; 3];
    let mut phi = [0; 3];
    for (k, s) in [sx, sy, sz].into_iter().enumerate() {
        if s.scores.is_empty() {
            return Err(Error::invalid(format!("no {} scores", s.axis)));
        }
        let (a, b) = longest_run(&s.scores, cfg.threshold, cfg.gap_bridge).ok_or_else(|| {
            Error::MandibleNotFound(format!("no {} slice scored at least {}", s.axis, cfg.threshold))
        })?;
        lo[k] = a;
        hi[k] = b;
        plo[k] = a.saturating_sub(cfg.padding);
        phi[k] = (b + cfg.padding).min(s.scores.len() - 1);
    }
    let v = |c: [usize; 3]| VoxelCoord::new(c[0], c[1], c[2]);
    Ok(FusedBox {
        core: BoundingBox::new(v(lo), v(hi))?,
        padded: BoundingBox::new(v(plo), v(phi))?,
    })
}

/// Padded detection box.
pub fn fuse_to_bbox(sx: &AxisScores, sy: &AxisScores, sz: &AxisScores, cfg: &RecognitionConfig) -> Result<BoundingBox> {
    fuse(sx, sy, sz, cfg).map(|b| b.padded)
}

/// One forest per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewForests {
    pub sagittal: Forest,
    pub coronal: Forest,
    pub axial: Forest,
}

impl ViewForests {
    pub fn get(&self, axis: Axis) -> &Forest {
        match axis {
            Axis::Sagittal => &self.sagittal,
            Axis::Coronal => &self.coronal,
            Axis::Axial => &self.axial,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse {
            what: "forests",
            message: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: ViewForests = serde_json::from_str(s).map_err(|e| Error::Parse {
            what: "forests",
            message: e.to_string(),
        })?;
        for a in Axis::ALL {
            // Re-validate each member through the single-forest loader.
            Forest::from_json(&v.get(a).to_json()?)?;
        }
        Ok(v)
    }

    /// Path of the forest file for `axis` inside `dir`.
    pub fn view_path(dir: &Path, axis: Axis) -> PathBuf {
        dir.join(format!("{axis}.forest.json"))
    }

    /// Writes one file per view into `dir`, returning the paths.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Axis::ALL
            .iter()
            .map(|&a| {
                let p = Self::view_path(dir, a);
                std::fs::write(&p, self.get(a).to_json()?).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |a: Axis| -> Result<Forest> {
            let p = Self::view_path(dir, a);
            let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Forest::from_json(&s)
        };
        Ok(ViewForests {
            sagittal: load(Axis::Sagittal)?,
            coronal: load(Axis::Coronal)?,
            axial: load(Axis::Axial)?,
        })
    }
}

/// Trains the three view forests on every slice of every case. The forest
/// for axis `k` uses seed `rng_seed + 1_000_000 * k`.
pub fn train_views(
    cases: &[(&Volume, &Mask)],
    params: &ForestParams,
    cfg: &RecognitionConfig,
    rng_seed: u64,
) -> Result<ViewForests> {
    if cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    let mut forests = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (v, gt) in cases {
            crate::volume::check_same_dims(v.grid(), gt.grid())?;
            x.extend(axis_features(v, axis));
            y.extend(make_labels(gt, axis, cfg.min_positive).into_iter().map(f64::from));
        }
        let seed = rng_seed.wrapping_add(1_000_000 * axis.index() as u64);
        forests.push(train_forest(&x, &y, params, seed)?);
    }
    let axial = forests.pop().unwrap();
    let coronal = forests.pop().unwrap();
    let sagittal = forests.pop().unwrap();
    Ok(ViewForests {
        sagittal,
        coronal,
        axial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recognition {
    pub boxes: FusedBox,
    pub scores: [AxisScores; 3],
}

pub fn recognize(v: &Volume, forests: &ViewForests, cfg: &RecognitionConfig) -> Result<Recognition> {
    let [sx, sy, sz] = [Axis::Sagittal, Axis::Coronal, Axis::Axial].map(|a| score_axis(v, forests.get(a), a));
    let scores = [sx?, sy?, sz?];
    let boxes = fuse(&scores[0], &scores[1], &scores[2], cfg)?;
    Ok(Recognition { boxes, scores })
}
