//! End-to-end runs: configuration, segmentation of one volume, manifests and
//! grouped evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fc::{
    compute_connectivity, compute_connectivity_directional, estimate_sigma, select_seed_in_window, threshold_object,
    AffinityMode, AffinityParams, ConnectivityMap, SeedWindow, BONE_HU,
};
use crate::grid::{Adjacency, BoundingBox, VoxelCoord};
use crate::metrics::{aggregate, evaluate, slice_set_uoi, GroupSummary, MetricsReport, Severity};
use crate::recognition::{recognize, ForestParams, RecognitionConfig, ViewForests};
use crate::refinement::{refine, RefineConfig, StateTrace};
use crate::volume::{crop, gradient_magnitude, threshold, Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub recognition: RecognitionConfig,
    pub forest: ForestParams,
    pub affinity_mode: AffinityMode,
    /// Fixed σ; `None` estimates it from the cropped sub-volume.
    pub sigma: Option<f64>,
    pub adjacency: Adjacency,
    pub theta: f64,
    pub seed_window: SeedWindow,
    pub refine_enabled: bool,
    pub refine: RefineConfig,
    pub output_dir: Option<PathBuf>,
    pub rng_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            recognition: RecognitionConfig::default(),
            forest: ForestParams::default(),
            affinity_mode: AffinityMode::Directional,
            sigma: None,
            adjacency: Adjacency::TwentySix,
            theta: 0.98,
            seed_window: SeedWindow {
                min_hu: BONE_HU,
                max_hu: 1500.0,
                interior: true,
            },
            refine_enabled: true,
            refine: RefineConfig::default(),
            output_dir: None,
            rng_seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.recognition.validate()?;
        self.forest.validate()?;
        self.refine.validate()?;
        if let Some(s) = self.sigma {
            AffinityParams::new(s, self.adjacency)?;
        } else if self.adjacency.is_planar() {
            return Err(Error::invalid("affinity adjacency must be 6, 18 or 26"));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::invalid(format!("theta must be in (0, 1], got {}", self.theta)));
        }
        if !(self.seed_window.min_hu <= self.seed_window.max_hu) {
            return Err(Error::invalid("seed window min exceeds max"));
        }
        Ok(())
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "recognition.threshold" => self.recognition.threshold = parse(key, v)?,
            "recognition.gap_bridge" => self.recognition.gap_bridge = parse(key, v)?,
            "recognition.padding" => self.recognition.padding = parse(key, v)?,
            "recognition.min_positive" => self.recognition.min_positive = parse(key, v)?,
            "forest.trees" => self.forest.trees = parse(key, v)?,
            "forest.max_depth" => self.forest.max_depth = parse(key, v)?,
            "forest.min_leaf" => self.forest.min_leaf = parse(key, v)?,
            "forest.features_per_split" => {
                self.forest.features_per_split = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "forest.bootstrap" => self.forest.bootstrap = parse(key, v)?,
            "affinity.mode" => self.affinity_mode = v.parse()?,
            "affinity.sigma" => self.sigma = if v == "estimate" { None } else { Some(parse(key, v)?) },
            "affinity.adjacency" => self.adjacency = Adjacency::from_count(parse(key, v)?)?,
            "theta" => self.theta = parse(key, v)?,
            "seed.min_hu" => self.seed_window.min_hu = parse(key, v)?,
            "seed.max_hu" => self.seed_window.max_hu = parse(key, v)?,
            "seed.interior" => self.seed_window.interior = parse(key, v)?,
            "refine.enabled" => self.refine_enabled = parse(key, v)?,
            "refine.base_area_mm2" => self.refine.base_area_mm2 = parse(key, v)?,
            "refine.teeth_components" => self.refine.teeth_components = parse(key, v)?,
            "refine.abrupt_change_ratio" => self.refine.abrupt_change_ratio = parse(key, v)?,
            "refine.overlap_fraction" => self.refine.overlap_fraction = parse(key, v)?,
            "refine.anterior_low_y" => self.refine.anterior_low_y = parse(key, v)?,
            "refine.retain_teeth" => self.refine.retain_teeth = parse(key, v)?,
            "refine.teeth_min_separation_mm" => self.refine.teeth_min_separation_mm = parse(key, v)?,
            "refine.teeth_min_gap_mm" => self.refine.teeth_min_gap_mm = parse(key, v)?,
            "refine.kmeans_seed" => self.refine.kmeans_seed = parse(key, v)?,
            "output_dir" => self.output_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "rng_seed" => self.rng_seed = parse(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                message: format!("line {} has no '='", n + 1),
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, one per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let r = &self.recognition;
        let f = &self.forest;
        let rf = &self.refine;
        let opt = |o: Option<f64>| o.map_or("estimate".to_string(), |v| v.to_string());
        let entries: Vec<(&str, String)> = vec![
            ("recognition.threshold", r.threshold.to_string()),
            ("recognition.gap_bridge", r.gap_bridge.to_string()),
            ("recognition.padding", r.padding.to_string()),
            ("recognition.min_positive", r.min_positive.to_string()),
            ("forest.trees", f.trees.to_string()),
            ("forest.max_depth", f.max_depth.to_string()),
            ("forest.min_leaf", f.min_leaf.to_string()),
            (
                "forest.features_per_split",
                f.features_per_split.map_or("auto".to_string(), |v| v.to_string()),
            ),
            ("forest.bootstrap", f.bootstrap.to_string()),
            ("affinity.mode", self.affinity_mode.to_string()),
            ("affinity.sigma", opt(self.sigma)),
            ("affinity.adjacency", self.adjacency.to_string()),
            ("theta", self.theta.to_string()),
            ("seed.min_hu", self.seed_window.min_hu.to_string()),
            ("seed.max_hu", self.seed_window.max_hu.to_string()),
            ("seed.interior", self.seed_window.interior.to_string()),
            ("refine.enabled", self.refine_enabled.to_string()),
            ("refine.base_area_mm2", rf.base_area_mm2.to_string()),
            ("refine.teeth_components", rf.teeth_components.to_string()),
            ("refine.abrupt_change_ratio", rf.abrupt_change_ratio.to_string()),
            ("refine.overlap_fraction", rf.overlap_fraction.to_string()),
            ("refine.anterior_low_y", rf.anterior_low_y.to_string()),
            ("refine.retain_teeth", rf.retain_teeth.to_string()),
            ("refine.teeth_min_separation_mm", rf.teeth_min_separation_mm.to_string()),
            ("refine.teeth_min_gap_mm", rf.teeth_min_gap_mm.to_string()),
            ("refine.kmeans_seed", rf.kmeans_seed.to_string()),
            (
                "output_dir",
                self.output_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("rng_seed", self.rng_seed.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Every resolved value that influenced a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: PipelineConfig,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub detection_box: BoundingBox,
    pub crop_box: BoundingBox,
    pub sigma: f64,
    pub sigma_estimated: bool,
    pub theta: f64,
    pub affinity_mode: AffinityMode,
    pub adjacency: Adjacency,
    pub seed_voxel: VoxelCoord,
    pub fc_voxels: usize,
    pub output_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Final mask on the full grid.
    pub mask: Mask,
    /// Thresholded connectivity object on the full grid, before refinement.
    pub fc_mask: Mask,
    /// Connectedness over the crop box.
    pub connectivity: ConnectivityMap,
    pub trace: Option<StateTrace>,
    pub log: RunLog,
}

/// Recognition, crop, connectivity, threshold and (optionally) refinement.
pub fn segment(v: &Volume, forests: &ViewForests, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let rec = recognize(v, forests, &cfg.recognition)?;
    delineate(v, rec.boxes.core, rec.boxes.padded, cfg)
}

/// Everything after recognition, given the detection and crop boxes.
pub fn delineate(v: &Volume, detection_box: BoundingBox, crop_box: BoundingBox, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let sub = crop(v, &crop_box)?;
    let grad = gradient_magnitude(&sub);
    let local_box = sub.grid().full_box();
    let seed_local = select_seed_in_window(&sub, &local_box, &cfg.seed_window)?;
    let (sigma, sigma_estimated) = match cfg.sigma {
        Some(s) => (s, false),
        None => {
            let bone = threshold(&sub, cfg.seed_window.min_hu, f64::INFINITY)?;
            (estimate_sigma(&grad, &bone)?, true)
        }
    };
    let params = AffinityParams::new(sigma, cfg.adjacency)?;
    let connectivity = match cfg.affinity_mode {
        AffinityMode::GradientMagnitude => compute_connectivity(&grad, seed_local, &params)?,
        AffinityMode::Directional => compute_connectivity_directional(&sub, seed_local, &params)?,
    };
    let object = threshold_object(&connectivity, cfg.theta)?;
    let fc_mask = object.embed(&crop_box, *v.grid())?;
    if fc_mask.is_empty() {
        return Err(Error::Delineation("thresholded object is empty".into()));
    }
    let (mask, trace) = if cfg.refine_enabled {
        let (m, t) = refine(&fc_mask, &cfg.refine)?;
        (m, Some(t))
    } else {
        (fc_mask.clone(), None)
    };
    let log = RunLog {
        config: cfg.clone(),
        dims: v.dims(),
        spacing: v.spacing(),
        detection_box,
        crop_box,
        sigma,
        sigma_estimated,
        theta: cfg.theta,
        affinity_mode: cfg.affinity_mode,
        adjacency: cfg.adjacency,
        seed_voxel: crop_box.to_global(seed_local),
        fc_voxels: fc_mask.count(),
        output_voxels: mask.count(),
    };
    Ok(Segmentation {
        mask,
        fc_mask,
        connectivity,
        trace,
        log,
    })
}

/// One manifest line: `volume<TAB>ground truth<TAB>severity`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub volume: PathBuf,
    pub gt: PathBuf,
    pub severity: Severity,
}

impl ManifestEntry {
    /// File stem of the volume, used as the case id.
    pub fn case_id(&self) -> String {
        let name = self.volume.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        name.split('.').next().unwrap_or_default().to_string()
    }
}

/// Parses a manifest; relative paths are resolved against `base`. Blank lines
/// and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split('\t').collect();
        let severity = fields.get(2).map(|s| s.parse::<Severity>());
        match (fields.len(), severity) {
            (3, Some(Ok(severity))) => out.push(ManifestEntry {
                volume: base.join(fields[0]),
                gt: base.join(fields[1]),
                severity,
            }),
            _ => bad.push(n + 1),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Parse {
            what: "manifest",
            message: format!("malformed lines {bad:?}; expected volume<TAB>gt<TAB>severity"),
        });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            what: "manifest",
            message: "no cases".into(),
        });
    }
    Ok(out)
}

pub fn format_manifest_line(volume: &Path, gt: &Path, severity: Severity) -> String {
    format!("{}\t{}\t{}", volume.display(), gt.display(), severity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: Vec<MetricsReport>,
    pub groups: BTreeMap<String, GroupSummary>,
}

/// A prediction to score against its ground truth.
pub struct EvalCase<'a> {
    pub case_id: String,
    pub pred: &'a Mask,
    pub gt: &'a Mask,
    /// Detection box; the prediction's tight box when absent.
    pub pred_box: Option<BoundingBox>,
    pub severity: Severity,
}

/// Where `segment` writes the run log for a mask saved at `mask_path`.
pub fn run_log_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("log.json")
}

/// Where `segment` writes the state trace for a mask saved at `mask_path`.
pub fn trace_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("trace.json")
}

/// Scores every case and aggregates by severity. With `slice_set` the UoI
/// column holds the per-axis slice-interval IoU instead of the box IoU.
pub fn evaluate_cases(cases: &[EvalCase<'_>], slice_set: bool) -> Result<EvaluationReport> {
    let reports = cases
        .iter()
        .map(|c| {
            let gt_box = c
                .gt
                .tight_box()
                .ok_or_else(|| Error::invalid(format!("empty ground truth for {}", c.case_id)))?;
            let pred_box = match c.pred_box {
                Some(b) => b,
                None => c
                    .pred
                    .tight_box()
                    .ok_or_else(|| Error::invalid(format!("empty prediction for {}", c.case_id)))?,
            };
            let mut r = evaluate(&c.case_id, c.pred, c.gt, &pred_box, &gt_box, c.severity)?;
            if slice_set {
                r.uoi = slice_set_uoi(&pred_box, &gt_box);
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = aggregate(&reports);
    Ok(EvaluationReport { cases: reports, groups })
}
