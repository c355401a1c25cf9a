mod overlay;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mandible_seg::fc::AffinityMode;
use mandible_seg::io::{load_mask_auto, load_volume_auto, save_mask_auto, save_volume_auto, DataType};
use mandible_seg::metrics::Severity;
use mandible_seg::phantom::{generate, PhantomParams};
use mandible_seg::pipeline::{
    evaluate_cases, format_manifest_line, parse_manifest, run_log_path, segment, trace_path, EvalCase, ManifestEntry,
    PipelineConfig, RunLog,
};
use mandible_seg::recognition::{train_views, ViewForests};
use mandible_seg::{Adjacency, Error};

#[derive(Parser)]
#[command(name = "mandseg", version, about = "Mandible segmentation for head CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the three per-view slice forests from a manifest.
    Train(TrainArgs),
    /// Segment one volume, or every volume in a manifest.
    Segment(SegmentArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Write synthetic phantom cases.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration entry (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed for all randomized steps.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                PipelineConfig::from_kv(&text)?
            }
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects KEY=VALUE, got {o:?}");
            };
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.rng_seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Tab-separated manifest: volume, ground truth, severity.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for the forest files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    features_per_split: Option<usize>,
    #[arg(long)]
    no_bootstrap: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    /// Volume to segment.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    volume: Option<PathBuf>,
    /// Output mask path (.nii or .raw) for single-volume mode.
    #[arg(long, requires = "volume")]
    out: Option<PathBuf>,
    /// Segment every case of a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for manifest mode.
    #[arg(long, requires = "manifest")]
    out_dir: Option<PathBuf>,
    /// Directory holding the trained forests.
    #[arg(long)]
    forests: PathBuf,
    /// Fixed σ, or "estimate".
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    theta: Option<f64>,
    /// 6, 18 or 26.
    #[arg(long)]
    adjacency: Option<u32>,
    #[arg(long, value_enum)]
    affinity: Option<AffinityArg>,
    /// Skip refinement and write the thresholded connectivity object.
    #[arg(long)]
    no_refine: bool,
    /// Keep the anterior cluster during teeth separation.
    #[arg(long)]
    retain_teeth: bool,
    /// Write an axial PNG overlay of the result.
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Ground truth to draw on the overlay.
    #[arg(long, requires = "overlay")]
    overlay_gt: Option<PathBuf>,
    /// Axial slice for the overlay; defaults to the slice with most foreground.
    #[arg(long, requires = "overlay")]
    overlay_z: Option<usize>,
    /// Write the connectivity map over the crop box as a float volume.
    #[arg(long)]
    dump_connectivity: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityArg {
    GradientMagnitude,
    Directional,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Tab-separated manifest: prediction, ground truth, severity.
    #[arg(long, conflicts_with_all = ["pred", "gt", "severity"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    gt: Vec<PathBuf>,
    #[arg(long, value_parser = parse_severity)]
    severity: Vec<Severity>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report per-axis slice-interval IoU in the UoI column.
    #[arg(long)]
    slice_set_uoi: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_parser = parse_severity, default_value = "low")]
    severity: Severity,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to generate, starting at --seed.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Slices between condyles and skull; 0 makes them touch.
    #[arg(long, default_value_t = 2)]
    gap: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "nii")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Nii,
    Raw,
}

fn parse_severity(s: &str) -> std::result::Result<Severity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Phantom(a) => cmd_phantom(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined with ": ", skipping causes already quoted by
/// the message before them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// 2 recognition failure, 3 delineation failure, 4 I/O, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::MandibleNotFound(_) => 2,
                Error::NoSeed(_) | Error::Delineation(_) => 3,
                Error::Io { .. } | Error::Load { .. } => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text, base)?)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(t) = a.trees {
        cfg.forest.trees = t;
    }
    if let Some(d) = a.max_depth {
        cfg.forest.max_depth = d;
    }
    if let Some(m) = a.min_leaf {
        cfg.forest.min_leaf = m;
    }
    if a.features_per_split.is_some() {
        cfg.forest.features_per_split = a.features_per_split;
    }
    if a.no_bootstrap {
        cfg.forest.bootstrap = false;
    }
    cfg.validate()?;
    let entries = read_manifest(&a.manifest)?;
    let loaded: Vec<_> = entries
        .par_iter()
        .map(|e| (e, load_volume_auto(&e.volume).and_then(|v| load_mask_auto(&e.gt).map(|m| (v, m)))))
        .collect();
    let failures: Vec<String> = loaded
        .iter()
        .filter_map(|(e, r)| r.as_ref().err().map(|err| format!("{}: {err}", e.volume.display())))
        .collect();
    if !failures.is_empty() {
        bail!("unreadable manifest entries:\n  {}", failures.join("\n  "));
    }
    let cases: Vec<_> = loaded.into_iter().map(|(_, r)| r.expect("checked above")).collect();
    let pairs: Vec<_> = cases.iter().map(|(v, m)| (v, m)).collect();
    let forests = train_views(&pairs, &cfg.forest, &cfg.recognition, cfg.rng_seed)?;
    for p in forests.save_dir(&a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn segment_config(a: &SegmentArgs) -> Result<PipelineConfig> {
    let mut cfg = a.config.load()?;
    if let Some(s) = &a.sigma {
        cfg.set("affinity.sigma", s)?;
    }
    if let Some(t) = a.theta {
        cfg.theta = t;
    }
    if let Some(n) = a.adjacency {
        cfg.adjacency = Adjacency::from_count(n)?;
    }
    if let Some(m) = a.affinity {
        cfg.affinity_mode = match m {
            AffinityArg::GradientMagnitude => AffinityMode::GradientMagnitude,
            AffinityArg::Directional => AffinityMode::Directional,
        };
    }
    if a.no_refine {
        cfg.refine_enabled = false;
    }
    if a.retain_teeth {
        cfg.refine.retain_teeth = true;
    }
    if let Some(d) = &a.out_dir {
        cfg.output_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn segment_one(volume: &Path, out: &Path, forests: &ViewForests, cfg: &PipelineConfig, a: &SegmentArgs) -> Result<RunLog> {
    let v = load_volume_auto(volume)?;
    let seg = segment(&v, forests, cfg).with_context(|| format!("segmenting {}", volume.display()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    save_mask_auto(&seg.mask, out)?;
    write_json(&run_log_path(out), &seg.log)?;
    if let Some(t) = &seg.trace {
        write_json(&trace_path(out), t)?;
    }
    if let Some(p) = &a.dump_connectivity {
        save_volume_auto(&seg.connectivity.to_volume(), p, DataType::F32)?;
    }
    if let Some(p) = &a.overlay {
        let gt = a.overlay_gt.as_deref().map(load_mask_auto).transpose()?;
        overlay::write_overlay(&v, &seg.mask, gt.as_ref(), a.overlay_z, p)?;
    }
    Ok(seg.log)
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let cfg = segment_config(a)?;
    let forests = ViewForests::load_dir(&a.forests)?;
    if let Some(volume) = &a.volume {
        let out = a.out.clone().unwrap_or_else(|| volume.with_extension("pred.nii"));
        let log = segment_one(volume, &out, &forests, &cfg, a)?;
        println!(
            "{}: {} voxels, seed {}, box {}..{}, sigma {:.3}, theta {}",
            out.display(),
            log.output_voxels,
            log.seed_voxel,
            log.detection_box.min,
            log.detection_box.max,
            log.sigma,
            log.theta
        );
        return Ok(());
    }
    let manifest = a.manifest.as_ref().expect("clap requires volume or manifest");
    let out_dir = a.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let entries = read_manifest(manifest)?;
    let results: Vec<(ManifestEntry, PathBuf, Result<RunLog>)> = entries
        .into_par_iter()
        .map(|e| {
            let out = out_dir.join(format!("{}.pred.nii", e.case_id()));
            let r = segment_one(&e.volume, &out, &forests, &cfg, a);
            (e, out, r)
        })
        .collect();
    let mut lines = String::new();
    let mut first_err = None;
    for (e, out, r) in results {
        match r {
            Ok(_) => {
                let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
                lines.push_str(&(format_manifest_line(&abs(&out), &abs(&e.gt), e.severity) + "\n"));
            }
            Err(err) => {
                eprintln!("{}: {}", e.volume.display(), describe(&err));
                first_err.get_or_insert(err);
            }
        }
    }
    let pred_manifest = out_dir.join("predictions.tsv");
    fs::write(&pred_manifest, lines).map_err(|e| Error::Io {
        path: pred_manifest.clone(),
        source: e,
    })?;
    println!("{}", pred_manifest.display());
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let entries: Vec<ManifestEntry> = match &a.manifest {
        Some(m) => read_manifest(m)?,
        None => {
            if a.pred.is_empty() || a.pred.len() != a.gt.len() || a.pred.len() != a.severity.len() {
                bail!(
                    "need matching --pred/--gt/--severity lists (got {}, {}, {})",
                    a.pred.len(),
                    a.gt.len(),
                    a.severity.len()
                );
            }
            a.pred
                .iter()
                .zip(&a.gt)
                .zip(&a.severity)
                .map(|((p, g), &s)| ManifestEntry {
                    volume: p.clone(),
                    gt: g.clone(),
                    severity: s,
                })
                .collect()
        }
    };
    let mut loaded = Vec::with_capacity(entries.len());
    for e in &entries {
        let pred = load_mask_auto(&e.volume)?;
        let gt = load_mask_auto(&e.gt)?;
        let log_path = run_log_path(&e.volume);
        let pred_box = if log_path.exists() {
            let text = fs::read_to_string(&log_path)?;
            let log: RunLog =
                serde_json::from_str(&text).with_context(|| format!("parsing run log {}", log_path.display()))?;
            Some(log.detection_box)
        } else {
            None
        };
        loaded.push((e, pred, gt, pred_box));
    }
    let cases: Vec<EvalCase<'_>> = loaded
        .iter()
        .map(|(e, pred, gt, pred_box)| EvalCase {
            case_id: e.case_id(),
            pred,
            gt,
            pred_box: *pred_box,
            severity: e.severity,
        })
        .collect();
    let report = evaluate_cases(&cases, a.slice_set_uoi)?;
    match &a.out {
        Some(p) => {
            write_json(p, &report)?;
            for (group, s) in &report.groups {
                let med = |x: Option<mandible_seg::metrics::Spread>| x.map_or("-".to_string(), |s| format!("{:.4}", s.median));
                println!(
                    "{group}\tn={}\tuoi={}\tdsc={}\tmhd_mm={}",
                    s.count,
                    med(s.uoi),
                    med(s.dsc),
                    med(s.mhd_mm)
                );
            }
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let ext = match a.format {
        FormatArg::Nii => "nii",
        FormatArg::Raw => "raw",
    };
    let manifest = a.out.join("manifest.tsv");
    let mut lines = String::new();
    for seed in a.seed..a.seed + a.count {
        let case = generate(&PhantomParams {
            severity: a.severity,
            seed,
            condyle_gap: a.gap,
            ..PhantomParams::default()
        })?;
        let stem = format!("phantom_{}_{seed}", a.severity);
        let name = |suffix: &str| format!("{stem}{suffix}.{ext}");
        save_volume_auto(&case.volume, &a.out.join(name("")), DataType::F32)?;
        save_mask_auto(&case.gt_mandible, &a.out.join(name("_mandible")))?;
        save_mask_auto(&case.gt_teeth, &a.out.join(name("_teeth")))?;
        save_mask_auto(&case.gt_skull, &a.out.join(name("_skull")))?;
        let line = format_manifest_line(Path::new(&name("")), Path::new(&name("_mandible")), a.severity);
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .map_err(|e| Error::Io {
            path: manifest.clone(),
            source: e,
        })?;
    f.write_all(lines.as_bytes())?;
    Ok(())
}
