//! Delineation accuracy on phantoms across affinity forms and thresholds,
//! using the padded ground-truth box in place of recognition.
//!
//! Usage: cargo run --release --example affinity_sweep [first_seed] [count] [theta,theta,...]

use mandible_seg::fc::AffinityMode;
use mandible_seg::metrics::{dsc, Severity, Spread};
use mandible_seg::phantom::{generate, PhantomParams};
use mandible_seg::pipeline::{delineate, PipelineConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let first: u64 = args.first().map_or(10, |s| s.parse().expect("integer seed"));
    let count: u64 = args.get(1).map_or(5, |s| s.parse().expect("integer count"));
    let thetas: Vec<f64> = args.get(2).map_or(vec![0.5, 0.8, 0.88, 0.9, 0.92, 0.94, 0.95, 0.96, 0.97, 0.98], |s| {
        s.split(',').map(|t| t.parse().expect("numeric theta")).collect()
    });
    println!("mode\ttheta\tgap\tseverity\tmedian_fc_dsc\tmedian_refined_dsc\tmin_refined_dsc\terrors");
    for mode in [AffinityMode::GradientMagnitude, AffinityMode::Directional] {
        for gap in [0, 2] {
            for severity in Severity::ALL {
                let cases: Vec<_> = (first..first + count)
                    .map(|seed| generate(&PhantomParams { severity, seed, condyle_gap: gap, ..PhantomParams::default() }).unwrap())
                    .collect();
                for &theta in &thetas {
                    let cfg = PipelineConfig { affinity_mode: mode, theta, ..PipelineConfig::default() };
                    let (mut fc, mut refined, mut errors) = (Vec::new(), Vec::new(), 0);
                    for case in &cases {
                        let crop = case.gt_box.padded(3, case.volume.grid());
                        match delineate(&case.volume, case.gt_box, crop, &cfg) {
                            Ok(s) => {
                                fc.push(dsc(&s.fc_mask, &case.gt_mandible).unwrap());
                                refined.push(dsc(&s.mask, &case.gt_mandible).unwrap());
                            }
                            Err(_) => errors += 1,
                        }
                    }
                    let med = |v: &[f64]| Spread::of(v).map_or(f64::NAN, |s| s.median);
                    let min = refined.iter().copied().fold(f64::INFINITY, f64::min);
                    println!("{mode}\t{theta}\t{gap}\t{severity}\t{:.4}\t{:.4}\t{min:.4}\t{errors}", med(&fc), med(&refined));
                }
            }
        }
    }
}
