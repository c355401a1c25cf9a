//! Segmentation scores: Dice, box intersection-over-union and a mean-surface
//! modified Hausdorff distance, plus per-severity aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoundingBox;
use crate::volume::{check_same_dims, surface_voxels, Mask};

/// Artifact severity group of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Low,
    Medium,
    High,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Low, Severity::Medium, Severity::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
        }
    }
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Severity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Severity::Low),
            "medium" => Ok(Severity::Medium),
            "high" => Ok(Severity::High),
            other => Err(Error::invalid(format!("unknown severity {other:?}"))),
        }
    }
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both masks are empty.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Voxel-count intersection over union of two boxes.
pub fn uoi(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0, |i| i.voxel_count());
    let union = a.voxel_count() + b.voxel_count() - inter;
    inter as f64 / union as f64
}

/// Mean over the three axes of the IoU of the boxes' slice-index intervals.
pub fn slice_set_uoi(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (0..3)
        .map(|axis| {
            let (a0, a1) = a.interval(axis);
            let (b0, b1) = b.interval(axis);
            let inter = (a1.min(b1) + 1).saturating_sub(a0.max(b0));
            let union = (a1 - a0 + 1) + (b1 - b0 + 1) - inter;
            inter as f64 / union as f64
        })
        .sum::<f64>()
        / 3.0
}

/// Larger of the two directed mean surface distances, in mm.
///
/// Surface voxels are foreground voxels with a background 6-neighbor. Nearest
/// distances are exact (brute force over the other surface).
pub fn modified_hd(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<f64> {
    check_same_dims(a.grid(), b.grid())?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("modified Hausdorff distance needs nonempty masks"));
    }
    let to_mm = |m: &Mask| -> Vec<[f64; 3]> {
        surface_voxels(m)
            .into_iter()
            .map(|i| {
                let c = m.grid().coord(i);
                [c.x as f64 * spacing[0], c.y as f64 * spacing[1], c.z as f64 * spacing[2]]
            })
            .collect()
    };
    let sa = to_mm(a);
    let sb = to_mm(b);
    Ok(directed_mean(&sa, &sb).max(directed_mean(&sb, &sa)))
}

fn directed_mean(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let total: f64 = from
        .par_iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / from.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub severity: Severity,
    pub uoi: f64,
    pub dsc: f64,
    pub mhd_mm: f64,
}

pub fn evaluate(
    case_id: &str,
    pred: &Mask,
    gt: &Mask,
    pred_box: &BoundingBox,
    gt_box: &BoundingBox,
    severity: Severity,
) -> Result<MetricsReport> {
    check_same_dims(pred.grid(), gt.grid())?;
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        severity,
        uoi: uoi(pred_box, gt_box),
        dsc: dsc(pred, gt)?,
        mhd_mm: modified_hd(pred, gt, gt.spacing())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    /// Median and quartiles with linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = p * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Spread {
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub uoi: Option<Spread>,
    pub dsc: Option<Spread>,
    pub mhd_mm: Option<Spread>,
}

/// Summaries keyed by `low`, `medium`, `high` and `overall`; every key is
/// always present, with empty groups reporting `count = 0`.
pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<String, GroupSummary> {
    let summarize = |rs: Vec<&MetricsReport>| {
        let col = |f: fn(&MetricsReport) -> f64| Spread::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        GroupSummary {
            count: rs.len(),
            uoi: col(|r| r.uoi),
            dsc: col(|r| r.dsc),
            mhd_mm: col(|r| r.mhd_mm),
        }
    };
    let mut out = BTreeMap::new();
    for s in Severity::ALL {
        out.insert(
            s.as_str().to_string(),
            summarize(reports.iter().filter(|r| r.severity == s).collect()),
        );
    }
    out.insert("overall".to_string(), summarize(reports.iter().collect()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, VoxelCoord};
    use proptest::prelude::*;

    fn grid(d: [usize; 3], s: [f64; 3]) -> Grid {
        Grid::new(d, s).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let g = grid([4, 4, 1], [1.0; 3]);
        let a = Mask::from_fn(g, |x, _, _| x < 2);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = Mask::from_fn(g, |x, _, _| x >= 2);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |A| = |B| = 8, 4 shared: 2 * 4 / 16.
        let c = Mask::from_fn(g, |x, _, _| x == 1 || x == 2);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        assert_eq!(dsc(&Mask::empty(g), &Mask::empty(g)).unwrap(), 1.0);
        let other = Mask::empty(grid([4, 4, 2], [1.0; 3]));
        assert!(dsc(&a, &other).is_err());
    }

    #[test]
    fn uoi_cases() {
        let full = BoundingBox::from_intervals((0, 9), (0, 9), (0, 9)).unwrap();
        assert_eq!(uoi(&full, &full), 1.0);
        let half = BoundingBox::from_intervals((0, 4), (0, 9), (0, 9)).unwrap();
        assert_eq!(uoi(&full, &half), 0.5);
        let apart = BoundingBox::from_intervals((0, 1), (0, 1), (0, 1)).unwrap();
        let far = BoundingBox::from_intervals((5, 6), (5, 6), (5, 6)).unwrap();
        assert_eq!(uoi(&apart, &far), 0.0);
        assert_eq!(slice_set_uoi(&full, &full), 1.0);
        assert!((slice_set_uoi(&full, &half) - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mhd_cases() {
        let g = grid([4, 4, 6], [0.7, 1.3, 3.0]);
        let mut a = Mask::empty(g);
        a.set(1, 2, 1, true);
        let mut b = Mask::empty(g);
        b.set(1, 2, 4, true);
        // Same (x, y), 3 slices apart at 3 mm.
        assert_eq!(modified_hd(&a, &b, g.spacing).unwrap(), 9.0);
        assert_eq!(modified_hd(&a, &a, g.spacing).unwrap(), 0.0);
        assert!(modified_hd(&a, &Mask::empty(g), g.spacing).is_err());
    }

    #[test]
    fn evaluate_identity() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let m = Mask::from_fn(g, |x, y, z| x > 0 && y > 1 && z < 4);
        let b = m.tight_box().unwrap();
        let r = evaluate("c", &m, &m, &b, &b, Severity::Low).unwrap();
        assert_eq!((r.uoi, r.dsc, r.mhd_mm), (1.0, 1.0, 0.0));
        let other = Mask::full(grid([5, 5, 4], [1.0; 3]));
        assert!(evaluate("c", &other, &m, &b, &b, Severity::Low).is_err());
    }

    #[test]
    fn aggregate_has_all_groups() {
        let r = |s, d| MetricsReport {
            case_id: "x".into(),
            severity: s,
            uoi: 1.0,
            dsc: d,
            mhd_mm: 0.0,
        };
        let reports = vec![r(Severity::Low, 0.9), r(Severity::Low, 0.8), r(Severity::High, 0.7)];
        let agg = aggregate(&reports);
        assert_eq!(
            agg.keys().cloned().collect::<Vec<_>>(),
            vec!["high", "low", "medium", "overall"]
        );
        assert_eq!(agg["medium"].count, 0);
        assert!(agg["medium"].dsc.is_none());
        assert!((agg["low"].dsc.unwrap().median - 0.85).abs() < 1e-12);
        assert_eq!(agg["overall"].dsc.unwrap().median, 0.8);
    }

    #[test]
    fn spread_quartiles() {
        let s = Spread::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!(s.iqr(), 2.0);
    }

    fn arb_pair() -> impl Strategy<Value = (Mask, Mask)> {
        let g = grid([5, 4, 3], [1.1, 0.8, 2.5]);
        (
            proptest::collection::vec(any::<bool>(), g.len()),
            proptest::collection::vec(any::<bool>(), g.len()),
        )
            .prop_filter("nonempty", |(a, b)| a.iter().any(|&x| x) && b.iter().any(|&x| x))
            .prop_map(move |(a, b)| (Mask::new(g, a).unwrap(), Mask::new(g, b).unwrap()))
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((a, b) in arb_pair()) {
            let s = a.spacing();
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            let d = dsc(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let h1 = modified_hd(&a, &b, s).unwrap();
            prop_assert_eq!(h1, modified_hd(&b, &a, s).unwrap());
            prop_assert!(h1 >= 0.0);
        }

        #[test]
        fn mhd_scales_with_spacing((a, b) in arb_pair(), c in 0.1f64..10.0) {
            let s = a.spacing();
            let h = modified_hd(&a, &b, s).unwrap();
            let hc = modified_hd(&a, &b, [c * s[0], c * s[1], c * s[2]]).unwrap();
            prop_assert!((hc - c * h).abs() <= 1e-9 * (1.0 + hc.abs()));
        }

        #[test]
        fn uoi_in_unit_interval(a0 in 0usize..8, a1 in 0usize..8, b0 in 0usize..8, b1 in 0usize..8) {
            let a = BoundingBox::new(VoxelCoord::new(a0.min(a1), 0, 0), VoxelCoord::new(a0.max(a1), 3, 3)).unwrap();
            let b = BoundingBox::new(VoxelCoord::new(b0.min(b1), 1, 0), VoxelCoord::new(b0.max(b1), 3, 2)).unwrap();
            let u = uoi(&a, &b);
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(u == 1.0, a == b);
        }
    }
}
