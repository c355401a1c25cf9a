//! Connected-component labeling of masks, in 3D or within one axial slice.
//!
//! Labels are assigned 1..=K in the order their first voxel is met in scan
//! order (x fastest, then y, then z), so the output is deterministic.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::{Adjacency, Grid};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Volume,
    /// Single axial slice at the given z.
    Slice(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    /// Grid of the labeled region; for slice mode, `dims[2] == 1`.
    pub dims: [usize; 3],
    /// 0 = background, otherwise the component label.
    pub labels: Vec<u32>,
    /// `component_sizes[k - 1]` is the voxel count of label `k`.
    pub component_sizes: Vec<usize>,
}

impl LabelMap {
    pub fn num_components(&self) -> usize {
        self.component_sizes.len()
    }

    /// Component sizes in descending order.
    pub fn sorted_sizes(&self) -> Vec<usize> {
        let mut s = self.component_sizes.clone();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    /// Label of the largest component; ties go to the lowest label.
    pub fn largest_label(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (k, &size) in self.component_sizes.iter().enumerate() {
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, k as u32 + 1));
            }
        }
        best.map(|(_, l)| l)
    }
}

pub fn connected_components(m: &Mask, adj: Adjacency, mode: LabelMode) -> Result<LabelMap> {
    match mode {
        LabelMode::Volume => {
            if adj.is_planar() {
                return Err(Error::invalid(format!("{adj}-adjacency is planar; use 6, 18 or 26")));
            }
            let (labels, component_sizes) = label_grid(m.grid(), m.bits(), adj);
            Ok(LabelMap {
                dims: m.dims(),
                labels,
                component_sizes,
            })
        }
        LabelMode::Slice(z) => {
            let [nx, ny, nz] = m.dims();
            if z >= nz {
                return Err(Error::invalid(format!("slice z={z} outside 0..{nz}")));
            }
            if !adj.is_planar() {
                return Err(Error::invalid(format!(
                    "{adj}-adjacency is volumetric; use 4 or 8 for slices"
                )));
            }
            let (labels, component_sizes) = label_slice(m.axial_slice(z), nx, ny, adj);
            Ok(LabelMap {
                dims: [nx, ny, 1],
                labels,
                component_sizes,
            })
        }
    }
}

/// Labels a row-major 2D bit image of `width * height` pixels.
pub fn label_slice(bits: &[bool], width: usize, height: usize, adj: Adjacency) -> (Vec<u32>, Vec<usize>) {
    let grid = Grid {
        dims: [width, height, 1],
        spacing: [1.0; 3],
    };
    label_grid(&grid, bits, adj)
}

fn label_grid(grid: &Grid, bits: &[bool], adj: Adjacency) -> (Vec<u32>, Vec<usize>) {
    let offsets = adj.offsets();
    let mut labels = vec![0u32; bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            grid.for_each_neighbor(i, &offsets, |j, _| {
                if bits[j] && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            });
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the 3D component containing voxel `idx`.
pub fn component_containing(m: &Mask, idx: usize, adj: Adjacency) -> Mask {
    let mut out = Mask::empty(*m.grid());
    if !m.contains_index(idx) {
        return out;
    }
    let offsets = adj.offsets();
    let grid = *m.grid();
    let mut queue = VecDeque::from([idx]);
    out.set_index(idx, true);
    while let Some(i) = queue.pop_front() {
        grid.for_each_neighbor(i, &offsets, |j, _| {
            if m.contains_index(j) && !out.contains_index(j) {
                out.set_index(j, true);
                queue.push_back(j);
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::new(d, [1.0; 3]).unwrap()
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = Mask::empty(grid([4, 4, 4]));
        let l = connected_components(&m, Adjacency::TwentySix, LabelMode::Volume).unwrap();
        assert_eq!(l.num_components(), 0);
        assert_eq!(l.largest_label(), None);
    }

    #[test]
    fn diagonal_pixels_depend_on_adjacency() {
        let mut m = Mask::empty(grid([3, 3, 1]));
        m.set(0, 0, 0, true);
        m.set(1, 1, 0, true);
        let four = connected_components(&m, Adjacency::Four, LabelMode::Slice(0)).unwrap();
        let eight = connected_components(&m, Adjacency::Eight, LabelMode::Slice(0)).unwrap();
        assert_eq!(four.num_components(), 2);
        assert_eq!(eight.num_components(), 1);
    }

    #[test]
    fn full_slice_is_one_component() {
        let m = Mask::full(grid([5, 7, 3]));
        let l = connected_components(&m, Adjacency::Four, LabelMode::Slice(1)).unwrap();
        assert_eq!(l.component_sizes, vec![35]);
    }

    #[test]
    fn labels_follow_scan_order() {
        let mut m = Mask::empty(grid([5, 1, 1]));
        m.set(4, 0, 0, true);
        m.set(0, 0, 0, true);
        m.set(1, 0, 0, true);
        let l = connected_components(&m, Adjacency::Six, LabelMode::Volume).unwrap();
        assert_eq!(l.labels, vec![1, 1, 0, 0, 2]);
        assert_eq!(l.component_sizes, vec![2, 1]);
        assert_eq!(l.largest_label(), Some(1));
    }

    #[test]
    fn rejects_bad_mode_combinations() {
        let m = Mask::empty(grid([2, 2, 2]));
        assert!(connected_components(&m, Adjacency::Four, LabelMode::Volume).is_err());
        assert!(connected_components(&m, Adjacency::Six, LabelMode::Slice(0)).is_err());
        assert!(connected_components(&m, Adjacency::Four, LabelMode::Slice(2)).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(nx, ny, nz)| {
            proptest::collection::vec(any::<bool>(), nx * ny * nz)
                .prop_map(move |bits| Mask::new(grid([nx, ny, nz]), bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn sizes_sum_to_foreground(m in arb_mask()) {
            for adj in [Adjacency::Six, Adjacency::Eighteen, Adjacency::TwentySix] {
                let l = connected_components(&m, adj, LabelMode::Volume).unwrap();
                prop_assert_eq!(l.component_sizes.iter().sum::<usize>(), m.count());
                for (k, &size) in l.component_sizes.iter().enumerate() {
                    let actual = l.labels.iter().filter(|&&x| x == k as u32 + 1).count();
                    prop_assert_eq!(actual, size);
                }
            }
        }

        #[test]
        fn six_labels_refine_twenty_six(m in arb_mask()) {
            let fine = connected_components(&m, Adjacency::Six, LabelMode::Volume).unwrap();
            let coarse = connected_components(&m, Adjacency::TwentySix, LabelMode::Volume).unwrap();
            let mut parent = vec![0u32; fine.num_components() + 1];
            for (i, &f) in fine.labels.iter().enumerate() {
                if f == 0 {
                    prop_assert_eq!(coarse.labels[i], 0);
                    continue;
                }
                let c = coarse.labels[i];
                if parent[f as usize] == 0 {
                    parent[f as usize] = c;
                }
                prop_assert_eq!(parent[f as usize], c);
            }
        }
    }
}
