//! Scalar volumes and binary masks, plus the voxelwise operations every stage shares.

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid, VoxelCoord};

/// 3D scalar field (HU for CT input, HU/mm for gradient volumes).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn at(&self, c: VoxelCoord) -> f64 {
        self.data[self.grid.index_of(c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Binary object on a voxel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: Grid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} does not match dims {:?}",
                bits.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            bits: vec![false; grid.len()],
        }
    }

    pub fn full(grid: Grid) -> Self {
        Self {
            grid,
            bits: vec![true; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut bits = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self { grid, bits }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn at(&self, c: VoxelCoord) -> bool {
        self.bits[self.grid.index_of(c)]
    }

    #[inline]
    pub fn contains_index(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.grid.index(x, y, z);
        self.bits[i] = v;
    }

    #[inline]
    pub fn set_index(&mut self, idx: usize, v: bool) {
        self.bits[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.grid.dims == other.grid.dims
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        check_same_dims(self.grid(), other.grid())?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        check_same_dims(self.grid(), other.grid())?;
        Ok(Mask {
            grid: self.grid,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        check_same_dims(self.grid(), other.grid())?;
        Ok(Mask {
            grid: self.grid,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// Tight bounding box of the foreground, `None` when empty.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for i in self.iter_indices() {
            let c = self.grid.coord(i);
            any = true;
            for (a, v) in [c.x, c.y, c.z].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        any.then(|| BoundingBox {
            min: VoxelCoord::new(lo[0], lo[1], lo[2]),
            max: VoxelCoord::new(hi[0], hi[1], hi[2]),
        })
    }

    /// Number of foreground voxels in axial slice `z`.
    pub fn slice_count(&self, z: usize) -> usize {
        let n = self.grid.dims[0] * self.grid.dims[1];
        self.bits[z * n..(z + 1) * n].iter().filter(|&&b| b).count()
    }

    /// Axial slice `z` as a row-major (x-fastest) bit vector.
    pub fn axial_slice(&self, z: usize) -> &[bool] {
        let n = self.grid.dims[0] * self.grid.dims[1];
        &self.bits[z * n..(z + 1) * n]
    }

    pub fn set_axial_slice(&mut self, z: usize, slice: &[bool]) {
        let n = self.grid.dims[0] * self.grid.dims[1];
        assert_eq!(slice.len(), n, "slice length mismatch");
        self.bits[z * n..(z + 1) * n].copy_from_slice(slice);
    }

    /// Writes this mask back into a grid of `full` dims at the offset of `b`.
    pub fn embed(&self, b: &BoundingBox, full: Grid) -> Result<Mask> {
        if b.extent() != self.grid.dims || !b.fits_in(&full) {
            return Err(Error::invalid("embedding box does not match mask or target grid"));
        }
        let mut out = Mask::empty(full);
        for i in self.iter_indices() {
            let g = b.to_global(self.grid.coord(i));
            out.bits[full.index_of(g)] = true;
        }
        Ok(out)
    }
}

pub(crate) fn check_same_dims(a: &Grid, b: &Grid) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// Per-voxel gradient magnitude from central differences divided by spacing,
/// one-sided at the borders. Axes of extent 1 contribute zero.
pub fn gradient_magnitude(v: &Volume) -> Volume {
    let g = *v.grid();
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing;
    let data = v.data();
    let strides = [1usize, nx, nx * ny];
    let extents = [nx, ny, nz];
    let spacing = [sx, sy, sz];

    let mut out = Vec::with_capacity(g.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = g.index(x, y, z);
                let pos = [x, y, z];
                let mut sum = 0.0;
                for a in 0..3 {
                    let n = extents[a];
                    if n < 2 {
                        continue;
                    }
                    let p = pos[a];
                    let s = strides[a];
                    let d = if p == 0 {
                        (data[idx + s] - data[idx]) / spacing[a]
                    } else if p == n - 1 {
                        (data[idx] - data[idx - s]) / spacing[a]
                    } else {
                        (data[idx + s] - data[idx - s]) / (2.0 * spacing[a])
                    };
                    sum += d * d;
                }
                out.push(sum.sqrt());
            }
        }
    }
    Volume { grid: g, data: out }
}

/// Voxels with `lo <= value <= hi`.
pub fn threshold(v: &Volume, lo: f64, hi: f64) -> Result<Mask> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::invalid(format!("threshold bounds lo={lo} > hi={hi}")));
    }
    Ok(Mask {
        grid: *v.grid(),
        bits: v.data().iter().map(|&x| lo <= x && x <= hi).collect(),
    })
}

/// Sub-volume covering `b`; spacing is preserved.
pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    if !b.fits_in(v.grid()) {
        return Err(Error::invalid(format!(
            "box {}..{} exceeds dims {:?}",
            b.min,
            b.max,
            v.dims()
        )));
    }
    let ext = b.extent();
    let grid = Grid::new(ext, v.spacing())?;
    let mut data = Vec::with_capacity(grid.len());
    for z in b.min.z..=b.max.z {
        for y in b.min.y..=b.max.y {
            let start = v.grid().index(b.min.x, y, z);
            data.extend_from_slice(&v.data()[start..start + ext[0]]);
        }
    }
    Volume::new(grid, data)
}

pub fn crop_mask(m: &Mask, b: &BoundingBox) -> Result<Mask> {
    if !b.fits_in(m.grid()) {
        return Err(Error::invalid("box exceeds mask dims"));
    }
    let ext = b.extent();
    let grid = Grid::new(ext, m.spacing())?;
    let mut bits = Vec::with_capacity(grid.len());
    for z in b.min.z..=b.max.z {
        for y in b.min.y..=b.max.y {
            let start = m.grid().index(b.min.x, y, z);
            bits.extend_from_slice(&m.bits()[start..start + ext[0]]);
        }
    }
    Mask::new(grid, bits)
}

/// Foreground voxels with at least one background (or out-of-grid) 6-neighbor.
pub fn surface_voxels(m: &Mask) -> Vec<usize> {
    let g = m.grid();
    let [nx, ny, nz] = g.dims;
    m.iter_indices()
        .filter(|&i| {
            let c = g.coord(i);
            let at = |x: isize, y: isize, z: isize| {
                x >= 0
                    && y >= 0
                    && z >= 0
                    && (x as usize) < nx
                    && (y as usize) < ny
                    && (z as usize) < nz
                    && m.get(x as usize, y as usize, z as usize)
            };
            let (x, y, z) = (c.x as isize, c.y as isize, c.z as isize);
            !(at(x - 1, y, z)
                && at(x + 1, y, z)
                && at(x, y - 1, z)
                && at(x, y + 1, z)
                && at(x, y, z - 1)
                && at(x, y, z + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3], s: [f64; 3]) -> Grid {
        Grid::new(d, s).unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = Volume::filled(grid([4, 4, 4], [1.0; 3]), 100.0);
        assert!(gradient_magnitude(&v).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        // f = 2x: central difference (f(x+1) - f(x-1)) / 2 = 2 per unit spacing.
        let v = Volume::from_fn(grid([6, 4, 4], [1.0; 3]), |x, _, _| 2.0 * x as f64);
        let g = gradient_magnitude(&v);
        for z in 0..4 {
            for y in 0..4 {
                for x in 1..5 {
                    assert_eq!(g.get(x, y, z), 2.0);
                }
            }
        }
        let v = Volume::from_fn(grid([6, 4, 4], [0.5, 1.0, 1.0]), |x, _, _| 2.0 * x as f64);
        assert_eq!(gradient_magnitude(&v).get(2, 1, 1), 4.0);
        assert_eq!(gradient_magnitude(&v).spacing(), [0.5, 1.0, 1.0]);
    }

    #[test]
    fn gradient_one_sided_at_border() {
        let v = Volume::from_fn(grid([3, 2, 2], [1.0; 3]), |x, _, _| (x * x) as f64);
        let g = gradient_magnitude(&v);
        assert_eq!(g.get(0, 0, 0), 1.0);
        assert_eq!(g.get(2, 0, 0), 3.0);
        assert_eq!(g.get(1, 0, 0), 2.0);
    }

    #[test]
    fn threshold_cases() {
        let g = grid([3, 1, 1], [1.0; 3]);
        let v = Volume::filled(g, 100.0);
        assert_eq!(threshold(&v, 0.0, 200.0).unwrap().count(), 3);
        assert_eq!(threshold(&v, 200.0, 300.0).unwrap().count(), 0);
        let v = Volume::new(g, vec![-1000.0, 40.0, 1200.0]).unwrap();
        let m = threshold(&v, 600.0, f64::INFINITY).unwrap();
        assert_eq!(m.bits(), &[false, false, true]);
        assert!(threshold(&v, 2.0, 1.0).is_err());
    }

    #[test]
    fn crop_cases() {
        let g = grid([5, 5, 3], [1.12, 1.12, 3.0]);
        let v = Volume::from_fn(g, |x, y, z| (x + 10 * y + 100 * z) as f64);
        assert_eq!(crop(&v, &g.full_box()).unwrap(), v);
        let b = BoundingBox::from_intervals((2, 2), (3, 3), (1, 1)).unwrap();
        let c = crop(&v, &b).unwrap();
        assert_eq!(c.dims(), [1, 1, 1]);
        assert_eq!(c.data(), &[v.get(2, 3, 1)]);
        assert_eq!(c.spacing(), [1.12, 1.12, 3.0]);
        let bad = BoundingBox::from_intervals((0, 5), (0, 1), (0, 1)).unwrap();
        assert!(crop(&v, &bad).is_err());
    }

    #[test]
    fn crop_embed_roundtrip() {
        let g = grid([6, 5, 4], [1.0; 3]);
        let m = Mask::from_fn(g, |x, y, z| (x + y + z) % 3 == 0 && x > 0 && y < 4);
        let b = m.tight_box().unwrap();
        let back = crop_mask(&m, &b).unwrap().embed(&b, g).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn surface_of_solid_cube() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let m = Mask::full(g);
        // 125 voxels minus the 3x3x3 interior.
        assert_eq!(surface_voxels(&m).len(), 125 - 27);
    }
}
