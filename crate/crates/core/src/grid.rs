//! Voxel grid geometry shared by volumes, masks and connectivity maps.
//!
//! All buffers use x-fastest linear order: `index = x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions and physical spacing (mm per voxel) of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

// Spacing is validated finite on construction.
impl Eq for Grid {}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("nonpositive dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("nonpositive spacing in {spacing:?}")));
        }
        Ok(Self { dims, spacing })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn index_of(&self, c: VoxelCoord) -> usize {
        self.index(c.x, c.y, c.z)
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> VoxelCoord {
        let nx = self.dims[0];
        let ny = self.dims[1];
        VoxelCoord {
            x: idx % nx,
            y: (idx / nx) % ny,
            z: idx / (nx * ny),
        }
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        c.x < self.dims[0] && c.y < self.dims[1] && c.z < self.dims[2]
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox {
            min: VoxelCoord::new(0, 0, 0),
            max: VoxelCoord::new(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1),
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Calls `f(neighbor_index, offset)` for every in-bounds neighbor of `idx`.
    #[inline]
    pub fn for_each_neighbor(
        &self,
        idx: usize,
        offsets: &[[isize; 3]],
        mut f: impl FnMut(usize, [isize; 3]),
    ) {
        let c = self.coord(idx);
        let [nx, ny, nz] = self.dims;
        for &off in offsets {
            let x = c.x as isize + off[0];
            let y = c.y as isize + off[1];
            let z = c.z as isize + off[2];
            if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize
            {
                continue;
            }
            f(self.index(x as usize, y as usize, z as usize), off);
        }
    }

    /// Physical length in mm of a neighbor offset.
    pub fn offset_length(&self, off: [isize; 3]) -> f64 {
        let [sx, sy, sz] = self.spacing;
        let dx = off[0] as f64 * sx;
        let dy = off[1] as f64 * sy;
        let dz = off[2] as f64 * sz;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelCoord {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    /// Key ordering voxels lexicographically by (z, y, x), i.e. scan order.
    pub fn scan_key(&self) -> (usize, usize, usize) {
        (self.z, self.y, self.x)
    }
}

impl std::fmt::Display for VoxelCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Axis-aligned box with inclusive voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: VoxelCoord,
    pub max: VoxelCoord,
}

impl BoundingBox {
    pub fn new(min: VoxelCoord, max: VoxelCoord) -> Result<Self> {
        if min.x > max.x || min.y > max.y || min.z > max.z {
            return Err(Error::invalid(format!("box min {min} exceeds max {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn from_intervals(x: (usize, usize), y: (usize, usize), z: (usize, usize)) -> Result<Self> {
        Self::new(VoxelCoord::new(x.0, y.0, z.0), VoxelCoord::new(x.1, y.1, z.1))
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.max.x - self.min.x + 1,
            self.max.y - self.min.y + 1,
            self.max.z - self.min.z + 1,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn interval(&self, axis: usize) -> (usize, usize) {
        match axis {
            0 => (self.min.x, self.max.x),
            1 => (self.min.y, self.max.y),
            _ => (self.min.z, self.max.z),
        }
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        (self.min.x..=self.max.x).contains(&c.x)
            && (self.min.y..=self.max.y).contains(&c.y)
            && (self.min.z..=self.max.z).contains(&c.z)
    }

    pub fn fits_in(&self, grid: &Grid) -> bool {
        grid.contains(self.max)
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let lo = |a: usize, b: usize| a.max(b);
        let hi = |a: usize, b: usize| a.min(b);
        let min = VoxelCoord::new(
            lo(self.min.x, other.min.x),
            lo(self.min.y, other.min.y),
            lo(self.min.z, other.min.z),
        );
        let max = VoxelCoord::new(
            hi(self.max.x, other.max.x),
            hi(self.max.y, other.max.y),
            hi(self.max.z, other.max.z),
        );
        BoundingBox::new(min, max).ok()
    }

    /// Box grown by `margin` voxels per side, clamped to `grid`.
    pub fn padded(&self, margin: usize, grid: &Grid) -> BoundingBox {
        let [nx, ny, nz] = grid.dims;
        BoundingBox {
            min: VoxelCoord::new(
                self.min.x.saturating_sub(margin),
                self.min.y.saturating_sub(margin),
                self.min.z.saturating_sub(margin),
            ),
            max: VoxelCoord::new(
                (self.max.x + margin).min(nx - 1),
                (self.max.y + margin).min(ny - 1),
                (self.max.z + margin).min(nz - 1),
            ),
        }
    }

    /// Translates a coordinate local to this box into the enclosing grid.
    pub fn to_global(&self, local: VoxelCoord) -> VoxelCoord {
        VoxelCoord::new(
            local.x + self.min.x,
            local.y + self.min.y,
            local.z + self.min.z,
        )
    }
}

/// Neighborhood relation: 6/18/26 in 3D, 4/8 within an axial slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Adjacency {
    Four,
    Eight,
    Six,
    Eighteen,
    TwentySix,
}

impl Adjacency {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Adjacency::Four),
            8 => Ok(Adjacency::Eight),
            6 => Ok(Adjacency::Six),
            18 => Ok(Adjacency::Eighteen),
            26 => Ok(Adjacency::TwentySix),
            _ => Err(Error::invalid(format!(
                "adjacency must be one of 4, 8, 6, 18, 26 (got {n})"
            ))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Adjacency::Four => 4,
            Adjacency::Eight => 8,
            Adjacency::Six => 6,
            Adjacency::Eighteen => 18,
            Adjacency::TwentySix => 26,
        }
    }

    pub fn is_planar(self) -> bool {
        matches!(self, Adjacency::Four | Adjacency::Eight)
    }

    /// Neighbor offsets, in a fixed order.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(self.count() as usize);
        let zs: &[isize] = if self.is_planar() { &[0] } else { &[-1, 0, 1] };
        for &dz in zs {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                    let keep = match self {
                        Adjacency::Four | Adjacency::Six => nonzero == 1,
                        Adjacency::Eight => nonzero >= 1,
                        Adjacency::Eighteen => nonzero == 1 || nonzero == 2,
                        Adjacency::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl std::fmt::Display for Adjacency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_counts_match_names() {
        for adj in [
            Adjacency::Four,
            Adjacency::Eight,
            Adjacency::Six,
            Adjacency::Eighteen,
            Adjacency::TwentySix,
        ] {
            assert_eq!(adj.offsets().len() as u32, adj.count());
        }
    }

    #[test]
    fn index_coord_roundtrip() {
        let g = Grid::new([3, 4, 5], [1.0, 1.0, 1.0]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index_of(g.coord(i)), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::new([0, 4, 4], [1.0; 3]).is_err());
        assert!(Grid::new([4, 4, 4], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn padded_box_is_clamped() {
        let g = Grid::new([10, 10, 10], [1.0; 3]).unwrap();
        let b = BoundingBox::from_intervals((1, 8), (0, 9), (4, 5)).unwrap();
        let p = b.padded(3, &g);
        assert_eq!(p.interval(0), (0, 9));
        assert_eq!(p.interval(2), (1, 8));
    }
}
