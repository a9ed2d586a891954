//! Structured rectilinear grid geometry.
//!
//! Cells are indexed `(i, j, k)` along `x`, `y`, `z`, with `k = 0` the
//! bottom layer so that every axis grows with its index. The dense id is
//! `i + nx * (j + ny * k)`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimension {name} must be >= 1 (got {value})")]
    BadCount { name: &'static str, value: usize },
    #[error("grid spacing {name} must be finite and > 0 (got {value})")]
    BadSpacing { name: &'static str, value: f64 },
    #[error("expected {expected} layer thicknesses, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("cell id {0} is outside the grid")]
    InvalidCell(usize),
    #[error("point ({x}, {y}, {z}) lies outside the domain")]
    OutsideDomain { x: f64, y: f64, z: f64 },
}

/// Coordinate axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Low = 0,
    High = 1,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Low => Side::High,
            Side::High => Side::Low,
        }
    }
}

/// One of the six faces of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Face {
    pub axis: Axis,
    pub side: Side,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::new(Axis::X, Side::Low),
        Face::new(Axis::X, Side::High),
        Face::new(Axis::Y, Side::Low),
        Face::new(Axis::Y, Side::High),
        Face::new(Axis::Z, Side::Low),
        Face::new(Axis::Z, Side::High),
    ];

    pub const fn new(axis: Axis, side: Side) -> Self {
        Face { axis, side }
    }

    /// Position of this face in `[x_low, x_high, y_low, y_high, z_low, z_high]`.
    pub fn index(self) -> usize {
        self.axis as usize * 2 + self.side as usize
    }

    pub fn opposite(self) -> Face {
        Face::new(self.axis, self.side.opposite())
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = ["x", "y", "z"][self.axis.index()];
        let side = match self.side {
            Side::Low => "low",
            Side::High => "high",
        };
        write!(f, "{axis}-{side}")
    }
}

/// Dense cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    nz: usize,
    dx: f64,
    dy: f64,
    dz: Vec<f64>,
    origin: [f64; 3],
    /// Bottom elevation of every layer plus the domain top (length nz + 1).
    z_edges: Vec<f64>,
}

impl Grid {
    /// Builds a structured grid. `dz` lists layer thicknesses from the bottom
    /// layer (`k = 0`) upwards.
    pub fn build_structured(
        nx: usize,
        ny: usize,
        nz: usize,
        dx: f64,
        dy: f64,
        dz: &[f64],
        origin: [f64; 3],
    ) -> Result<Grid, GridError> {
        for (name, value) in [("nx", nx), ("ny", ny), ("nz", nz)] {
            if value == 0 {
                return Err(GridError::BadCount { name, value });
            }
        }
        for (name, value) in [("dx", dx), ("dy", dy)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GridError::BadSpacing { name, value });
            }
        }
        if dz.len() != nz {
            return Err(GridError::LayerCount {
                expected: nz,
                got: dz.len(),
            });
        }
        if let Some(&bad) = dz.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(GridError::BadSpacing { name: "dz", value: bad });
        }
        let mut z_edges = Vec::with_capacity(nz + 1);
        let mut z = origin[2];
        z_edges.push(z);
        for d in dz {
            z += d;
            z_edges.push(z);
        }
        Ok(Grid {
            nx,
            ny,
            nz,
            dx,
            dy,
            dz: dz.to_vec(),
            origin,
            z_edges,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn dz(&self) -> &[f64] {
        &self.dz
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn cells_per_layer(&self) -> usize {
        self.nx * self.ny
    }

    /// Domain extent along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.nx as f64 * self.dx,
            self.ny as f64 * self.dy,
            self.z_edges[self.nz] - self.z_edges[0],
        ]
    }

    pub fn top_elevation(&self) -> f64 {
        self.z_edges[self.nz]
    }

    /// Layer boundary elevations, bottom to top (`nz + 1` values).
    pub fn z_edges(&self) -> &[f64] {
        &self.z_edges
    }

    pub fn cell_id(&self, i: usize, j: usize, k: usize) -> Result<CellId, GridError> {
        if i >= self.nx || j >= self.ny || k >= self.nz {
            return Err(GridError::InvalidCell(
                i.saturating_add(self.nx.saturating_mul(j.saturating_add(self.ny * k))),
            ));
        }
        Ok(CellId(i + self.nx * (j + self.ny * k)))
    }

    pub fn check(&self, cell: CellId) -> Result<CellId, GridError> {
        if cell.0 < self.cell_count() {
            Ok(cell)
        } else {
            Err(GridError::InvalidCell(cell.0))
        }
    }

    /// `(i, j, k)` of a cell. The id must be valid.
    #[inline]
    pub fn ijk(&self, cell: CellId) -> (usize, usize, usize) {
        let layer = self.nx * self.ny;
        let k = cell.0 / layer;
        let rem = cell.0 - k * layer;
        (rem % self.nx, rem / self.nx, k)
    }

    /// Cell size along each axis.
    #[inline]
    pub fn cell_size(&self, cell: CellId) -> [f64; 3] {
        let k = cell.0 / (self.nx * self.ny);
        [self.dx, self.dy, self.dz[k]]
    }

    pub fn cell_volume(&self, cell: CellId) -> f64 {
        let [a, b, c] = self.cell_size(cell);
        a * b * c
    }

    pub fn face_area(&self, cell: CellId, axis: Axis) -> f64 {
        let [a, b, c] = self.cell_size(cell);
        match axis {
            Axis::X => b * c,
            Axis::Y => a * c,
            Axis::Z => a * b,
        }
    }

    /// Neighbour across `face`, or `None` on the domain hull.
    pub fn neighbor(&self, cell: CellId, face: Face) -> Result<Option<CellId>, GridError> {
        self.check(cell)?;
        Ok(self.neighbor_unchecked(cell, face))
    }

    #[inline]
    pub(crate) fn neighbor_unchecked(&self, cell: CellId, face: Face) -> Option<CellId> {
        let (i, j, k) = self.ijk(cell);
        let (pos, len, stride) = match face.axis {
            Axis::X => (i, self.nx, 1),
            Axis::Y => (j, self.ny, self.nx),
            Axis::Z => (k, self.nz, self.nx * self.ny),
        };
        match face.side {
            Side::Low if pos == 0 => None,
            Side::Low => Some(CellId(cell.0 - stride)),
            Side::High if pos + 1 == len => None,
            Side::High => Some(CellId(cell.0 + stride)),
        }
    }

    /// Global coordinates of a point given in cell-local coordinates.
    #[inline]
    pub fn global_position(&self, cell: CellId, local: [f64; 3]) -> [f64; 3] {
        let (i, j, k) = self.ijk(cell);
        [
            self.origin[0] + (i as f64 + local[0]) * self.dx,
            self.origin[1] + (j as f64 + local[1]) * self.dy,
            self.z_edges[k] + local[2] * self.dz[k],
        ]
    }

    /// Finds the cell holding `point` and the local coordinates inside it.
    ///
    /// A point exactly on an interior face belongs to the higher-index cell;
    /// points on the upper hull belong to the last cell with local coordinate 1.
    pub fn locate(&self, point: [f64; 3]) -> Result<(CellId, [f64; 3]), GridError> {
        let outside = || GridError::OutsideDomain {
            x: point[0],
            y: point[1],
            z: point[2],
        };
        let ext = self.extent();
        let rel = [
            point[0] - self.origin[0],
            point[1] - self.origin[1],
            point[2] - self.origin[2],
        ];
        for a in 0..3 {
            if !(rel[a] >= 0.0 && rel[a] <= ext[a]) {
                return Err(outside());
            }
        }
        let (i, lx) = uniform_axis(rel[0], self.dx, self.nx);
        let (j, ly) = uniform_axis(rel[1], self.dy, self.ny);
        // Layers: highest k whose bottom edge is <= z.
        let z = point[2];
        let k = match self.z_edges[..self.nz].iter().rposition(|&bottom| bottom <= z) {
            Some(k) => k,
            None => return Err(outside()),
        };
        let lz = ((z - self.z_edges[k]) / self.dz[k]).min(1.0);
        Ok((CellId(i + self.nx * (j + self.ny * k)), [lx, ly, lz]))
    }
}

fn uniform_axis(rel: f64, d: f64, n: usize) -> (usize, f64) {
    let s = rel / d;
    let idx = (s.floor() as usize).min(n - 1);
    let local = (s - idx as f64).clamp(0.0, 1.0);
    (idx, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tc1() -> Grid {
        Grid::build_structured(1500, 300, 1, 1.0, 1.0, &[1.0], [0.0; 3]).unwrap()
    }

    #[test]
    fn build_counts() {
        assert_eq!(tc1().cell_count(), 450_000);
        let one = Grid::build_structured(1, 1, 1, 1.0, 1.0, &[1.0], [0.0; 3]).unwrap();
        assert_eq!(one.cell_count(), 1);
        let layered = Grid::build_structured(21, 20, 3, 500.0, 500.0, &[200.0, 20.0, 130.0], [0.0; 3]).unwrap();
        assert_eq!(layered.cell_count(), 1260);
        assert_eq!(layered.cells_per_layer(), 420);
        assert_eq!(layered.top_elevation(), 350.0);
    }

    #[test]
    fn build_rejects_bad_dimensions() {
        assert!(matches!(
            Grid::build_structured(0, 1, 1, 1.0, 1.0, &[1.0], [0.0; 3]),
            Err(GridError::BadCount { name: "nx", .. })
        ));
        assert!(matches!(
            Grid::build_structured(1, 1, 1, -1.0, 1.0, &[1.0], [0.0; 3]),
            Err(GridError::BadSpacing { name: "dx", .. })
        ));
        assert!(matches!(
            Grid::build_structured(1, 1, 2, 1.0, 1.0, &[1.0], [0.0; 3]),
            Err(GridError::LayerCount { .. })
        ));
        assert!(Grid::build_structured(1, 1, 1, 1.0, 1.0, &[0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn neighbor_on_hull_and_interior() {
        let g = Grid::build_structured(2, 1, 1, 1.0, 1.0, &[1.0], [0.0; 3]).unwrap();
        let c0 = g.cell_id(0, 0, 0).unwrap();
        assert_eq!(g.neighbor(c0, Face::new(Axis::X, Side::Low)).unwrap(), None);
        assert_eq!(
            g.neighbor(c0, Face::new(Axis::X, Side::High)).unwrap(),
            Some(g.cell_id(1, 0, 0).unwrap())
        );
        assert_eq!(
            g.neighbor(CellId(7), Face::new(Axis::X, Side::High)),
            Err(GridError::InvalidCell(7))
        );
    }

    #[test]
    fn vertical_neighbor_is_involution() {
        let g = Grid::build_structured(3, 2, 3, 1.0, 1.0, &[1.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let c = g.cell_id(1, 1, 1).unwrap();
        let up = g.neighbor(c, Face::new(Axis::Z, Side::High)).unwrap().unwrap();
        assert_eq!(g.ijk(up), (1, 1, 2));
        let back = g.neighbor(up, Face::new(Axis::Z, Side::Low)).unwrap().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn locate_examples() {
        let g = tc1();
        let (c, l) = g.locate([10.0, 150.0, 0.5]).unwrap();
        assert_eq!(g.ijk(c), (10, 150, 0));
        assert_eq!(l, [0.0, 0.0, 0.5]);
        let (c, l) = g.locate([0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, CellId(0));
        assert_eq!(l, [0.0; 3]);
        let (c, l) = g.locate([3.5, 7.5, 0.5]).unwrap();
        assert_eq!(g.ijk(c), (3, 7, 0));
        assert_eq!(l, [0.5, 0.5, 0.5]);
        // upper hull stays in the last cell
        let (c, l) = g.locate([1500.0, 300.0, 1.0]).unwrap();
        assert_eq!(g.ijk(c), (1499, 299, 0));
        assert_eq!(l, [1.0, 1.0, 1.0]);
        assert!(matches!(
            g.locate([1500.5, 1.0, 0.5]),
            Err(GridError::OutsideDomain { .. })
        ));
    }

    #[test]
    fn locate_layer_tie_goes_up() {
        let g = Grid::build_structured(1, 1, 3, 1.0, 1.0, &[200.0, 20.0, 130.0], [0.0; 3]).unwrap();
        let (c, l) = g.locate([0.5, 0.5, 200.0]).unwrap();
        assert_eq!(g.ijk(c), (0, 0, 1));
        assert_eq!(l[2], 0.0);
        let (c, l) = g.locate([0.5, 0.5, 350.0]).unwrap();
        assert_eq!(g.ijk(c), (0, 0, 2));
        assert_eq!(l[2], 1.0);
    }

    #[test]
    fn volumes_sum_to_domain() {
        let g = Grid::build_structured(4, 3, 3, 2.0, 0.5, &[1.0, 0.25, 4.0], [1.0, 2.0, 3.0]).unwrap();
        let total: f64 = (0..g.cell_count()).map(|c| g.cell_volume(CellId(c))).sum();
        let [a, b, c] = g.extent();
        assert_eq!(total, a * b * c);
    }

    proptest! {
        #[test]
        fn ijk_round_trip(nx in 1usize..20, ny in 1usize..20, nz in 1usize..5, seed in 0usize..10_000) {
            let g = Grid::build_structured(nx, ny, nz, 1.0, 1.0, &vec![1.0; nz], [0.0; 3]).unwrap();
            let c = CellId(seed % g.cell_count());
            let (i, j, k) = g.ijk(c);
            prop_assert_eq!(g.cell_id(i, j, k).unwrap(), c);
        }

        #[test]
        fn neighbor_opposite_returns(nx in 1usize..8, ny in 1usize..8, nz in 1usize..4, seed in 0usize..10_000, f in 0usize..6) {
            let g = Grid::build_structured(nx, ny, nz, 1.0, 2.0, &vec![1.5; nz], [0.0; 3]).unwrap();
            let c = CellId(seed % g.cell_count());
            let face = Face::ALL[f];
            if let Some(n) = g.neighbor(c, face).unwrap() {
                prop_assert_eq!(g.neighbor(n, face.opposite()).unwrap(), Some(c));
            }
        }

        #[test]
        fn locate_inverts_global_position(
            seed in 0usize..10_000,
            lx in 0.01f64..0.99, ly in 0.01f64..0.99, lz in 0.01f64..0.99,
        ) {
            let g = Grid::build_structured(5, 4, 3, 3.0, 0.7, &[2.0, 0.5, 7.0], [10.0, -4.0, 1.0]).unwrap();
            let c = CellId(seed % g.cell_count());
            let p = g.global_position(c, [lx, ly, lz]);
            let (c2, l2) = g.locate(p).unwrap();
            prop_assert_eq!(c2, c);
            for (a, b) in l2.iter().zip([lx, ly, lz]) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
