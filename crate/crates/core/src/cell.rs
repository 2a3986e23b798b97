//! Periodic reference cell Y = [0,1]^d on a uniform voxel grid.
//!
//! The cell is described by a per-voxel pore/solid indicator interpreted
//! periodically: opposite faces of Y are identified. Geometric measures
//! (porosity, interface area) are computed by voxel counting, which is
//! exact for axis-aligned geometries and converges as n grows otherwise.

use crate::error::{Error, Result};

/// Phase of a single voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pore,
    Solid,
}

/// Primitive or file-based description of the cell microstructure.
#[derive(Debug, Clone)]
pub enum GeometrySpec {
    /// Layered channel: a pore slab of the given volume fraction, normal to
    /// `normal_axis`. Grid-aligned exactly when `pore_fraction * n` is an
    /// integer; otherwise the slab thickness is rounded to whole voxels.
    Channel {
        dim: usize,
        n: usize,
        pore_fraction: f64,
        normal_axis: usize,
    },
    /// Centered solid box with the given side lengths (one per axis).
    /// A voxel is solid when its center lies inside the box.
    Inclusion { dim: usize, n: usize, sides: Vec<f64> },
    /// Explicit indicator grid, row-major with axis 0 fastest.
    /// `true` marks solid voxels.
    Bitmap { dim: usize, n: usize, solid: Vec<bool> },
}

/// Discrete periodic reference cell with permittivity contrast.
///
/// `lambda_sq` is the dimensionless pore permittivity and `gamma` the
/// dimensionless solid permittivity, so eps(y) = lambda_sq on the pore
/// phase and gamma on the solid phase.
#[derive(Debug, Clone)]
pub struct UnitCell {
    dim: usize,
    n: usize,
    phase: Vec<Phase>,
    pub lambda_sq: f64,
    pub gamma: f64,
}

impl UnitCell {
    /// Builds a cell from a geometry spec. Fails on an empty pore phase,
    /// non-positive resolution, or inconsistent dimensions.
    pub fn from_spec(spec: &GeometrySpec, lambda_sq: f64, gamma: f64) -> Result<Self> {
        let (dim, n, phase) = match spec {
            GeometrySpec::Channel {
                dim,
                n,
                pore_fraction,
                normal_axis,
            } => {
                check_dim_n(*dim, *n)?;
                if *normal_axis >= *dim {
                    return Err(Error::InvalidGeometry(format!(
                        "channel normal axis {normal_axis} out of range for dim {dim}"
                    )));
                }
                if !(*pore_fraction > 0.0 && *pore_fraction <= 1.0) {
                    return Err(Error::InvalidGeometry(format!(
                        "channel pore fraction must lie in (0, 1], got {pore_fraction}"
                    )));
                }
                let rows = ((pore_fraction * *n as f64).round() as usize).clamp(1, *n);
                let phase = build_phase(*dim, *n, |idx| {
                    if idx[*normal_axis] < rows {
                        Phase::Pore
                    } else {
                        Phase::Solid
                    }
                });
                (*dim, *n, phase)
            }
            GeometrySpec::Inclusion { dim, n, sides } => {
                check_dim_n(*dim, *n)?;
                if sides.len() != *dim {
                    return Err(Error::InvalidGeometry(format!(
                        "inclusion needs {dim} side lengths, got {}",
                        sides.len()
                    )));
                }
                if sides.iter().any(|s| *s < 0.0 || *s > 1.0) {
                    return Err(Error::InvalidGeometry(
                        "inclusion side lengths must lie in [0, 1]".into(),
                    ));
                }
                let h = 1.0 / *n as f64;
                let phase = build_phase(*dim, *n, |idx| {
                    let inside = (0..*dim).all(|a| {
                        let c = (idx[a] as f64 + 0.5) * h;
                        let half = 0.5 * sides[a];
                        c >= 0.5 - half && c < 0.5 + half
                    });
                    if inside {
                        Phase::Solid
                    } else {
                        Phase::Pore
                    }
                });
                (*dim, *n, phase)
            }
            GeometrySpec::Bitmap { dim, n, solid } => {
                check_dim_n(*dim, *n)?;
                let total = n.pow(*dim as u32);
                if solid.len() != total {
                    return Err(Error::InvalidGeometry(format!(
                        "bitmap has {} entries, expected {total}",
                        solid.len()
                    )));
                }
                let phase = solid
                    .iter()
                    .map(|s| if *s { Phase::Solid } else { Phase::Pore })
                    .collect();
                (*dim, *n, phase)
            }
        };
        Self::new(dim, n, phase, lambda_sq, gamma)
    }

    pub fn new(dim: usize, n: usize, phase: Vec<Phase>, lambda_sq: f64, gamma: f64) -> Result<Self> {
        check_dim_n(dim, n)?;
        if phase.len() != n.pow(dim as u32) {
            return Err(Error::InvalidGeometry(format!(
                "phase array has {} entries, expected {}",
                phase.len(),
                n.pow(dim as u32)
            )));
        }
        if !phase.contains(&Phase::Pore) {
            return Err(Error::InvalidGeometry("pore phase is empty".into()));
        }
        if !(lambda_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "pore permittivity lambda_sq must be positive, got {lambda_sq}"
            )));
        }
        if !(gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "solid permittivity gamma must be non-negative, got {gamma}"
            )));
        }
        Ok(Self {
            dim,
            n,
            phase,
            lambda_sq,
            gamma,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Voxels per axis.
    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Voxel side length 1/n.
    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn voxel_count(&self) -> usize {
        self.phase.len()
    }

    pub fn phase(&self, voxel: usize) -> Phase {
        self.phase[voxel]
    }

    pub fn is_pore(&self, voxel: usize) -> bool {
        self.phase[voxel] == Phase::Pore
    }

    /// Permittivity of a voxel: lambda_sq on pore, gamma on solid.
    pub fn eps(&self, voxel: usize) -> f64 {
        match self.phase[voxel] {
            Phase::Pore => self.lambda_sq,
            Phase::Solid => self.gamma,
        }
    }

    /// Linear voxel index from per-axis indices (no periodic wrap applied).
    pub fn voxel_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        let mut stride = 1;
        for a in 0..self.dim {
            lin += idx[a] * stride;
            stride *= self.n;
        }
        lin
    }

    /// Per-axis indices of a linear voxel index.
    pub fn voxel_coords(&self, mut lin: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for a in 0..self.dim {
            idx[a] = lin % self.n;
            lin /= self.n;
        }
        idx
    }

    /// Porosity p = |Y^p| / |Y| by voxel counting.
    pub fn porosity(&self) -> f64 {
        let pore = self.phase.iter().filter(|p| **p == Phase::Pore).count();
        pore as f64 / self.phase.len() as f64
    }

    /// Interface measure: (d-1)-dimensional area of the pore/solid interface,
    /// counting voxel faces between the two phases with periodic wrap. Each
    /// face carries area (1/n)^(d-1).
    pub fn interface_measure(&self) -> f64 {
        let mut faces = 0usize;
        for lin in 0..self.phase.len() {
            let idx = self.voxel_coords(lin);
            for a in 0..self.dim {
                let mut nb = idx;
                nb[a] = (idx[a] + 1) % self.n;
                let nb_lin = self.voxel_index(&nb[..self.dim]);
                if self.phase[lin] != self.phase[nb_lin] {
                    faces += 1;
                }
            }
        }
        faces as f64 * self.spacing().powi(self.dim as i32 - 1)
    }

    /// Interface faces as (pore voxel, axis, plus_side) triples: the face
    /// sits on the `axis` side of the pore voxel, toward +axis when
    /// `plus_side` is true. Used for surface quadrature.
    pub fn interface_faces(&self) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        for lin in 0..self.phase.len() {
            if self.phase[lin] != Phase::Pore {
                continue;
            }
            let idx = self.voxel_coords(lin);
            for a in 0..self.dim {
                let mut plus = idx;
                plus[a] = (idx[a] + 1) % self.n;
                if self.phase[self.voxel_index(&plus[..self.dim])] == Phase::Solid {
                    out.push((lin, a, true));
                }
                let mut minus = idx;
                minus[a] = (idx[a] + self.n - 1) % self.n;
                if self.phase[self.voxel_index(&minus[..self.dim])] == Phase::Solid {
                    out.push((lin, a, false));
                }
            }
        }
        out
    }

    /// Returns the cell with axes `i` and `j` of the indicator swapped.
    pub fn swap_axes(&self, i: usize, j: usize) -> Result<Self> {
        if i >= self.dim || j >= self.dim {
            return Err(Error::InvalidGeometry(format!(
                "axis swap ({i}, {j}) out of range for dim {}",
                self.dim
            )));
        }
        let mut phase = self.phase.clone();
        for lin in 0..self.phase.len() {
            let mut idx = self.voxel_coords(lin);
            idx.swap(i, j);
            phase[self.voxel_index(&idx[..self.dim])] = self.phase[lin];
        }
        Self::new(self.dim, self.n, phase, self.lambda_sq, self.gamma)
    }

    /// Returns the cell with the indicator translated by `shift` voxels
    /// (periodically) along each axis.
    pub fn translate(&self, shift: &[usize]) -> Result<Self> {
        let mut phase = self.phase.clone();
        for lin in 0..self.phase.len() {
            let mut idx = self.voxel_coords(lin);
            for a in 0..self.dim {
                idx[a] = (idx[a] + shift[a]) % self.n;
            }
            phase[self.voxel_index(&idx[..self.dim])] = self.phase[lin];
        }
        Self::new(self.dim, self.n, phase, self.lambda_sq, self.gamma)
    }
}

fn check_dim_n(dim: usize, n: usize) -> Result<()> {
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidGeometry(format!(
            "cell dimension must be 2 or 3, got {dim}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidGeometry("cell resolution must be positive".into()));
    }
    Ok(())
}

fn build_phase(dim: usize, n: usize, f: impl Fn(&[usize]) -> Phase) -> Vec<Phase> {
    let total = n.pow(dim as u32);
    let mut phase = Vec::with_capacity(total);
    let mut idx = [0usize; 3];
    for lin in 0..total {
        let mut rem = lin;
        for a in 0..dim {
            idx[a] = rem % n;
            rem /= n;
        }
        phase.push(f(&idx[..dim]));
    }
    phase
}

/// Parses a plain-text bitmap: optional `#` comment lines, a header line
/// `nx ny [nz]` (all equal), then whitespace-separated 0/1 tokens, axis 0
/// fastest. 1 marks solid, 0 pore.
pub fn parse_bitmap(text: &str) -> Result<GeometrySpec> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MalformedInput("bitmap is empty".into()))?;
    let header: Vec<usize> = header_line
        .split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| {
                Error::MalformedInput(format!("bitmap header token `{tok}` is not an integer"))
            })
        })
        .collect::<Result<_>>()?;
    let mut body = Vec::new();
    for tok in lines.flat_map(|l| l.split_whitespace()) {
        match tok {
            "0" => body.push(false),
            "1" => body.push(true),
            other => {
                return Err(Error::MalformedInput(format!(
                    "bitmap entries must be 0 or 1, got `{other}`"
                )))
            }
        }
    }
    let dim = header.len();
    if dim != 2 && dim != 3 {
        return Err(Error::MalformedInput(format!(
            "bitmap header must list 2 or 3 extents, got {dim}"
        )));
    }
    let n = header[0];
    if header.iter().any(|h| *h != n) {
        return Err(Error::MalformedInput(format!(
            "bitmap must be square/cubic, got extents {header:?}"
        )));
    }
    let expected = n.pow(dim as u32);
    if body.len() != expected {
        return Err(Error::MalformedInput(format!(
            "bitmap body has {} entries, expected {expected}",
            body.len()
        )));
    }
    Ok(GeometrySpec::Bitmap { dim, n, solid: body })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn channel(p: f64, n: usize) -> UnitCell {
        UnitCell::from_spec(
            &GeometrySpec::Channel {
                dim: 2,
                n,
                pore_fraction: p,
                normal_axis: 1,
            },
            1.0,
            0.0,
        )
        .unwrap()
    }

    fn all_pore(dim: usize, n: usize) -> UnitCell {
        UnitCell::from_spec(
            &GeometrySpec::Inclusion {
                dim,
                n,
                sides: vec![0.0; dim],
            },
            1.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn channel_marks_expected_rows() {
        let cell = channel(0.6, 10);
        let pore_rows: Vec<usize> = (0..10)
            .filter(|j| cell.is_pore(cell.voxel_index(&[0, *j])))
            .collect();
        assert_eq!(pore_rows, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(cell.porosity(), 0.6);
    }

    #[test]
    fn zero_side_inclusion_is_all_pore() {
        let cell = all_pore(2, 8);
        assert_eq!(cell.porosity(), 1.0);
        assert_eq!(cell.interface_measure(), 0.0);
    }

    #[test]
    fn bitmap_block_porosity() {
        // 16x16 grid with a solid 8x8 block.
        let mut solid = vec![false; 256];
        for j in 4..12 {
            for i in 4..12 {
                solid[i + 16 * j] = true;
            }
        }
        let cell = UnitCell::from_spec(&GeometrySpec::Bitmap { dim: 2, n: 16, solid }, 1.0, 0.0).unwrap();
        assert_eq!(cell.porosity(), 0.75);
        assert!((cell.interface_measure() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn channel_interface_is_two_walls() {
        let cell = channel(0.6, 10);
        assert!((cell.interface_measure() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn centered_block_perimeter() {
        let cell = UnitCell::from_spec(
            &GeometrySpec::Inclusion {
                dim: 2,
                n: 32,
                sides: vec![0.5, 0.5],
            },
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(cell.porosity(), 0.75);
        assert!((cell.interface_measure() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn refinement_keeps_aligned_measures() {
        for n in [10, 20, 40] {
            let cell = channel(0.6, n);
            assert_eq!(cell.porosity(), 0.6);
            assert!((cell.interface_measure() - 2.0).abs() < 1e-12);
        }
        for n in [16, 32, 64] {
            let cell = UnitCell::from_spec(
                &GeometrySpec::Inclusion {
                    dim: 2,
                    n,
                    sides: vec![0.5, 0.5],
                },
                1.0,
                0.0,
            )
            .unwrap();
            assert_eq!(cell.porosity(), 0.75);
            assert!((cell.interface_measure() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_dimensional_channel() {
        let cell = UnitCell::from_spec(
            &GeometrySpec::Channel {
                dim: 3,
                n: 8,
                pore_fraction: 0.5,
                normal_axis: 1,
            },
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(cell.porosity(), 0.5);
        // Two unit-area walls.
        assert!((cell.interface_measure() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pore_rejected() {
        let err = UnitCell::from_spec(
            &GeometrySpec::Bitmap {
                dim: 2,
                n: 2,
                solid: vec![true; 4],
            },
            1.0,
            0.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));
    }

    #[test]
    fn zero_resolution_rejected() {
        assert!(UnitCell::from_spec(
            &GeometrySpec::Channel {
                dim: 2,
                n: 0,
                pore_fraction: 0.5,
                normal_axis: 1
            },
            1.0,
            0.0
        )
        .is_err());
    }

    #[test]
    fn bitmap_parse_roundtrip_and_errors() {
        let spec = parse_bitmap("# comment\n2 2\n0 1\n1 0\n").unwrap();
        let cell = UnitCell::from_spec(&spec, 1.0, 0.5).unwrap();
        assert_eq!(cell.porosity(), 0.5);

        assert!(parse_bitmap("2 2\n0 1 1\n").is_err());
        assert!(parse_bitmap("2 2\n0 1 1 7\n").is_err());
        assert!(parse_bitmap("2 3\n0 1 1 0 0 0\n").is_err());
        assert!(parse_bitmap("abc").is_err());
    }

    #[test]
    fn negative_parameters_rejected() {
        let spec = GeometrySpec::Channel {
            dim: 2,
            n: 4,
            pore_fraction: 0.5,
            normal_axis: 1,
        };
        assert!(UnitCell::from_spec(&spec, 0.0, 0.0).is_err());
        assert!(UnitCell::from_spec(&spec, 1.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn porosity_invariant_under_translation(
            bits in proptest::collection::vec(any::<bool>(), 36),
            sx in 0usize..6,
            sy in 0usize..6,
        ) {
            prop_assume!(bits.iter().any(|b| !b));
            let cell = UnitCell::from_spec(
                &GeometrySpec::Bitmap { dim: 2, n: 6, solid: bits },
                1.0,
                0.0,
            ).unwrap();
            let moved = cell.translate(&[sx, sy]).unwrap();
            prop_assert_eq!(cell.porosity(), moved.porosity());
            prop_assert!((cell.interface_measure() - moved.interface_measure()).abs() < 1e-12);
        }

        #[test]
        fn interface_invariant_under_axis_swap(
            bits in proptest::collection::vec(any::<bool>(), 36),
        ) {
            prop_assume!(bits.iter().any(|b| !b));
            let cell = UnitCell::from_spec(
                &GeometrySpec::Bitmap { dim: 2, n: 6, solid: bits },
                1.0,
                0.0,
            ).unwrap();
            let swapped = cell.swap_axes(0, 1).unwrap();
            prop_assert!((cell.interface_measure() - swapped.interface_measure()).abs() < 1e-12);
            prop_assert_eq!(cell.porosity(), swapped.porosity());
        }
    }
}
