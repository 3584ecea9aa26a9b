//! Brute-force references for the column engine: a voxel decomposition
//! that only ever asks "is this point wet, and whose is it", a random scan
//! around a claimed dual optimum, and small transport distances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::domain::{dist3, half_sq, DiracCloud, DomainSpec, Vec3, WeightVector};
use crate::error::{Error, Result};
use crate::geometry::{
    decompose, dual_value, primal_energy, CellMoments, CellStats, QuadratureGrid,
};

pub const MIN_VOXEL_RESOLUTION: usize = 16;
pub const MAX_VOXEL_RESOLUTION: usize = 512;
const VOXEL_GUARD: u64 = 512 * 512 * 512;

/// Voxel lattice geometry, exposed for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGrid {
    pub origin: [f64; 2],
    pub spacing: [f64; 3],
    pub counts: [usize; 3],
}

/// Height below which every wet point must lie: `P` is decreasing in `x3`
/// and `q >= 0`, so `P >= q` forces `x3 <= max_i a_i(x) / -y_i3`, and the
/// affine `a_i` peak at a polygon vertex.
fn wet_extent(cloud: &DiracCloud, weights: &WeightVector, domain: &DomainSpec) -> f64 {
    let mut z: f64 = 0.0;
    for v in domain.polygon().vertices() {
        for (y, r) in cloud.points().iter().zip(weights.as_slice()) {
            z = z.max((v[0] * y[0] + v[1] * y[1] - r) / -y[2]);
        }
    }
    z.min(domain.cap_height())
}

/// Voxel grid with `resolution` cells per axis over the polygon's bounding
/// box times `[0, Z]`, `Z` the wet extent.
pub fn voxel_grid(
    cloud: &DiracCloud,
    weights: &WeightVector,
    domain: &DomainSpec,
    resolution: usize,
) -> Result<VoxelGrid> {
    if !(MIN_VOXEL_RESOLUTION..=MAX_VOXEL_RESOLUTION).contains(&resolution) {
        return Err(Error::VoxelResolution(resolution));
    }
    let total = (resolution as u64).pow(3);
    if total > VOXEL_GUARD {
        return Err(Error::VoxelMemoryGuard(total));
    }
    if weights.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            found: weights.len(),
        });
    }
    let (lo, hi) = domain.polygon().bounding_box();
    let z = wet_extent(cloud, weights, domain);
    let n = resolution as f64;
    Ok(VoxelGrid {
        origin: lo,
        spacing: [(hi[0] - lo[0]) / n, (hi[1] - lo[1]) / n, z.max(0.0) / n],
        counts: [resolution; 3],
    })
}

#[derive(Clone)]
struct SlabSums {
    cells: Vec<CellMoments>,
    heights: Vec<(usize, f64)>,
}

/// Cell statistics by voxel counting. A voxel is wet iff
/// `max_i (x . y_i - R_i) >= q(x1, x2)` at its center and belongs to the
/// first maximizing atom. Columns are kept when their center lies in the
/// polygon; `height_field` holds one entry per kept column, row-major in
/// `(ix, iy)`, equal to the wet voxel count times the voxel height.
pub fn voxel_decompose(
    cloud: &DiracCloud,
    weights: &WeightVector,
    domain: &DomainSpec,
    resolution: usize,
) -> Result<CellStats> {
    let g = voxel_grid(cloud, weights, domain, resolution)?;
    let n = cloud.len();
    let [nx, ny, nz] = g.counts;
    let [dx, dy, dz] = g.spacing;
    let dv = dx * dy * dz;
    let pts = cloud.points();
    let r = weights.as_slice();
    let slabs: Vec<SlabSums> = (0..nx)
        .into_par_iter()
        .map(|ix| {
            let mut sums = SlabSums {
                cells: vec![CellMoments::default(); n],
                heights: Vec::new(),
            };
            let x1 = g.origin[0] + (ix as f64 + 0.5) * dx;
            for iy in 0..ny {
                let x2 = g.origin[1] + (iy as f64 + 0.5) * dy;
                if !domain.polygon().contains([x1, x2]) {
                    continue;
                }
                let q = half_sq(x1, x2);
                let mut owned = vec![false; n];
                let mut wet = 0usize;
                for iz in 0..nz {
                    let x3 = (iz as f64 + 0.5) * dz;
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for (i, y) in pts.iter().enumerate() {
                        let v = x1 * y[0] + x2 * y[1] + x3 * y[2] - r[i];
                        if v > best {
                            best = v;
                            arg = i;
                        }
                    }
                    if best < q {
                        continue;
                    }
                    wet += 1;
                    let c = &mut sums.cells[arg];
                    c.volume += dv;
                    c.first[0] += dv * x1;
                    c.first[1] += dv * x2;
                    c.first[2] += dv * x3;
                    c.quad += dv * q;
                    owned[arg] = true;
                }
                for (c, o) in sums.cells.iter_mut().zip(&owned) {
                    if *o {
                        c.footprint += dx * dy;
                    }
                }
                sums.heights.push((ix * ny + iy, wet as f64 * dz));
            }
            sums
        })
        .collect();

    let mut cells = vec![CellMoments::default(); n];
    let mut height_field = Vec::new();
    let (mut hv, mut h2) = (0.0, 0.0);
    for s in &slabs {
        for (c, p) in cells.iter_mut().zip(&s.cells) {
            c.volume += p.volume;
            for k in 0..3 {
                c.first[k] += p.first[k];
            }
            c.quad += p.quad;
            c.footprint += p.footprint;
        }
        for &(_, h) in &s.heights {
            height_field.push(h);
            hv += h * dx * dy;
            h2 += h * h * dx * dy;
        }
    }
    let mut stats = CellStats {
        total_volume: cells.iter().map(|c| c.volume).sum(),
        cells,
        height_field,
        height_volume: hv,
        height_sq: h2,
        primal_energy: 0.0,
        dual_value: 0.0,
    };
    stats.primal_energy = primal_energy(cloud, &stats);
    stats.dual_value = dual_value(cloud, weights, &stats);
    Ok(stats)
}

/// `max_i |a_i - b_i|` over the cell volumes.
pub fn max_volume_difference(a: &CellStats, b: &CellStats) -> f64 {
    a.cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| (x.volume - y.volume).abs())
        .fold(0.0, f64::max)
}

/// Largest `J(w + eta) - J(w)` over `trials` uniform perturbations with
/// `|eta_i| <= magnitude`. Non-positive up to quadrature error at an optimum.
pub fn direct_j_scan(
    cloud: &DiracCloud,
    weights: &WeightVector,
    grid: &QuadratureGrid,
    trials: usize,
    magnitude: f64,
    seed: u64,
) -> Result<f64> {
    let base = decompose(cloud, weights, grid)?.dual_value;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturbations: Vec<WeightVector> = (0..trials)
        .map(|_| {
            WeightVector(
                weights
                    .as_slice()
                    .iter()
                    .map(|r| {
                        let u: f64 = rng.gen_range(-1.0..=1.0);
                        r + magnitude * u
                    })
                    .collect(),
            )
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for w in &perturbations {
        let j = decompose(cloud, w, grid)?.dual_value;
        worst = worst.max(j - base);
    }
    Ok(if trials == 0 { 0.0 } else { worst })
}

fn same_masses(a: &DiracCloud, b: &DiracCloud) -> Result<()> {
    if a.len() != b.len() || a.masses() != b.masses() {
        return Err(Error::MassMismatch);
    }
    Ok(())
}

/// Cost `sum_i nu_i |y_i^A - y_i^B|` of the identity coupling between two
/// positions of the same atoms; an upper bound on `W1`.
pub fn w1_upper(a: &DiracCloud, b: &DiracCloud) -> Result<f64> {
    same_masses(a, b)?;
    Ok(a.points()
        .iter()
        .zip(b.points())
        .zip(a.masses())
        .map(|((p, q), m)| m * dist3(p, q))
        .sum())
}

pub const EXACT_W1_MAX_ATOMS: usize = 8;

/// Exact `W1` between two uniform measures with at most 8 atoms each. For
/// equal weights an optimal plan is a permutation, so all of them are tried.
pub fn exact_w1_tiny(a: &DiracCloud, b: &DiracCloud) -> Result<f64> {
    let n = a.len();
    if n > EXACT_W1_MAX_ATOMS || b.len() > EXACT_W1_MAX_ATOMS {
        return Err(Error::TooManyAtoms(n.max(b.len())));
    }
    let m0 = a.masses()[0];
    if b.len() != n || a.masses().iter().chain(b.masses()).any(|m| *m != m0) {
        return Err(Error::MassMismatch);
    }
    let cost: Vec<Vec<f64>> = a
        .points()
        .iter()
        .map(|p| b.points().iter().map(|q| dist3(p, q)).collect())
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum() };
    let mut best = eval(&perm);
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(m0 * best)
}

/// Uniform translation of every atom, used by the tests and the CLI sanity report.
pub fn translate(cloud: &DiracCloud, v: Vec3) -> Result<DiracCloud> {
    cloud.with_points(
        cloud
            .points()
            .iter()
            .map(|y| [y[0] + v[0], y[1] + v[1], y[2] + v[2]])
            .collect(),
    )
}
