//! Column-wise evaluation of the piecewise-affine potential
//! `P(x) = max_i (x . y_i - R_i)` and the induced cell decomposition of the
//! fluid region below the free surface.
//!
//! Along a vertical line the competing functions are affine in `x3` with
//! slopes `y_i3 <= -delta < 0`, so every column is handled exactly by a 1-D
//! upper-envelope sweep. Horizontally the domain is cut into rows at
//! Gauss (or midpoint) abscissae in `x2`. Along a row the sweep structure is
//! piecewise constant in `x1`; its breakpoints are located by bisection and
//! each smooth piece is integrated with 3-point Gauss-Legendre, which is exact
//! there because every integrand is a polynomial of degree at most 4 in `x1`.
//! This keeps cell volumes continuous in the weights even when interfaces
//! are vertical (atoms sharing `y3`).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{
    dot3, half_sq, DiracCloud, DomainSpec, QuadratureRule, QuadratureSpec, Vec3, WeightVector,
};
use crate::error::{Error, Result};

/// Rows handled by one parallel task. Fixed so the reduction order does not
/// depend on the thread count.
const ROWS_PER_CHUNK: usize = 4;

/// Bracket width, relative to the row scale, at which a breakpoint is fixed.
const PROBE_REL: f64 = 1e-9;
const BREAK_REL_TOL: f64 = 1e-14;

/// 3-point Gauss-Legendre on [0, 1].
const GL3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Reporting node of the height field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadNode {
    pub x: [f64; 2],
    pub weight: f64,
    pub ix: usize,
    pub iy: usize,
}

/// Integration row: the chord of the polygon at height `x2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadRow {
    pub x2: f64,
    pub weight: f64,
    pub x1_lo: f64,
    pub x1_hi: f64,
}

/// Horizontal discretization: integration rows and the tensor grid of
/// nodes where the height field is reported, plus the cap.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    spec: QuadratureSpec,
    xs: Vec<f64>,
    ys: Vec<f64>,
    nodes: Vec<QuadNode>,
    lookup: Vec<usize>,
    rows: Vec<QuadRow>,
    cap: f64,
    covered_area: f64,
}

fn axis_nodes(lo: f64, hi: f64, cells: usize, rule: QuadratureRule) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / cells as f64;
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for c in 0..cells {
        let mid = lo + (c as f64 + 0.5) * h;
        match rule {
            QuadratureRule::Midpoint => {
                xs.push(mid);
                ws.push(h);
            }
            QuadratureRule::Gauss2 => {
                let off = 0.5 * h / 3f64.sqrt();
                xs.push(mid - off);
                xs.push(mid + off);
                ws.push(0.5 * h);
                ws.push(0.5 * h);
            }
        }
    }
    (xs, ws)
}

/// `[x1_lo, x1_hi]` where the horizontal line at `x2` meets the polygon.
fn chord(vertices: &[[f64; 2]], x2: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (k, a) in vertices.iter().enumerate() {
        let b = vertices[(k + 1) % vertices.len()];
        let (ya, yb) = (a[1], b[1]);
        if (ya - x2) * (yb - x2) > 0.0 {
            continue;
        }
        if ya == yb {
            lo = lo.min(a[0].min(b[0]));
            hi = hi.max(a[0].max(b[0]));
        } else {
            let t = (x2 - ya) / (yb - ya);
            let x = a[0] + t * (b[0] - a[0]);
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (hi > lo).then_some((lo, hi))
}

impl QuadratureGrid {
    pub fn new(domain: &DomainSpec, spec: &QuadratureSpec) -> Result<Self> {
        spec.validate()?;
        let poly = domain.polygon();
        let (lo, hi) = poly.bounding_box();
        let (xs, wx) = axis_nodes(lo[0], hi[0], spec.columns_per_axis, spec.rule);
        let (ys, wy) = axis_nodes(lo[1], hi[1], spec.columns_per_axis, spec.rule);
        let mut nodes = Vec::new();
        let mut lookup = vec![usize::MAX; xs.len() * ys.len()];
        for (ix, (&x1, &w1)) in xs.iter().zip(&wx).enumerate() {
            for (iy, (&x2, &w2)) in ys.iter().zip(&wy).enumerate() {
                if poly.contains([x1, x2]) {
                    lookup[ix * ys.len() + iy] = nodes.len();
                    nodes.push(QuadNode {
                        x: [x1, x2],
                        weight: w1 * w2,
                        ix,
                        iy,
                    });
                }
            }
        }
        let rows: Vec<QuadRow> = ys
            .iter()
            .zip(&wy)
            .filter_map(|(&x2, &weight)| {
                chord(poly.vertices(), x2).map(|(x1_lo, x1_hi)| QuadRow {
                    x2,
                    weight,
                    x1_lo,
                    x1_hi,
                })
            })
            .collect();
        let covered_area = rows.iter().map(|r| r.weight * (r.x1_hi - r.x1_lo)).sum();
        Ok(Self {
            spec: *spec,
            xs,
            ys,
            nodes,
            lookup,
            rows,
            cap: domain.cap_height(),
            covered_area,
        })
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }
    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }
    pub fn rows(&self) -> &[QuadRow] {
        &self.rows
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn cap(&self) -> f64 {
        self.cap
    }
    /// Area seen by the row integration; differs from the polygon area only
    /// through the `x2` rule on rows crossing a vertex.
    pub fn covered_area(&self) -> f64 {
        self.covered_area
    }
    pub fn axis_len(&self) -> (usize, usize) {
        (self.xs.len(), self.ys.len())
    }
    /// Index into [`QuadratureGrid::nodes`] of tensor position `(ix, iy)`.
    pub fn node_at(&self, ix: usize, iy: usize) -> Option<usize> {
        if ix >= self.xs.len() || iy >= self.ys.len() {
            return None;
        }
        match self.lookup[ix * self.ys.len() + iy] {
            usize::MAX => None,
            k => Some(k),
        }
    }
}

/// Returns `(max_i (x . y_i - R_i), argmax)`, lowest index on ties.
pub fn evaluate_potential(cloud: &DiracCloud, weights: &WeightVector, x: &Vec3) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, (y, r)) in cloud.points().iter().zip(weights.as_slice()).enumerate() {
        let v = dot3(x, y) - r;
        if v > best {
            best = v;
            arg = i;
        }
    }
    (best, arg)
}

/// `max(P(x), q(x1, x2))`: the potential capped below by the quadratic.
pub fn canonical_potential(cloud: &DiracCloud, weights: &WeightVector, x: &Vec3) -> f64 {
    evaluate_potential(cloud, weights, x)
        .0
        .max(half_sq(x[0], x[1]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProfile {
    pub center: [f64; 2],
    pub intervals: Vec<Interval>,
    pub height: f64,
    pub wet: bool,
}

/// Slope-sorted view of the cloud, reused by every column of a sweep.
struct SweepLines<'a> {
    slopes: Vec<f64>,
    /// atom indices sorted by slope ascending, then index
    order: Vec<usize>,
    /// position of each atom in `order`
    rank: Vec<usize>,
    cloud: &'a DiracCloud,
    weights: &'a [f64],
}

impl<'a> SweepLines<'a> {
    fn new(cloud: &'a DiracCloud, weights: &'a WeightVector) -> Self {
        let slopes: Vec<f64> = cloud.points().iter().map(|y| y[2]).collect();
        let mut order: Vec<usize> = (0..slopes.len()).collect();
        order.sort_by(|&a, &b| slopes[a].total_cmp(&slopes[b]).then(a.cmp(&b)));
        let mut rank = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        Self {
            slopes,
            order,
            rank,
            cloud,
            weights: weights.as_slice(),
        }
    }

    /// Walks the upper envelope of `a_i + b_i z` from `z = 0` up to its
    /// crossing with `q`, emitting each nonempty interval. Returns the height.
    fn sweep(
        &self,
        x1: f64,
        x2: f64,
        cap: f64,
        intercepts: &mut Vec<f64>,
        mut emit: impl FnMut(Interval),
    ) -> Result<f64> {
        intercepts.clear();
        intercepts.extend(
            self.cloud
                .points()
                .iter()
                .zip(self.weights)
                .map(|(y, r)| x1 * y[0] + x2 * y[1] - r),
        );
        let a = intercepts.as_slice();
        let b = &self.slopes;
        let q = half_sq(x1, x2);

        let mut k = 0;
        for i in 1..a.len() {
            if a[i] > a[k] {
                k = i;
            }
        }
        if a[k] <= q {
            return Ok(0.0);
        }
        let mut z = 0.0;
        loop {
            let z_surface = (a[k] - q) / -b[k];
            let mut next: Option<(f64, usize)> = None;
            for &j in &self.order[self.rank[k] + 1..] {
                if b[j] <= b[k] {
                    continue;
                }
                let zc = ((a[k] - a[j]) / (b[j] - b[k])).max(z);
                let better = match next {
                    None => true,
                    Some((bz, bj)) => {
                        zc < bz || (zc == bz && (b[j] > b[bj] || (b[j] == b[bj] && j < bj)))
                    }
                };
                if better {
                    next = Some((zc, j));
                }
            }
            match next {
                Some((zc, j)) if zc < z_surface => {
                    if zc > z {
                        emit(Interval {
                            lo: z,
                            hi: zc,
                            index: k,
                        });
                    }
                    z = zc;
                    k = j;
                }
                _ => {
                    if z_surface >= cap {
                        return Err(Error::CapSaturated { x1, x2, cap });
                    }
                    if z_surface > z {
                        emit(Interval {
                            lo: z,
                            hi: z_surface,
                            index: k,
                        });
                    }
                    return Ok(z_surface);
                }
            }
        }
    }
}

/// Envelope structure of one vertical column up to the free surface.
pub fn column_profile(
    cloud: &DiracCloud,
    weights: &WeightVector,
    column: [f64; 2],
    cap: f64,
) -> Result<ColumnProfile> {
    let lines = SweepLines::new(cloud, weights);
    let mut scratch = Vec::with_capacity(cloud.len());
    let mut intervals = Vec::new();
    let height = lines.sweep(column[0], column[1], cap, &mut scratch, |iv| {
        intervals.push(iv)
    })?;
    Ok(ColumnProfile {
        center: column,
        intervals,
        height,
        wet: height > 0.0,
    })
}

/// Free-surface height of a single column.
pub fn surface_height(
    cloud: &DiracCloud,
    weights: &WeightVector,
    column: [f64; 2],
    cap: f64,
) -> Result<f64> {
    let lines = SweepLines::new(cloud, weights);
    let mut scratch = Vec::with_capacity(cloud.len());
    lines.sweep(column[0], column[1], cap, &mut scratch, |_| {})
}

/// Upper bound on `h` over the polygon, capped at `H`: on the surface
/// `P = q >= 0`, so `x3 <= max_i a_i(x) / -y_i3` and the affine `a_i` peak at
/// a vertex.
pub fn height_upper_bound(cloud: &DiracCloud, weights: &WeightVector, domain: &DomainSpec) -> f64 {
    let mut z: f64 = 0.0;
    for v in domain.polygon().vertices() {
        for (y, r) in cloud.points().iter().zip(weights.as_slice()) {
            z = z.max((v[0] * y[0] + v[1] * y[1] - r) / -y[2]);
        }
    }
    z.min(domain.cap_height())
}

/// Integrals over one cell: volume, first moments, `int q`, and the
/// horizontal footprint area.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMoments {
    pub volume: f64,
    pub first: Vec3,
    pub quad: f64,
    pub footprint: f64,
}

impl CellMoments {
    fn add(&mut self, other: &CellMoments) {
        self.volume += other.volume;
        for k in 0..3 {
            self.first[k] += other.first[k];
        }
        self.quad += other.quad;
        self.footprint += other.footprint;
    }

    pub fn centroid(&self) -> Option<Vec3> {
        (self.volume > 0.0).then(|| {
            [
                self.first[0] / self.volume,
                self.first[1] / self.volume,
                self.first[2] / self.volume,
            ]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub cells: Vec<CellMoments>,
    /// free-surface height at each reporting node of the grid
    pub height_field: Vec<f64>,
    pub total_volume: f64,
    /// `int h`, accumulated along the rows independently of the cells
    pub height_volume: f64,
    /// `int h^2`
    pub height_sq: f64,
    pub primal_energy: f64,
    pub dual_value: f64,
}

impl CellStats {
    pub fn volumes(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.volume).collect()
    }

    pub fn centroid(&self, i: usize) -> Option<Vec3> {
        self.cells[i].centroid()
    }

    pub fn centroids(&self) -> Vec<Option<Vec3>> {
        self.cells.iter().map(CellMoments::centroid).collect()
    }

    pub fn max_height(&self) -> f64 {
        self.height_field.iter().copied().fold(0.0, f64::max)
    }

    pub fn wet_columns(&self) -> usize {
        self.height_field.iter().filter(|h| **h > 0.0).count()
    }
}

/// Symmetric sparse Jacobian `d vol_i / d R_j` of the cell volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeJacobian {
    pub diag: Vec<f64>,
    /// `(i, j, value)` with `i < j`, sorted
    pub off: Vec<(usize, usize, f64)>,
}

impl VolumeJacobian {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `out = A v`
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (o, (d, x)) in out.iter_mut().zip(self.diag.iter().zip(v)) {
            *o = d * x;
        }
        for &(i, j, a) in &self.off {
            out[i] += a * v[j];
            out[j] += a * v[i];
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let key = (i.min(j), i.max(j));
        self.off
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map(|k| self.off[k].2)
            .unwrap_or(0.0)
    }
}

#[derive(Default)]
struct HessAcc {
    diag: Vec<f64>,
    off: HashMap<(usize, usize), f64>,
}

impl HessAcc {
    fn pair(&mut self, i: usize, j: usize, v: f64) {
        // v is d vol_i / d R_j for i != j; rows of a volume Jacobian sum to the surface term
        *self.off.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
        self.diag[i] -= v;
        self.diag[j] -= v;
    }
}

#[derive(Default)]
struct RowSums {
    cells: Vec<CellMoments>,
    h: f64,
    h2: f64,
    hess: Option<HessAcc>,
}

struct RowWorker<'a> {
    lines: &'a SweepLines<'a>,
    cap: f64,
    scratch: Vec<f64>,
}

impl RowWorker<'_> {
    fn signature(&mut self, x1: f64, x2: f64, out: &mut Vec<usize>) -> Result<()> {
        out.clear();
        self.lines
            .sweep(x1, x2, self.cap, &mut self.scratch, |iv| out.push(iv.index))?;
        Ok(())
    }

    /// Pushes every structural breakpoint in `(s, t)` onto `breaks`, given
    /// the signatures at both ends.
    #[allow(clippy::too_many_arguments)]
    fn locate(
        &mut self,
        s: f64,
        t: f64,
        x2: f64,
        sig_s: &[usize],
        sig_t: &[usize],
        tol: f64,
        breaks: &mut Vec<f64>,
    ) -> Result<()> {
        if sig_s == sig_t {
            return Ok(());
        }
        let m = 0.5 * (s + t);
        if t - s <= tol || m <= s || m >= t {
            breaks.push(m);
            return Ok(());
        }
        let mut sig_m = Vec::new();
        self.signature(m, x2, &mut sig_m)?;
        self.locate(s, m, x2, sig_s, &sig_m, tol, breaks)?;
        self.locate(m, t, x2, &sig_m, sig_t, tol, breaks)
    }

    fn lengths(&mut self, x1: f64, x2: f64) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        self.lines
            .sweep(x1, x2, self.cap, &mut self.scratch, |iv| {
                out.push((iv.index, iv.hi - iv.lo))
            })?;
        Ok(out)
    }

    /// Volume transfer across a vertical interface at `x`: the column owned
    /// by `k` on the left passes to a parallel plane `j` on the right.
    fn vertical_jump(
        &mut self,
        x: f64,
        x2: f64,
        probe: f64,
        wrow: f64,
        hess: &mut HessAcc,
    ) -> Result<()> {
        let left = self.lengths(x - probe, x2)?;
        let right = self.lengths(x + probe, x2)?;
        let mut jumps: Vec<(usize, f64)> = Vec::new();
        for &(i, l) in &left {
            jumps.push((i, l));
        }
        for &(i, l) in &right {
            match jumps.iter_mut().find(|e| e.0 == i) {
                Some(e) => e.1 -= l,
                None => jumps.push((i, -l)),
            }
        }
        let slopes = &self.lines.slopes;
        let pts = self.lines.cloud.points();
        let mut used = vec![false; jumps.len()];
        for a in 0..jumps.len() {
            let (k, jk) = jumps[a];
            if jk <= 0.0 {
                continue;
            }
            let partner = (0..jumps.len())
                .filter(|&b| !used[b] && jumps[b].1 < 0.0 && slopes[jumps[b].0] == slopes[k])
                .min_by(|&b, &c| (jk + jumps[b].1).abs().total_cmp(&(jk + jumps[c].1).abs()));
            let Some(b) = partner else { continue };
            used[b] = true;
            let j = jumps[b].0;
            let dy1 = pts[k][0] - pts[j][0];
            if dy1 == 0.0 {
                continue;
            }
            let len = 0.5 * (jk - jumps[b].1);
            // d x*/d R_k = 1/dy1; vol_k gains len * dx*, vol_j loses it
            hess.pair(k, j, -wrow * len / dy1);
        }
        Ok(())
    }

    fn integrate(&mut self, row: &QuadRow, samples: usize, sums: &mut RowSums) -> Result<()> {
        let (l, r, x2) = (row.x1_lo, row.x1_hi, row.x2);
        let tol = BREAK_REL_TOL * l.abs().max(r.abs()).max(r - l);
        let mut breaks = vec![l];
        let mut located = Vec::new();
        let mut prev = Vec::new();
        let mut cur = Vec::new();
        self.signature(l, x2, &mut prev)?;
        for k in 1..=samples {
            let x = if k == samples {
                r
            } else {
                l + (r - l) * k as f64 / samples as f64
            };
            self.signature(x, x2, &mut cur)?;
            let s = *breaks.last().unwrap();
            let before = breaks.len();
            self.locate(s, x, x2, &prev, &cur, tol, &mut breaks)?;
            located.extend(before..breaks.len());
            breaks.push(x);
            std::mem::swap(&mut prev, &mut cur);
        }
        let slopes = &self.lines.slopes;
        let mut hess = sums.hess.take();
        for piece in breaks.windows(2) {
            let (s, t) = (piece[0], piece[1]);
            if t <= s {
                continue;
            }
            for (u, gw) in GL3 {
                let x1 = s + u * (t - s);
                let wt = row.weight * (t - s) * gw;
                let q = half_sq(x1, x2);
                let cells = &mut sums.cells;
                let mut last: Option<usize> = None;
                let hess_ref = &mut hess;
                let h = self
                    .lines
                    .sweep(x1, x2, self.cap, &mut self.scratch, |iv| {
                        let len = iv.hi - iv.lo;
                        let c = &mut cells[iv.index];
                        c.volume += wt * len;
                        c.first[0] += wt * x1 * len;
                        c.first[1] += wt * x2 * len;
                        c.first[2] += wt * 0.5 * (iv.hi * iv.hi - iv.lo * iv.lo);
                        c.quad += wt * q * len;
                        c.footprint += wt;
                        if let (Some(hs), Some(p)) = (hess_ref.as_mut(), last) {
                            // crossing z = (a_p - a_k)/(b_k - b_p) moves by 1/(b_k - b_p) per unit R_k
                            hs.pair(iv.index, p, wt / (slopes[iv.index] - slopes[p]));
                        }
                        last = Some(iv.index);
                    })?;
                if let (Some(hs), Some(k)) = (hess.as_mut(), last) {
                    // surface z = (a_k - q)/(-b_k)
                    hs.diag[k] += wt / slopes[k];
                }
                sums.h += wt * h;
                sums.h2 += wt * h * h;
            }
        }
        if let Some(hs) = hess.as_mut() {
            // a break between nearly parallel planes is only known to roundoff / |dy1|,
            // so probe well outside that band but inside the neighbouring pieces
            for &b in &located {
                let x = breaks[b];
                let probe = (PROBE_REL * (r - l))
                    .min(0.25 * (x - breaks[b - 1]))
                    .min(0.25 * (breaks[b + 1] - x))
                    .max(tol);
                self.vertical_jump(x, x2, probe, row.weight, hs)?;
            }
        }
        sums.hess = hess;
        Ok(())
    }
}

fn decompose_impl(
    cloud: &DiracCloud,
    weights: &WeightVector,
    grid: &QuadratureGrid,
    with_jacobian: bool,
) -> Result<(CellStats, Option<VolumeJacobian>)> {
    let n = cloud.len();
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    let lines = SweepLines::new(cloud, weights);
    let samples = grid.spec.columns_per_axis;
    let partials: Vec<RowSums> = grid
        .rows
        .par_chunks(ROWS_PER_CHUNK)
        .map(|rows| {
            let mut sums = RowSums {
                cells: vec![CellMoments::default(); n],
                hess: with_jacobian.then(|| HessAcc {
                    diag: vec![0.0; n],
                    off: HashMap::new(),
                }),
                ..RowSums::default()
            };
            let mut worker = RowWorker {
                lines: &lines,
                cap: grid.cap,
                scratch: Vec::with_capacity(n),
            };
            for row in rows {
                worker.integrate(row, samples, &mut sums)?;
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;

    let mut cells = vec![CellMoments::default(); n];
    let (mut hv, mut h2) = (0.0, 0.0);
    let mut diag = vec![0.0; n];
    let mut off: HashMap<(usize, usize), f64> = HashMap::new();
    for part in &partials {
        for (c, p) in cells.iter_mut().zip(&part.cells) {
            c.add(p);
        }
        hv += part.h;
        h2 += part.h2;
        if let Some(hs) = &part.hess {
            for (d, v) in diag.iter_mut().zip(&hs.diag) {
                *d += v;
            }
            // per-key sums follow the fixed chunk order
            for (k, v) in &hs.off {
                *off.entry(*k).or_insert(0.0) += v;
            }
        }
    }
    let jac = with_jacobian.then(|| {
        let mut off: Vec<(usize, usize, f64)> =
            off.into_iter().map(|((i, j), v)| (i, j, v)).collect();
        off.sort_by_key(|a| (a.0, a.1));
        VolumeJacobian { diag, off }
    });
    let total_volume = cells.iter().map(|c| c.volume).sum();
    let mut stats = CellStats {
        cells,
        height_field: height_field(cloud, weights, grid)?,
        total_volume,
        height_volume: hv,
        height_sq: h2,
        primal_energy: 0.0,
        dual_value: 0.0,
    };
    stats.primal_energy = primal_energy(cloud, &stats);
    stats.dual_value = dual_value(cloud, weights, &stats);
    Ok((stats, jac))
}

/// Cell decomposition and energies at weights `w`.
pub fn decompose(
    cloud: &DiracCloud,
    weights: &WeightVector,
    grid: &QuadratureGrid,
) -> Result<CellStats> {
    decompose_impl(cloud, weights, grid, false).map(|r| r.0)
}

/// [`decompose`] plus the Jacobian of the volumes in the weights, built from
/// interface areas divided by the jump of the plane gradients.
pub fn decompose_with_jacobian(
    cloud: &DiracCloud,
    weights: &WeightVector,
    grid: &QuadratureGrid,
) -> Result<(CellStats, VolumeJacobian)> {
    decompose_impl(cloud, weights, grid, true).map(|(s, j)| (s, j.expect("requested")))
}

/// Free-surface height at every reporting node.
pub fn height_field(
    cloud: &DiracCloud,
    weights: &WeightVector,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let lines = SweepLines::new(cloud, weights);
    let parts: Vec<Vec<f64>> = grid
        .nodes
        .par_chunks(1024)
        .map(|chunk| {
            let mut scratch = Vec::with_capacity(cloud.len());
            chunk
                .iter()
                .map(|n| lines.sweep(n.x[0], n.x[1], grid.cap, &mut scratch, |_| {}))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Geostrophic energy of the plan induced by the cells:
/// `sum_i int_cell [ (|x_h - y_ih|^2)/2 - x3 y_i3 ] dx`.
pub fn primal_energy(cloud: &DiracCloud, stats: &CellStats) -> f64 {
    cloud
        .points()
        .iter()
        .zip(&stats.cells)
        .map(|(y, c)| c.quad + half_sq(y[0], y[1]) * c.volume - dot3(y, &c.first))
        .sum()
}

/// Dual functional
/// `sum_i nu_i ((y_i1^2 + y_i2^2)/2 - R_i) + int_{Omega_h} (q - P) dx`.
pub fn dual_value(cloud: &DiracCloud, weights: &WeightVector, stats: &CellStats) -> f64 {
    let atoms: f64 = cloud
        .points()
        .iter()
        .zip(cloud.masses())
        .zip(weights.as_slice())
        .map(|((y, m), r)| m * (half_sq(y[0], y[1]) - r))
        .sum();
    let fluid: f64 = cloud
        .points()
        .iter()
        .zip(&stats.cells)
        .zip(weights.as_slice())
        .map(|((y, c), r)| c.quad - dot3(y, &c.first) + r * c.volume)
        .sum();
    atoms + fluid
}

/// `E - J`. Only meaningful near feasibility, so the marginal residual is
/// checked first.
pub fn duality_gap(
    cloud: &DiracCloud,
    weights: &WeightVector,
    stats: &CellStats,
    tol: f64,
) -> Result<f64> {
    let residual = stats
        .cells
        .iter()
        .zip(cloud.masses())
        .map(|(c, m)| (c.volume - m).abs())
        .fold(0.0, f64::max);
    if residual > tol {
        return Err(Error::InfeasibleMarginals { residual, tol });
    }
    Ok(primal_energy(cloud, stats) - dual_value(cloud, weights, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    /// largest `|h(a) - h(b)| / |a - b|` over neighbouring nodes with at least one wet
    pub max_discrete_gradient: f64,
    /// `(max|x| + max_i (|y_i1| + |y_i2|)) / delta`
    pub bound: f64,
}

/// Discrete Lipschitz constant of the height field over axis and diagonal
/// neighbours, against the analytic slope bound.
pub fn lipschitz_h_check(
    height_field: &[f64],
    grid: &QuadratureGrid,
    cloud: &DiracCloud,
    domain: &DomainSpec,
) -> LipschitzReport {
    let bound = (domain.max_abs_x() + cloud.max_horizontal_l1()) / domain.delta();
    let mut worst: f64 = 0.0;
    for (k, node) in grid.nodes().iter().enumerate() {
        let hk = height_field[k];
        for (dx, dy) in [(1usize, 0usize), (0, 1), (1, 1)] {
            let neighbours = [
                grid.node_at(node.ix + dx, node.iy + dy),
                if dx == 1 && dy == 1 && node.iy > 0 {
                    grid.node_at(node.ix + 1, node.iy - 1)
                } else {
                    None
                },
            ];
            for m in neighbours.into_iter().flatten() {
                let hm = height_field[m];
                if hk <= 0.0 && hm <= 0.0 {
                    continue;
                }
                let other = &grid.nodes()[m];
                let dist = (other.x[0] - node.x[0]).hypot(other.x[1] - node.x[1]);
                worst = worst.max((hm - hk).abs() / dist);
            }
        }
    }
    LipschitzReport {
        max_discrete_gradient: worst,
        bound,
    }
}

/// Sup bound on the optimal height:
/// `2/|Omega2| + (2 max|x| + max_i(|y_i1| + |y_i2|))/delta * diam`.
pub fn height_sup_bound(domain: &DomainSpec, cloud: &DiracCloud) -> f64 {
    2.0 / domain.area()
        + (2.0 * domain.max_abs_x() + cloud.max_horizontal_l1()) / domain.delta() * domain.diam()
}

/// Bound on `||h||^2_{L^2}` from the a-priori estimate for maximizers:
/// `(2/delta) (M2 + max|x|^2 + 2 C0 / |Omega2|)` with
/// `C0 = |Omega2|/2 [M2 + 2 max|x|^2 + 4/(delta |Omega2|)] + |Omega2|/2 (M2 + max|x|^2)`.
pub fn height_l2_sq_bound(domain: &DomainSpec, cloud: &DiracCloud) -> f64 {
    let a = domain.area();
    let m2 = cloud.second_moment();
    let mx2 = domain.max_abs_x().powi(2);
    let d = domain.delta();
    let c0 = 0.5 * a * (m2 + 2.0 * mx2 + 4.0 / (d * a)) + 0.5 * a * (m2 + mx2);
    let c1 = m2 + mx2 + 2.0 * c0 / a;
    2.0 * c1 / d
}
