//! Fan-beam scanner geometry and the sparse operators built from it.
//!
//! Coordinates: voxel `(ix, iy)` of an `N x N` slice has its center at
//! `((ix - (N-1)/2) * pitch, (iy - (N-1)/2) * pitch)`. Slices are stored
//! with `ix` as the slower axis, so a `[N, N, Z]` volume flattens to
//! `[N*N, Z]` with row `ix * N + iy`. The a.p. source sits at angle 0 on the
//! negative y axis and projects toward +y; the lateral view is the same
//! scanner rotated by +90 degrees. The detector is flat and equispaced.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agct_tensor::{CsrMatrix, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::fsutil::write_atomic;

pub const FULL_SCALE_SID_MM: f64 = 595.0;
pub const FULL_SCALE_SDD_MM: f64 = 1085.6;
pub const FULL_SCALE_BINS: usize = 920;
pub const FULL_SCALE_GRID: usize = 128;
pub const DESK_GRID: usize = 64;
pub const DESK_VOXEL_PITCH_MM: f64 = 2.5;
/// Required ratio between detector span and the field of view's shadow.
pub const COVERAGE_MARGIN: f64 = 1.1;

/// The two projection directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Ap,
    Lat,
}

impl View {
    pub const BOTH: [View; 2] = [View::Ap, View::Lat];

    pub fn angle_deg(self) -> f64 {
        match self {
            View::Ap => 0.0,
            View::Lat => 90.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Ap => "ap",
            View::Lat => "lat",
        }
    }
}

/// Detector bins for a desk grid: the full-scale count scaled by
/// `n / 128`, rounded up to an even number.
pub fn desk_bins(grid_n: usize) -> usize {
    let u = (FULL_SCALE_BINS * grid_n).div_ceil(FULL_SCALE_GRID);
    u + u % 2
}

/// User-facing geometry block; unset detector fields are derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub grid_n: usize,
    pub voxel_pitch_mm: f64,
    #[serde(default)]
    pub n_detector_bins: Option<usize>,
    #[serde(default)]
    pub detector_pitch_mm: Option<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig::desk(DESK_GRID)
    }
}

impl GeometryConfig {
    pub fn desk(grid_n: usize) -> Self {
        GeometryConfig {
            sid_mm: FULL_SCALE_SID_MM,
            sdd_mm: FULL_SCALE_SDD_MM,
            grid_n,
            voxel_pitch_mm: DESK_VOXEL_PITCH_MM,
            n_detector_bins: None,
            detector_pitch_mm: None,
        }
    }

    pub fn full_scale() -> Self {
        GeometryConfig {
            grid_n: FULL_SCALE_GRID,
            n_detector_bins: Some(FULL_SCALE_BINS),
            ..GeometryConfig::desk(FULL_SCALE_GRID)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanBeamGeometry {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub n_detector_bins: usize,
    pub detector_pitch_mm: f64,
    pub grid_n: usize,
    pub voxel_pitch_mm: f64,
    pub source_angle_deg: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Detector span needed to cover the grid's inscribed field of view with
/// the coverage margin.
pub fn required_span_mm(sid_mm: f64, sdd_mm: f64, grid_n: usize, voxel_pitch_mm: f64) -> Result<f64> {
    let fov = grid_n as f64 * voxel_pitch_mm;
    let disc = 4.0 * sid_mm * sid_mm - fov * fov;
    if disc <= 0.0 {
        return Err(Error::Geometry(format!(
            "source at {sid_mm} mm lies inside the {fov} mm field of view"
        )));
    }
    Ok(COVERAGE_MARGIN * sdd_mm * fov / disc.sqrt() * 2.0)
}

/// Detector pitch that places the shadow of every grid corner, in either
/// view, inside the detector with the coverage margin.
pub fn derived_detector_pitch(sid_mm: f64, sdd_mm: f64, grid_n: usize, voxel_pitch_mm: f64, bins: usize) -> Result<f64> {
    let h = grid_n as f64 * voxel_pitch_mm / 2.0;
    if sid_mm <= h * std::f64::consts::SQRT_2 {
        return Err(Error::Geometry(format!(
            "source at {sid_mm} mm lies inside the grid's circumscribed circle (radius {:.3} mm)",
            h * std::f64::consts::SQRT_2
        )));
    }
    // The corner nearest the source casts the widest shadow.
    let u_max = h * sdd_mm / (sid_mm - h);
    Ok(2.0 * COVERAGE_MARGIN * u_max / bins as f64)
}

pub fn build_geometry(cfg: &GeometryConfig, view: View) -> Result<FanBeamGeometry> {
    positive("sid_mm", cfg.sid_mm)?;
    positive("sdd_mm", cfg.sdd_mm)?;
    positive("voxel_pitch_mm", cfg.voxel_pitch_mm)?;
    if cfg.grid_n == 0 {
        return Err(Error::Geometry("grid_n must be at least 1".into()));
    }
    let bins = cfg.n_detector_bins.unwrap_or_else(|| desk_bins(cfg.grid_n));
    if bins == 0 {
        return Err(Error::Geometry("n_detector_bins must be at least 1".into()));
    }
    let pitch = match cfg.detector_pitch_mm {
        Some(p) => p,
        None => derived_detector_pitch(cfg.sid_mm, cfg.sdd_mm, cfg.grid_n, cfg.voxel_pitch_mm, bins)?,
    };
    FanBeamGeometry::new(cfg.sid_mm, cfg.sdd_mm, bins, pitch, cfg.grid_n, cfg.voxel_pitch_mm, view.angle_deg())
}

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn cos_sin(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (1.0, 0.0)
    } else if r == 90.0 {
        (0.0, 1.0)
    } else if r == 180.0 {
        (-1.0, 0.0)
    } else if r == 270.0 {
        (0.0, -1.0)
    } else {
        let t = deg.to_radians();
        (t.cos(), t.sin())
    }
}

impl FanBeamGeometry {
    pub fn new(
        sid_mm: f64,
        sdd_mm: f64,
        n_detector_bins: usize,
        detector_pitch_mm: f64,
        grid_n: usize,
        voxel_pitch_mm: f64,
        source_angle_deg: f64,
    ) -> Result<Self> {
        positive("sid_mm", sid_mm)?;
        positive("detector_pitch_mm", detector_pitch_mm)?;
        positive("voxel_pitch_mm", voxel_pitch_mm)?;
        if sdd_mm.is_nan() || sdd_mm <= sid_mm {
            return Err(Error::Geometry(format!("sdd_mm ({sdd_mm}) must exceed sid_mm ({sid_mm})")));
        }
        if !source_angle_deg.is_finite() {
            return Err(Error::Geometry("source_angle_deg must be finite".into()));
        }
        if grid_n == 0 || n_detector_bins == 0 {
            return Err(Error::Geometry("grid_n and n_detector_bins must be at least 1".into()));
        }
        let required = required_span_mm(sid_mm, sdd_mm, grid_n, voxel_pitch_mm)?;
        let span = n_detector_bins as f64 * detector_pitch_mm;
        if span < required {
            return Err(Error::Geometry(format!(
                "detector span {span:.3} mm is below the {required:.3} mm needed to cover the {:.1} mm field of view \
                 with a {:.0}% margin",
                grid_n as f64 * voxel_pitch_mm,
                (COVERAGE_MARGIN - 1.0) * 100.0
            )));
        }
        Ok(FanBeamGeometry {
            sid_mm,
            sdd_mm,
            n_detector_bins,
            detector_pitch_mm,
            grid_n,
            voxel_pitch_mm,
            source_angle_deg,
        })
    }

    pub fn with_view(&self, view: View) -> FanBeamGeometry {
        FanBeamGeometry {
            source_angle_deg: view.angle_deg(),
            ..self.clone()
        }
    }

    /// Same scanner with `extra` zero bins split evenly over both detector
    /// ends; bin centers keep their physical positions.
    pub fn padded(&self, extra: usize) -> Result<FanBeamGeometry> {
        if !extra.is_multiple_of(2) {
            return Err(Error::Geometry(format!("detector padding must be even, got {extra}")));
        }
        Ok(FanBeamGeometry {
            n_detector_bins: self.n_detector_bins + extra,
            ..self.clone()
        })
    }

    /// Hex SHA-256 of every field.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"fanbeam-geometry/1");
        for v in [self.sid_mm, self.sdd_mm, self.detector_pitch_mm, self.voxel_pitch_mm, self.source_angle_deg] {
            h.update(v.to_le_bytes());
        }
        h.update((self.n_detector_bins as u64).to_le_bytes());
        h.update((self.grid_n as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn fov_mm(&self) -> f64 {
        self.grid_n as f64 * self.voxel_pitch_mm
    }

    pub fn voxel_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let c = (self.grid_n as f64 - 1.0) / 2.0;
        ((ix as f64 - c) * self.voxel_pitch_mm, (iy as f64 - c) * self.voxel_pitch_mm)
    }

    fn to_source_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = cos_sin(self.source_angle_deg);
        (c * x + s * y, -s * x + c * y)
    }

    fn to_grid_frame(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = cos_sin(self.source_angle_deg);
        (c * x - s * y, s * x + c * y)
    }

    /// Source position in grid coordinates (mm).
    pub fn source_position(&self) -> (f64, f64) {
        self.to_grid_frame(0.0, -self.sid_mm)
    }

    /// Detector coordinate (mm from the detector center) of a point.
    pub fn detector_mm(&self, x: f64, y: f64) -> f64 {
        let (px, py) = self.to_source_frame(x, y);
        px * self.sdd_mm / (py + self.sid_mm)
    }

    /// Fractional bin coordinate of a point; bin `b` is centered at `b`.
    pub fn bin_coordinate(&self, x: f64, y: f64) -> f64 {
        self.detector_mm(x, y) / self.detector_pitch_mm + (self.n_detector_bins as f64 - 1.0) / 2.0
    }

    /// Detector position (mm from center) of bin `b`'s center.
    pub fn bin_center_mm(&self, b: usize) -> f64 {
        (b as f64 - (self.n_detector_bins as f64 - 1.0) / 2.0) * self.detector_pitch_mm
    }

    /// Normalization constant of projections: the maximal in-grid path.
    pub fn projection_normalization(&self) -> f64 {
        self.fov_mm()
    }
}

/// Extra zero bins that make `bins` divisible by `2^levels`.
pub fn detector_padding(bins: usize, levels: u32) -> usize {
    let f = 1usize << levels;
    bins.div_ceil(f) * f - bins
}

/// Geometry of encoder level `level`: grid and detector coarsened by
/// `2^level`, pitches enlarged by the same factor.
pub fn scale_geometry(g: &FanBeamGeometry, level: u32) -> Result<FanBeamGeometry> {
    let f = 1usize << level;
    if !g.grid_n.is_multiple_of(f) || !g.n_detector_bins.is_multiple_of(f) {
        return Err(Error::Geometry(format!(
            "level {level}: grid {} and detector {} must both be divisible by {f}",
            g.grid_n, g.n_detector_bins
        )));
    }
    Ok(FanBeamGeometry {
        grid_n: g.grid_n / f,
        n_detector_bins: g.n_detector_bins / f,
        voxel_pitch_mm: g.voxel_pitch_mm * f as f64,
        detector_pitch_mm: g.detector_pitch_mm * f as f64,
        ..g.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// Pixel-driven backprojection, `N*N x U`.
    Backprojection,
    /// Ray-driven projection, `U x N*N`.
    Forward,
}

impl MatrixKind {
    fn tag(self) -> &'static str {
        match self {
            MatrixKind::Backprojection => "backprojection",
            MatrixKind::Forward => "forward",
        }
    }
}

/// A sparse operator tied to the geometry it was built from.
#[derive(Clone, Debug)]
pub struct SystemMatrix {
    kind: MatrixKind,
    geometry: FanBeamGeometry,
    fingerprint: String,
    matrix: Arc<CsrMatrix>,
}

fn matrix_fingerprint(kind: MatrixKind, g: &FanBeamGeometry) -> String {
    let mut h = Sha256::new();
    h.update(kind.tag().as_bytes());
    h.update(g.fingerprint().as_bytes());
    hex::encode(h.finalize())
}

impl SystemMatrix {
    fn new(kind: MatrixKind, geometry: &FanBeamGeometry, matrix: CsrMatrix) -> Self {
        SystemMatrix {
            kind,
            fingerprint: matrix_fingerprint(kind, geometry),
            geometry: geometry.clone(),
            matrix: Arc::new(matrix),
        }
    }

    pub fn build(kind: MatrixKind, g: &FanBeamGeometry) -> Result<Self> {
        match kind {
            MatrixKind::Backprojection => build_backprojection_matrix(g),
            MatrixKind::Forward => build_forward_matrix(g),
        }
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn csr(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.n_cols()
    }

    pub fn apply(&self, x: &[f64], transposed: bool) -> Result<Vec<f64>> {
        Ok(self.matrix.apply(x, transposed)?)
    }
}

pub fn build_backprojection_matrix(g: &FanBeamGeometry) -> Result<SystemMatrix> {
    let n = g.grid_n;
    let last = (g.n_detector_bins - 1) as f64;
    let rows: Vec<Vec<(u32, f64)>> = (0..n * n)
        .into_par_iter()
        .map(|r| {
            let (x, y) = g.voxel_center(r / n, r % n);
            let u = g.bin_coordinate(x, y);
            if !(0.0..=last).contains(&u) {
                return Vec::new();
            }
            let b0 = u.floor();
            let frac = u - b0;
            let b0 = b0 as u32;
            if frac == 0.0 {
                vec![(b0, 1.0)]
            } else {
                vec![(b0, 1.0 - frac), (b0 + 1, frac)]
            }
        })
        .collect();
    let m = CsrMatrix::from_rows(g.n_detector_bins, rows)?;
    Ok(SystemMatrix::new(MatrixKind::Backprojection, g, m))
}

/// Step between samples along a ray, as a fraction of the voxel pitch.
pub const JOSEPH_STEP_FRACTION: f64 = 0.5;

pub fn build_forward_matrix(g: &FanBeamGeometry) -> Result<SystemMatrix> {
    let n = g.grid_n;
    let vp = g.voxel_pitch_mm;
    let step = vp * JOSEPH_STEP_FRACTION;
    let c = (n as f64 - 1.0) / 2.0;
    // Bilinear interpolation with zero extension is supported on a square of
    // half-width (N+1)/2 voxels; its circumscribed circle bounds every ray.
    let radius = (n as f64 + 1.0) / 2.0 * vp * std::f64::consts::SQRT_2;
    let rows: Vec<Vec<(u32, f64)>> = (0..g.n_detector_bins)
        .into_par_iter()
        .map(|b| {
            let (sx, sy) = (0.0, -g.sid_mm);
            let (dx, dy) = (g.bin_center_mm(b), g.sdd_mm - g.sid_mm);
            let len = ((dx - sx).powi(2) + (dy - sy).powi(2)).sqrt();
            let (ux, uy) = ((dx - sx) / len, (dy - sy) / len);
            let proj = sx * ux + sy * uy;
            let disc = proj * proj - (sx * sx + sy * sy) + radius * radius;
            let mut row = Vec::new();
            if disc <= 0.0 {
                return row;
            }
            let t0 = (-proj - disc.sqrt()).max(0.0);
            let t1 = -proj + disc.sqrt();
            let samples = ((t1 - t0) / step).ceil() as usize;
            for k in 0..samples {
                let t = t0 + (k as f64 + 0.5) * step;
                let (gx, gy) = g.to_grid_frame(sx + t * ux, sy + t * uy);
                let fx = gx / vp + c;
                let fy = gy / vp + c;
                let (i0, j0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - i0, fy - j0);
                for (di, wx) in [(0i64, 1.0 - ax), (1, ax)] {
                    let i = i0 as i64 + di;
                    if i < 0 || i >= n as i64 || wx == 0.0 {
                        continue;
                    }
                    for (dj, wy) in [(0i64, 1.0 - ay), (1, ay)] {
                        let j = j0 as i64 + dj;
                        if j < 0 || j >= n as i64 || wy == 0.0 {
                            continue;
                        }
                        row.push(((i as usize * n + j as usize) as u32, wx * wy * step));
                    }
                }
            }
            row
        })
        .collect();
    let m = CsrMatrix::from_rows(n * n, rows)?;
    Ok(SystemMatrix::new(MatrixKind::Forward, g, m))
}

/// Forward projectors for both views with their normalization constant.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: FanBeamGeometry,
    ap: SystemMatrix,
    lat: SystemMatrix,
    normalization: f64,
}

impl Projector {
    pub fn new(g: &FanBeamGeometry) -> Result<Self> {
        let ap = build_forward_matrix(&g.with_view(View::Ap))?;
        let lat = build_forward_matrix(&g.with_view(View::Lat))?;
        Ok(Projector::from_matrices(ap, lat))
    }

    /// Uses prebuilt (for example cached) forward matrices.
    pub fn from_matrices(ap: SystemMatrix, lat: SystemMatrix) -> Self {
        let geometry = ap.geometry().with_view(View::Ap);
        Projector {
            normalization: geometry.projection_normalization(),
            geometry,
            ap,
            lat,
        }
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geometry
    }

    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn matrix(&self, view: View) -> &SystemMatrix {
        match view {
            View::Ap => &self.ap,
            View::Lat => &self.lat,
        }
    }

    fn split_shape(&self, shape: &[usize]) -> Result<(Vec<usize>, usize)> {
        let n = self.geometry.grid_n;
        let r = shape.len();
        if r < 3 || shape[r - 3] != n || shape[r - 2] != n {
            let mut expected = shape[..r.saturating_sub(3)].to_vec();
            expected.extend([n, n, shape.last().copied().unwrap_or(0)]);
            return Err(Error::shape("project_volume", &expected, shape));
        }
        Ok((shape[..r - 3].to_vec(), shape[r - 1]))
    }

    /// Projects `[..., N, N, Z]` to `[..., U, Z]` on the tape.
    pub fn project_var(&self, tape: &mut Tape, view: View, vol: Var) -> Result<Var> {
        let shape = tape.shape(vol).to_vec();
        let (lead, z) = self.split_shape(&shape)?;
        let outer: usize = lead.iter().product();
        let n = self.geometry.grid_n;
        let flat = tape.reshape(vol, &[outer, n * n, z])?;
        let p = tape.sparse_along(self.matrix(view).csr(), flat, 1, false)?;
        let p = tape.mul_scalar(p, 1.0 / self.normalization);
        let mut out = lead;
        out.extend([self.geometry.n_detector_bins, z]);
        Ok(tape.reshape(p, &out)?)
    }

    /// Projects a `[..., N, N, Z]` tensor to `[..., U, Z]`.
    pub fn project(&self, view: View, vol: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(vol.clone());
        let p = self.project_var(&mut tape, view, v)?;
        Ok(tape.to_tensor(p))
    }
}

/// `project_volume`: one view of a `[N, N, Z]` volume.
pub fn project_volume(p: &Projector, view: View, vol: &Tensor) -> Result<Tensor> {
    p.project(view, vol)
}

/// Backprojection matrices of both views for one feature scale.
#[derive(Clone, Debug)]
pub struct LiftPair {
    pub ap: SystemMatrix,
    pub lat: SystemMatrix,
}

impl LiftPair {
    pub fn new(g: &FanBeamGeometry) -> Result<Self> {
        Ok(LiftPair {
            ap: build_backprojection_matrix(&g.with_view(View::Ap))?,
            lat: build_backprojection_matrix(&g.with_view(View::Lat))?,
        })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        self.ap.geometry()
    }
}

fn lift_one(tape: &mut Tape, t: &SystemMatrix, feat: Var) -> Result<Var> {
    if t.kind() != MatrixKind::Backprojection {
        return Err(Error::Geometry("lift requires a backprojection matrix".into()));
    }
    let shape = tape.shape(feat).to_vec();
    let r = shape.len();
    if r < 2 || shape[r - 2] != t.n_cols() {
        return Err(Error::Geometry(format!(
            "lift: feature map {shape:?} has {} bins but the matrix was built for {} (grid {})",
            if r >= 2 { shape[r - 2] } else { 0 },
            t.n_cols(),
            t.geometry().grid_n
        )));
    }
    let n = t.geometry().grid_n;
    let lifted = tape.sparse_along(t.csr(), feat, r - 2, false)?;
    let mut out = shape[..r - 2].to_vec();
    out.extend([n, n, shape[r - 1]]);
    Ok(tape.reshape(lifted, &out)?)
}

/// Backprojects `[..., U_f, Z_f]` features of both views to
/// `[..., N_f, N_f, Z_f]` and fuses them by element-wise mean.
pub fn lift_2d_to_3d(tape: &mut Tape, t_ap: &SystemMatrix, t_lat: &SystemMatrix, feat_ap: Var, feat_lat: Var) -> Result<Var> {
    if t_ap.geometry().grid_n != t_lat.geometry().grid_n {
        return Err(Error::Geometry("lift: a.p. and lateral matrices use different grids".into()));
    }
    let a = lift_one(tape, t_ap, feat_ap)?;
    let b = lift_one(tape, t_lat, feat_lat)?;
    let s = tape.add(a, b)?;
    Ok(tape.mul_scalar(s, 0.5))
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    kind: MatrixKind,
    fingerprint: String,
    geometry: FanBeamGeometry,
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
    byte_order: String,
    blob: String,
}

const MATRIX_FORMAT: &str = "agct-matrix/1";

/// Writes a header (`path`) and a blob (`path` with `.bin`) holding row
/// offsets (`u64`), column indices (`u32`) and weights (`f64`), all
/// little-endian.
pub fn save_matrix(path: &Path, m: &SystemMatrix) -> Result<()> {
    let blob = path.with_extension("bin");
    let csr = m.csr();
    let mut bytes = Vec::with_capacity(8 * (csr.n_rows() + 1) + 12 * csr.nnz());
    for &o in csr.row_offsets() {
        bytes.extend(o.to_le_bytes());
    }
    for &c in csr.col_indices() {
        bytes.extend(c.to_le_bytes());
    }
    for &w in csr.weights() {
        bytes.extend(w.to_le_bytes());
    }
    write_atomic(&blob, &bytes)?;
    let header = MatrixHeader {
        format: MATRIX_FORMAT.into(),
        kind: m.kind(),
        fingerprint: m.fingerprint().to_string(),
        geometry: m.geometry().clone(),
        n_rows: csr.n_rows(),
        n_cols: csr.n_cols(),
        nnz: csr.nnz(),
        byte_order: "LE".into(),
        blob: blob.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_atomic(path, &json)
}

/// Loads a cached matrix, rejecting it unless its fingerprint equals
/// `expected`.
pub fn load_matrix(path: &Path, expected: &str) -> Result<SystemMatrix> {
    let text = fs::read(path).map_err(io_err(path))?;
    let header: MatrixHeader = serde_json::from_slice(&text).map_err(|e| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if header.format != MATRIX_FORMAT || header.byte_order != "LE" {
        return Err(Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported format {} / byte order {}", header.format, header.byte_order),
        });
    }
    if header.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: header.fingerprint,
        });
    }
    let blob = path.with_file_name(&header.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    let need = 8 * (header.n_rows + 1) + 12 * header.nnz;
    if bytes.len() != need {
        return Err(Error::Truncated {
            path: blob,
            expected: need as u64,
            found: bytes.len() as u64,
        });
    }
    let (offs, rest) = bytes.split_at(8 * (header.n_rows + 1));
    let (cols, weights) = rest.split_at(4 * header.nnz);
    let offs = offs.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    let cols = cols.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let weights = weights.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let csr = CsrMatrix::from_raw(header.n_rows, header.n_cols, offs, cols, weights)?;
    let m = SystemMatrix::new(header.kind, &header.geometry, csr);
    if m.fingerprint() != expected {
        return Err(Error::FingerprintMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: m.fingerprint().to_string(),
        });
    }
    Ok(m)
}

/// Cache file for a matrix of `kind` built on `g` inside `dir`.
pub fn matrix_cache_path(dir: &Path, kind: MatrixKind, g: &FanBeamGeometry) -> PathBuf {
    dir.join(format!("{}-n{}-u{}-a{}.json", kind.tag(), g.grid_n, g.n_detector_bins, g.source_angle_deg))
}

/// Loads the matrix from `dir` when a cache entry with a matching
/// fingerprint exists, otherwise builds it and (re)writes the entry.
pub fn cached_matrix(dir: &Path, kind: MatrixKind, g: &FanBeamGeometry) -> Result<SystemMatrix> {
    let path = matrix_cache_path(dir, kind, g);
    let fp = matrix_fingerprint(kind, g);
    if path.exists() {
        match load_matrix(&path, &fp) {
            Ok(m) => return Ok(m),
            Err(e) => log::info!("rebuilding matrix cache {}: {e}", path.display()),
        }
    }
    let m = SystemMatrix::build(kind, g)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_matrix(&path, &m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> FanBeamGeometry {
        build_geometry(&GeometryConfig::desk(64), View::Ap).unwrap()
    }

    #[test]
    fn full_scale_defaults() {
        let g = build_geometry(&GeometryConfig::full_scale(), View::Ap).unwrap();
        assert_eq!(g.sid_mm, 595.0);
        assert_eq!(g.sdd_mm, 1085.6);
        assert_eq!(g.n_detector_bins, 920);
    }

    #[test]
    fn desk_bin_count_is_scaled_and_even() {
        assert_eq!(desk_bins(64), 460);
        assert_eq!(desk_bins(128), 920);
        assert_eq!(desk_bins(16), 116);
        assert_eq!(desk_bins(1), 8);
        assert_eq!(desk().n_detector_bins, 460);
    }

    #[test]
    fn single_voxel_grid_builds() {
        let g = build_geometry(&GeometryConfig::desk(1), View::Ap).unwrap();
        let t = build_backprojection_matrix(&g).unwrap();
        assert_eq!(t.n_rows(), 1);
        assert_eq!(t.csr().row_nnz(0), 2);
    }

    #[test]
    fn uncovered_fov_is_rejected_with_margin() {
        let mut cfg = GeometryConfig::desk(64);
        cfg.detector_pitch_mm = Some(0.1);
        let err = build_geometry(&cfg, View::Ap).unwrap_err().to_string();
        assert!(err.contains("10% margin"), "{err}");
    }

    #[test]
    fn invalid_distances_rejected() {
        let mut cfg = GeometryConfig::desk(64);
        cfg.sdd_mm = 500.0;
        assert!(build_geometry(&cfg, View::Ap).is_err());
        cfg.sdd_mm = -1.0;
        assert!(build_geometry(&cfg, View::Ap).is_err());
    }

    #[test]
    fn derived_pitch_keeps_corners_on_detector() {
        let g = desk();
        let n = g.grid_n;
        let h = g.fov_mm() / 2.0;
        for view in View::BOTH {
            let gv = g.with_view(view);
            for (x, y) in [(-h, -h), (-h, h), (h, -h), (h, h)] {
                let u = gv.bin_coordinate(x, y);
                assert!(u > 0.0 && u < (gv.n_detector_bins - 1) as f64, "{view:?} corner ({x},{y}) -> {u}");
            }
        }
        assert_eq!(n, 64);
    }

    #[test]
    fn scale_levels() {
        let g = desk();
        assert_eq!(scale_geometry(&g, 0).unwrap(), g);
        let g1 = scale_geometry(&g, 1).unwrap();
        assert_eq!(g1.grid_n, 32);
        assert_eq!(g1.n_detector_bins, 230);
        assert_eq!(g1.fov_mm(), g.fov_mm());
        assert_eq!(g1.n_detector_bins as f64 * g1.detector_pitch_mm, g.n_detector_bins as f64 * g.detector_pitch_mm);
        assert!(scale_geometry(&g, 3).is_err());
        assert!(scale_geometry(&g.padded(4).unwrap(), 3).is_ok());
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let g = desk();
        assert_eq!(g.fingerprint(), desk().fingerprint());
        assert_ne!(g.fingerprint(), g.with_view(View::Lat).fingerprint());
    }

    #[test]
    fn backprojection_rows_have_at_most_two_entries() {
        let g = desk();
        let t = build_backprojection_matrix(&g).unwrap();
        assert_eq!((t.n_rows(), t.n_cols()), (64 * 64, 460));
        for r in 0..t.n_rows() {
            assert!(t.csr().row_nnz(r) <= 2);
        }
    }
}
