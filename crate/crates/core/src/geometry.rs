//! Aerial-to-ground homography, image warping, region masks and the
//! three-way region compositing used by the region pipeline.
//!
//! Pixel coordinates put the center of pixel `(row, col)` at `(x = col,
//! y = row)`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::image::{Image, Mask};
use crate::{Error, Result};

/// Value written to pixels whose preimage falls outside the source.
pub const WARP_FILL: f32 = -1.0;

const DET_TOLERANCE: f64 = 1e-9;
const COLLINEAR_TOLERANCE: f64 = 1e-9;

/// Projective transform normalized so that `m[2][2] = 1` when that entry is
/// nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let m = if m[(2, 2)].abs() > 1e-12 {
            m / m[(2, 2)]
        } else {
            let n = m.norm();
            if n == 0.0 {
                return Err(Error::Degenerate("homography is the zero matrix".into()));
            }
            m / n
        };
        let det = m.determinant();
        if det.abs() <= DET_TOLERANCE {
            return Err(Error::Degenerate(format!(
                "homography is singular (det = {det:e})"
            )));
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        rows
    }

    pub fn inverse(&self) -> Homography {
        // det was checked on construction
        let inv = self.m.try_inverse().expect("homography is invertible");
        Homography::new(inv).unwrap_or(Homography { m: inv })
    }

    /// Product `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::new(self.m * other.m)
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.m * Vector3::new(x, y, 1.0);
        if p.z.abs() < 1e-12 {
            None
        } else {
            Some((p.x / p.z, p.y / p.z))
        }
    }

    /// Serializes as nine whitespace-separated numbers, row-major.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        rows.iter()
            .map(|r| format!("{:.17e} {:.17e} {:.17e}", r[0], r[1], r[2]))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn parse(text: &str) -> Result<Homography> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Config(format!("homography entry {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Config(format!(
                "homography needs 9 numbers, found {}",
                vals.len()
            )));
        }
        Homography::new(Matrix3::from_row_slice(&vals))
    }

    pub fn load(path: &Path) -> Result<Homography> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Homography::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

impl fmt::Display for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.rows() {
            writeln!(f, "[{:>12.6} {:>12.6} {:>12.6}]", r[0], r[1], r[2])?;
        }
        Ok(())
    }
}

/// Four source points and the four target points they map to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondences {
    pub source: [(f64, f64); 4],
    pub target: [(f64, f64); 4],
}

impl Correspondences {
    pub fn new(source: [(f64, f64); 4], target: [(f64, f64); 4]) -> Result<Self> {
        let c = Self { source, target };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_no_collinear_triple(&self.source, "source")?;
        check_no_collinear_triple(&self.target, "target")
    }

    /// Four lines of `sx sy tx ty`.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if lines.len() != 4 {
            return Err(Error::Config(format!(
                "correspondence file needs 4 lines, found {}",
                lines.len()
            )));
        }
        let mut source = [(0.0, 0.0); 4];
        let mut target = [(0.0, 0.0); 4];
        for (i, line) in lines.iter().enumerate() {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Config(format!("line {}: {t:?}: {e}", i + 1)))
                })
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::Config(format!(
                    "line {} needs `sx sy tx ty`, found {} values",
                    i + 1,
                    v.len()
                )));
            }
            source[i] = (v[0], v[1]);
            target[i] = (v[2], v[3]);
        }
        Correspondences::new(source, target)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Correspondences::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| format!("{} {} {} {}\n", s.0, s.1, t.0, t.1))
            .collect()
    }
}

fn check_no_collinear_triple(pts: &[(f64, f64); 4], which: &str) -> Result<()> {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    for [a, b, c] in TRIPLES {
        let (pa, pb, pc) = (pts[a], pts[b], pts[c]);
        let ab = (pb.0 - pa.0, pb.1 - pa.1);
        let ac = (pc.0 - pa.0, pc.1 - pa.1);
        let bc = (pc.0 - pb.0, pc.1 - pb.1);
        let cross = ab.0 * ac.1 - ab.1 * ac.0;
        let scale = [ab, ac, bc]
            .iter()
            .map(|d| d.0 * d.0 + d.1 * d.1)
            .fold(0.0, f64::max);
        if scale == 0.0 || cross.abs() <= COLLINEAR_TOLERANCE * scale {
            return Err(Error::Degenerate(format!(
                "{which} points {a}, {b}, {c} are collinear"
            )));
        }
    }
    Ok(())
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn isotropic_normalization(pts: &[(f64, f64); 4]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform_points(t: &Matrix3<f64>, pts: &[(f64, f64); 4]) -> [(f64, f64); 4] {
    pts.map(|(x, y)| {
        let p = t * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    })
}

/// Direct linear transform over four correspondences with isotropic point
/// normalization on both sides.
pub fn estimate_homography(c: &Correspondences) -> Result<Homography> {
    c.validate()?;
    let t_src = isotropic_normalization(&c.source);
    let t_dst = isotropic_normalization(&c.target);
    let src = transform_points(&t_src, &c.source);
    let dst = transform_points(&t_dst, &c.target);

    // 8 equations padded with a zero row so the SVD yields the full right
    // singular basis.
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for (i, (&(x, y), &(u, v))) in src.iter().zip(&dst).enumerate() {
        let r = 2 * i;
        let row0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let row1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for k in 0..9 {
            a[(r, k)] = row0[k];
            a[(r + 1, k)] = row1[k];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| {
            if s < best.1 {
                (i, s)
            } else {
                best
            }
        });
    let h = v_t.row(min_idx);
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("target normalization is singular".into()))?;
    Homography::new(t_dst_inv * h_norm * t_src)
}

/// Largest reprojection error in pixels of `h` over the correspondences.
pub fn max_reprojection_error(h: &Homography, c: &Correspondences) -> f64 {
    c.source
        .iter()
        .zip(&c.target)
        .map(|(&(x, y), &(u, v))| match h.apply(x, y) {
            Some((px, py)) => ((px - u).powi(2) + (py - v).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Inverse-maps every output pixel through `h` and samples the source
/// bilinearly. Pixels whose preimage is outside the source, or behind the
/// source plane, receive [`WARP_FILL`] and are cleared in the returned mask.
pub fn warp_image(img: &Image, h: &Homography, out_height: usize, out_width: usize) -> Result<(Image, Mask)> {
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::Shape("cannot warp an empty image".into()));
    }
    let inv = h.inverse();
    let m = inv.matrix();
    let (sw, sh) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let eps = 1e-9;
    // Orientation: the source frame centre maps with sign `s` of w, and the
    // normalized inverse carries a scale `k`; a preimage lies in front of
    // the plane when its w has sign `s * k`.
    let fwd = h.matrix();
    let s = (fwd[(2, 0)] * sw / 2.0 + fwd[(2, 1)] * sh / 2.0 + fwd[(2, 2)]).signum();
    let k = (m * fwd)[(2, 2)].signum();
    let orient = s * k;
    let mut out = Image::filled(img.channels(), out_height, out_width, WARP_FILL);
    let mut valid = Mask::new(out_height, out_width, false);
    for r in 0..out_height {
        for c in 0..out_width {
            let (u, v) = (c as f64, r as f64);
            let w = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
            if !(w * orient > 1e-12) {
                continue;
            }
            let x = (m[(0, 0)] * u + m[(0, 1)] * v + m[(0, 2)]) / w;
            let y = (m[(1, 0)] * u + m[(1, 1)] * v + m[(1, 2)]) / w;
            if !(x >= -eps && x <= sw + eps && y >= -eps && y <= sh + eps) {
                continue;
            }
            let x = x.clamp(0.0, sw);
            let y = y.clamp(0.0, sh);
            let x0 = (x.floor() as usize).min(img.width().saturating_sub(2));
            let y0 = (y.floor() as usize).min(img.height().saturating_sub(2));
            let x1 = (x0 + 1).min(img.width() - 1);
            let y1 = (y0 + 1).min(img.height() - 1);
            let fx = x - x0 as f64;
            let fy = y - y0 as f64;
            for ch in 0..img.channels() {
                let top = img.get(ch, y0, x0) as f64 * (1.0 - fx) + img.get(ch, y0, x1) as f64 * fx;
                let bot = img.get(ch, y1, x0) as f64 * (1.0 - fx) + img.get(ch, y1, x1) as f64 * fx;
                out.set(ch, r, c, (top * (1.0 - fy) + bot * fy) as f32);
            }
            valid.set(r, c, true);
        }
    }
    Ok((out, valid))
}

/// Half-open axis-aligned pixel rectangle: rows `[top, bottom)`, columns
/// `[left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Rect {
    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    pub fn area(&self) -> usize {
        self.bottom.saturating_sub(self.top) * self.right.saturating_sub(self.left)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.top.max(other.top) < self.bottom.min(other.bottom)
            && self.left.max(other.left) < self.right.min(other.right)
    }

    fn fits(&self, height: usize, width: usize) -> bool {
        self.top < self.bottom && self.left < self.right && self.bottom <= height && self.right <= width
    }

    fn mask(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| self.contains(r, c))
    }
}

/// Region layout for the compositing pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub inpaint: Rect,
    pub car: Rect,
    pub band_width: usize,
}

impl RegionLayout {
    /// Upper half for the inpainted region, a lower-central hood window
    /// for the car, and an 8 px band, all scaled from a 256 px frame.
    pub fn default_for(size: usize) -> Self {
        let scale = |v: usize| v * size / 256;
        Self {
            inpaint: Rect::new(0, size / 2, 0, size),
            car: Rect::new(scale(184), size, scale(64), scale(192)),
            band_width: scale(8).max(1),
        }
    }
}

/// Disjoint binary region masks plus seam bands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMaskSet {
    pub m1: Mask,
    pub m2: Mask,
    pub band: Mask,
    pub layout: RegionLayout,
}

impl RegionMaskSet {
    pub fn height(&self) -> usize {
        self.m1.height()
    }

    pub fn width(&self) -> usize {
        self.m1.width()
    }

    /// Pixels copied from the warped image: `M - M1 - M2`.
    pub fn remainder(&self) -> Mask {
        self.m1.or(&self.m2).complement()
    }
}

/// Edges of `rect` that lie inside the frame, as segments
/// `(horizontal, fixed coordinate, start, end)`.
fn interior_edges(rect: &Rect, height: usize, width: usize) -> Vec<(bool, usize, usize, usize)> {
    let mut edges = Vec::new();
    if rect.top > 0 {
        edges.push((true, rect.top, rect.left, rect.right));
    }
    if rect.bottom < height {
        edges.push((true, rect.bottom, rect.left, rect.right));
    }
    if rect.left > 0 {
        edges.push((false, rect.left, rect.top, rect.bottom));
    }
    if rect.right < width {
        edges.push((false, rect.right, rect.top, rect.bottom));
    }
    edges
}

/// Builds the two region masks and the set of pixels whose centers lie
/// within `band_width` (chessboard distance) of an interior rectangle edge.
pub fn make_region_masks(height: usize, width: usize, layout: RegionLayout) -> Result<RegionMaskSet> {
    let RegionLayout {
        inpaint: r1,
        car: r2,
        band_width: bw,
    } = layout;
    for (name, r) in [("inpaint", r1), ("car", r2)] {
        if !r.fits(height, width) {
            return Err(Error::Config(format!(
                "{name} rectangle {r:?} is empty or outside the {height}x{width} frame"
            )));
        }
    }
    if r1.intersects(&r2) {
        return Err(Error::Config(format!(
            "region rectangles overlap: {r1:?} and {r2:?}"
        )));
    }
    let mut band = Mask::new(height, width, false);
    if bw > 0 {
        for rect in [r1, r2] {
            for (horizontal, at, start, end) in interior_edges(&rect, height, width) {
                let across = (at.saturating_sub(bw), at + bw);
                let along = (start.saturating_sub(bw), end + bw);
                let (rows, cols) = if horizontal { (across, along) } else { (along, across) };
                for r in rows.0..rows.1.min(height) {
                    for c in cols.0..cols.1.min(width) {
                        band.set(r, c, true);
                    }
                }
            }
        }
    }
    Ok(RegionMaskSet {
        m1: r1.mask(height, width),
        m2: r2.mask(height, width),
        band,
        layout,
    })
}

/// `inpaint * M1 + car * M2 + warped * (M - M1 - M2)`, elementwise.
pub fn composite_regions(inpaint: &Image, car: &Image, warped: &Image, masks: &RegionMaskSet) -> Result<Image> {
    inpaint.ensure_same_shape(car, "composite inpaint/car")?;
    inpaint.ensure_same_shape(warped, "composite inpaint/warped")?;
    masks.m1.ensure_frame(inpaint.height(), inpaint.width())?;
    Ok(Image::from_fn(
        inpaint.channels(),
        inpaint.height(),
        inpaint.width(),
        |c, y, x| {
            if masks.m1.get(y, x) {
                inpaint.get(c, y, x)
            } else if masks.m2.get(y, x) {
                car.get(c, y, x)
            } else {
                warped.get(c, y, x)
            }
        },
    ))
}
