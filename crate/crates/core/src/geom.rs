//! Pure coordinate math on the unit sphere.
//!
//! Conventions used throughout the crate:
//!
//! - Longitude `lon` lies in `[-π, π)`, latitude `lat` in `[-π/2, π/2]`.
//!   `(lon = 0, lat = 0)` is the viewer-facing direction, i.e. the center of
//!   an ERP image.
//! - The sphere-to-vector convention is y-up with forward = +x:
//!   `v(lon, lat) = (cos lat · cos lon, sin lat, -cos lat · sin lon)`.
//!   Under this convention the centering rotation `R = R_y(φ) · R_z(θ)`
//!   sends the forward axis to the direction `(lon = φ, lat = θ)` exactly.
//! - ERP pixels are sampled at their centers: the angle of integer pixel
//!   `x` is taken at `x + 0.5` grid units, which makes the pixel↔angle
//!   mappings exact mutual inverses at pixel centers.
//!
//! All functions here are pure; they share no state and are safe to call
//! from any number of threads.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use thiserror::Error;

/// Two circular intervals are considered to cover the full circle when their
/// shortest covering arc is within this tolerance of 2π.
const FULL_CIRCLE_EPS: f64 = 1e-9;

/// Errors produced by the geometry layer.
#[derive(Debug, Error)]
pub enum GeomError {
    /// A pixel/image argument violates the projection geometry.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    /// A raw vector was too far from unit length to accept.
    #[error("vector norm {norm} differs from 1 by more than 1e-6")]
    NonUnitVector { norm: f64 },
    /// The combined longitude extents of a box pair cover the full circle,
    /// so no shortest covering arc (and hence no pair center) exists.
    #[error("combined longitude extents cover the full circle; pair center is undefined")]
    DegeneratePair,
    /// A CMP pixel falls in one of the blank cells of the 4×3 cross.
    #[error("pixel ({x:.1}, {y:.1}) lies outside every cube face cell")]
    OutsideFace { x: f64, y: f64 },
}

/// Wrap a longitude into `[-π, π)`.
pub fn wrap_lon(lon: f64) -> f64 {
    let wrapped = (lon + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for tiny negative inputs.
    if wrapped >= PI {
        -PI
    } else {
        wrapped
    }
}

/// Wrap an angle into `[0, 2π)`.
fn wrap_tau(angle: f64) -> f64 {
    let wrapped = angle.rem_euclid(TAU);
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

// ---------------------------------------------------------------------------
// SphereCoord / UnitVec3
// ---------------------------------------------------------------------------

/// A direction on the unit sphere as (longitude, latitude) in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereCoord {
    /// Longitude in `[-π, π)`.
    pub lon: f64,
    /// Latitude in `[-π/2, π/2]`.
    pub lat: f64,
}

impl SphereCoord {
    /// Build a coordinate, wrapping the longitude and clamping the latitude.
    pub fn new(lon: f64, lat: f64) -> Self {
        Self {
            lon: wrap_lon(lon),
            lat: lat.clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

/// A unit-length direction vector (y-up, forward = +x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    /// Accept components whose norm is within `1e-6` of 1 and renormalize.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(GeomError::NonUnitVector { norm });
        }
        Ok(Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    /// Normalize an arbitrary non-zero vector.
    pub(crate) fn normalized(x: f64, y: f64, z: f64) -> Self {
        let norm = (x * x + y * y + z * z).sqrt();
        debug_assert!(norm > 0.0, "cannot normalize the zero vector");
        Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Convert a sphere coordinate to its unit direction vector.
///
/// `(0, 0)` maps to `(1, 0, 0)` and `(0, π/2)` to `(0, 1, 0)`.
pub fn sphere_to_unit_vec(c: &SphereCoord) -> UnitVec3 {
    let (sin_lon, cos_lon) = c.lon.sin_cos();
    let (sin_lat, cos_lat) = c.lat.sin_cos();
    UnitVec3 {
        x: cos_lat * cos_lon,
        y: sin_lat,
        z: -cos_lat * sin_lon,
    }
}

/// Inverse of [`sphere_to_unit_vec`]. At the poles (`|y| = 1`) the longitude
/// is fixed to 0 to keep the mapping single-valued.
pub fn unit_vec_to_sphere(v: &UnitVec3) -> SphereCoord {
    let lat = v.y.clamp(-1.0, 1.0).asin();
    let lon = if v.x == 0.0 && v.z == 0.0 {
        0.0
    } else {
        (-v.z).atan2(v.x)
    };
    SphereCoord::new(lon, lat)
}

// ---------------------------------------------------------------------------
// ERP pixel ↔ angle mappings
// ---------------------------------------------------------------------------

/// Map an ERP pixel to its sphere coordinate (pixel-center sampling).
///
/// Requires `width = 2 · height` and `0 ≤ x < width`, `0 ≤ y < height`.
pub fn erp_pixel_to_sphere(
    x: f64,
    y: f64,
    width: u32,
    height: u32,
) -> Result<SphereCoord, GeomError> {
    check_erp_dims(width, height)?;
    if !(0.0..width as f64).contains(&x) || !(0.0..height as f64).contains(&y) {
        return Err(GeomError::InvalidGeometry(format!(
            "pixel ({x}, {y}) outside {width}x{height} image"
        )));
    }
    Ok(SphereCoord::new(
        erp_lon_of_x(x, width),
        erp_lat_of_y(y, height),
    ))
}

/// Map a sphere coordinate to continuous ERP pixel coordinates.
///
/// Exact inverse of [`erp_pixel_to_sphere`] at pixel centers; the longitude
/// is wrapped and the latitude clamped, so this never fails.
pub fn sphere_to_erp_pixel(c: &SphereCoord, width: u32, height: u32) -> (f64, f64) {
    let lon = wrap_lon(c.lon);
    let lat = c.lat.clamp(-FRAC_PI_2, FRAC_PI_2);
    let x = (lon + PI) / TAU * width as f64 - 0.5;
    let y = (FRAC_PI_2 - lat) / PI * height as f64 - 0.5;
    (x, y)
}

/// Longitude of the ERP pixel column `x` (unwrapped; monotone in `x`).
pub(crate) fn erp_lon_of_x(x: f64, width: u32) -> f64 {
    (x + 0.5) / width as f64 * TAU - PI
}

/// Latitude of the ERP pixel row `y` (decreasing in `y`).
pub(crate) fn erp_lat_of_y(y: f64, height: u32) -> f64 {
    FRAC_PI_2 - (y + 0.5) / height as f64 * PI
}

fn check_erp_dims(width: u32, height: u32) -> Result<(), GeomError> {
    if width == 0 || height == 0 || width != 2 * height {
        return Err(GeomError::InvalidGeometry(format!(
            "ERP image must satisfy width = 2 * height, got {width}x{height}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rotations
// ---------------------------------------------------------------------------

/// A proper 3×3 rotation matrix in row-major layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Apply the matrix to a direction vector.
    pub fn apply(&self, v: &UnitVec3) -> UnitVec3 {
        let m = &self.0;
        UnitVec3 {
            x: m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            y: m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            z: m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        }
    }

    /// Transpose; for a rotation matrix this is the inverse.
    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest absolute entry of `M · Mᵀ - I`; zero for an orthonormal matrix.
    pub fn orthonormality_error(&self) -> f64 {
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for (k, row) in t.0.iter().enumerate() {
                    dot += self.0[i][k] * row[j];
                }
                let expected = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expected).abs());
            }
        }
        worst
    }
}

/// The entity-centering rotation: angles and their matrix.
///
/// `matrix` always equals `R_y(phi) · R_z(theta)` for the stored angles;
/// build one through [`rotation_matrix`] or [`pair_center`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSpec {
    /// Rotation about the y-axis, in radians.
    pub phi: f64,
    /// Rotation about the z-axis, in radians.
    pub theta: f64,
    pub matrix: RotationMatrix,
}

/// Build the centering rotation for angles `(phi, theta)`.
///
/// The matrix rows are
/// `[[cosφ·cosθ, -cosφ·sinθ, sinφ], [sinθ, cosθ, 0], [-sinφ·cosθ, sinφ·sinθ, cosφ]]`,
/// which equals `R_y(φ) · R_z(θ)` and sends `(1, 0, 0)` to the direction
/// `(lon = φ, lat = θ)` under this crate's vector convention.
///
/// ```
/// use free360_core::geom::{rotation_matrix, unit_vec_to_sphere, UnitVec3};
///
/// let rot = rotation_matrix(1.2, -0.4);
/// let forward = UnitVec3::new(1.0, 0.0, 0.0).unwrap();
/// let sent = unit_vec_to_sphere(&rot.matrix.apply(&forward));
/// assert!((sent.lon - 1.2).abs() < 1e-12);
/// assert!((sent.lat + 0.4).abs() < 1e-12);
/// ```
pub fn rotation_matrix(phi: f64, theta: f64) -> RotationSpec {
    let (sin_phi, cos_phi) = phi.sin_cos();
    let (sin_theta, cos_theta) = theta.sin_cos();
    RotationSpec {
        phi,
        theta,
        matrix: RotationMatrix([
            [cos_phi * cos_theta, -cos_phi * sin_theta, sin_phi],
            [sin_theta, cos_theta, 0.0],
            [-sin_phi * cos_theta, sin_phi * sin_theta, cos_phi],
        ]),
    }
}

// ---------------------------------------------------------------------------
// Pixel boxes
// ---------------------------------------------------------------------------

/// An axis-aligned box in continuous pixel coordinates.
///
/// `x1 ≤ x2` and `y1 ≤ y2` always hold. In the ERP frame a box may encode a
/// seam wrap by letting `x2` exceed the image width (the horizontal extent is
/// read modulo the width); [`PixelBox::split_at_seam`] turns such a box into
/// drawable parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    /// Build a box from two corners, ordering the coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clamp the box into `[0, width] × [0, height]`.
    pub fn clamp_to(&self, width: u32, height: u32) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
            x2: self.x2.clamp(0.0, width as f64),
            y2: self.y2.clamp(0.0, height as f64),
        }
    }

    pub fn intersect(&self, other: &PixelBox) -> Option<PixelBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x1 <= x2 && y1 <= y2).then_some(PixelBox { x1, y1, x2, y2 })
    }

    /// Whether the box crosses the ERP seam (encoded as `x2 > width`).
    pub fn wraps(&self, width: u32) -> bool {
        self.x2 > width as f64
    }

    /// Split a possibly seam-wrapping ERP box into one or two in-bounds parts.
    pub fn split_at_seam(&self, width: u32) -> (PixelBox, Option<PixelBox>) {
        let w = width as f64;
        if !self.wraps(width) {
            return (*self, None);
        }
        if self.width() >= w {
            // Covers the full circle: a single full-width band.
            return (
                PixelBox {
                    x1: 0.0,
                    y1: self.y1,
                    x2: w,
                    y2: self.y2,
                },
                None,
            );
        }
        let first = PixelBox {
            x1: self.x1,
            y1: self.y1,
            x2: w,
            y2: self.y2,
        };
        let second = PixelBox {
            x1: 0.0,
            y1: self.y1,
            x2: self.x2 - w,
            y2: self.y2,
        };
        (first, Some(second))
    }
}

impl From<[f64; 4]> for PixelBox {
    fn from(v: [f64; 4]) -> Self {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

// ---------------------------------------------------------------------------
// Pair center
// ---------------------------------------------------------------------------

/// Center of the minimal spherical bounding box enclosing two ERP boxes,
/// together with the rotation that centers it.
///
/// Longitudes are treated as circular intervals and covered by the shortest
/// arc; latitudes as a plain interval. The rotation angles are the longitude
/// and latitude of the returned center.
pub fn pair_center(
    box_a: &PixelBox,
    box_b: &PixelBox,
    width: u32,
    height: u32,
) -> Result<(SphereCoord, RotationSpec), GeomError> {
    check_erp_dims(width, height)?;
    let arc_a = lon_arc_of_box(box_a, width);
    let arc_b = lon_arc_of_box(box_b, width);
    let (start, len) = cover_two_arcs(arc_a, arc_b)?;
    let lon = wrap_lon(start + len / 2.0);

    // Latitude decreases with y, so y1 is the high-latitude edge.
    let lat_hi = erp_lat_of_y(box_a.y1, height).max(erp_lat_of_y(box_b.y1, height));
    let lat_lo = erp_lat_of_y(box_a.y2, height).min(erp_lat_of_y(box_b.y2, height));
    let lat = (lat_hi + lat_lo) / 2.0;

    let center = SphereCoord::new(lon, lat);
    let rot = rotation_matrix(center.lon, center.lat);
    Ok((center, rot))
}

/// Longitude extent of an ERP box as a circular arc `(start, length)` with
/// the start wrapped into `[0, 2π)` and the length capped at `2π`.
fn lon_arc_of_box(b: &PixelBox, width: u32) -> (f64, f64) {
    let start = wrap_tau(erp_lon_of_x(b.x1, width));
    let len = (erp_lon_of_x(b.x2, width) - erp_lon_of_x(b.x1, width)).min(TAU);
    (start, len)
}

/// Shortest arc covering two circular arcs. The covering arc starts at one of
/// the input starts; ties are broken toward the smaller start angle so the
/// result is symmetric in its arguments.
fn cover_two_arcs(a: (f64, f64), b: (f64, f64)) -> Result<(f64, f64), GeomError> {
    let (s1, l1) = a;
    let (s2, l2) = b;
    let len_from_1 = l1.max(wrap_tau(s2 - s1) + l2);
    let len_from_2 = l2.max(wrap_tau(s1 - s2) + l1);
    let (start, len) = if len_from_1 < len_from_2 || (len_from_1 == len_from_2 && s1 <= s2) {
        (s1, len_from_1)
    } else {
        (s2, len_from_2)
    };
    if len >= TAU - FULL_CIRCLE_EPS {
        return Err(GeomError::DegeneratePair);
    }
    Ok((start, len))
}

// ---------------------------------------------------------------------------
// Cube faces and the 4×3 cross layout
// ---------------------------------------------------------------------------

/// One of the six cube faces, named for the viewing direction it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Front,
    Back,
    Left,
    Right,
    Top,
    Bottom,
}

impl Face {
    /// All faces in the edge tie-break priority order.
    pub const ALL: [Face; 6] = [
        Face::Front,
        Face::Back,
        Face::Left,
        Face::Right,
        Face::Top,
        Face::Bottom,
    ];

    /// The view-node label paired with this face.
    pub fn view_label(&self) -> &'static str {
        match self {
            Face::Front => "front view",
            Face::Back => "behind view",
            Face::Left => "left view",
            Face::Right => "right view",
            Face::Top => "top view",
            Face::Bottom => "bottom view",
        }
    }

    /// Inverse of [`Face::view_label`].
    pub fn from_view_label(label: &str) -> Option<Face> {
        Face::ALL.into_iter().find(|f| f.view_label() == label)
    }
}

/// The 4×3-cross cubemap layout with square faces.
///
/// The middle row is `[Back, Left, Front, Right]` left to right, with Top
/// above Front and Bottom below Front; the remaining six cells are blank.
/// With `face_size = erp_width / 4` the equatorial pixel count of the source
/// panorama is preserved (a 7296×3648 ERP yields a 7296×5472 canvas).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmpLayout {
    face_size: u32,
}

impl CmpLayout {
    pub fn new(face_size: u32) -> Result<Self, GeomError> {
        if face_size == 0 {
            return Err(GeomError::InvalidGeometry(
                "face_size must be positive".into(),
            ));
        }
        Ok(Self { face_size })
    }

    pub fn face_size(&self) -> u32 {
        self.face_size
    }

    pub fn canvas_width(&self) -> u32 {
        4 * self.face_size
    }

    pub fn canvas_height(&self) -> u32 {
        3 * self.face_size
    }

    /// Grid cell `(column, row)` occupied by a face.
    pub fn placement(&self, face: Face) -> (u32, u32) {
        match face {
            Face::Back => (0, 1),
            Face::Left => (1, 1),
            Face::Front => (2, 1),
            Face::Right => (3, 1),
            Face::Top => (2, 0),
            Face::Bottom => (2, 2),
        }
    }

    /// Face occupying grid cell `(column, row)`, if any.
    pub fn face_at_cell(&self, col: u32, row: u32) -> Option<Face> {
        Face::ALL
            .into_iter()
            .find(|f| self.placement(*f) == (col, row))
    }

    /// Top-left pixel corner of a face's cell.
    pub fn face_origin(&self, face: Face) -> (f64, f64) {
        let (col, row) = self.placement(face);
        (
            (col * self.face_size) as f64,
            (row * self.face_size) as f64,
        )
    }

    /// Cell rectangle of a face in canvas pixel coordinates.
    pub fn face_cell(&self, face: Face) -> PixelBox {
        let (x0, y0) = self.face_origin(face);
        PixelBox::new(
            x0,
            y0,
            x0 + self.face_size as f64,
            y0 + self.face_size as f64,
        )
    }
}

/// Direction through a face point. `u` and `v` run in `[-1, 1]` across the
/// face as laid out in the cross (u right, v down); the face center maps to
/// its axis direction, e.g. `(Front, 0, 0) → (1, 0, 0)`.
pub fn face_uv_to_unit_vec(face: Face, u: f64, v: f64) -> UnitVec3 {
    let (x, y, z) = match face {
        Face::Front => (1.0, -v, -u),
        Face::Right => (-u, -v, -1.0),
        Face::Back => (-1.0, -v, u),
        Face::Left => (u, -v, 1.0),
        Face::Top => (v, 1.0, -u),
        Face::Bottom => (-v, -1.0, -u),
    };
    UnitVec3::normalized(x, y, z)
}

/// Project a direction onto the cube: the face of its largest-magnitude axis
/// component, plus the in-face coordinates. Inverse of [`face_uv_to_unit_vec`]
/// on face interiors; exact ties on face edges are broken by the fixed
/// priority Front > Back > Left > Right > Top > Bottom.
pub fn unit_vec_to_face_uv(v: &UnitVec3) -> (Face, f64, f64) {
    let mags = [v.x.abs(), v.x.abs(), v.z.abs(), v.z.abs(), v.y.abs(), v.y.abs()];
    let max_mag = v.x.abs().max(v.y.abs()).max(v.z.abs());
    for (face, mag) in Face::ALL.into_iter().zip(mags) {
        if mag < max_mag {
            continue;
        }
        let sign_ok = match face {
            Face::Front => v.x > 0.0,
            Face::Back => v.x < 0.0,
            Face::Left => v.z > 0.0,
            Face::Right => v.z < 0.0,
            Face::Top => v.y > 0.0,
            Face::Bottom => v.y < 0.0,
        };
        if !sign_ok {
            continue;
        }
        let m = max_mag;
        let (u, fv) = match face {
            Face::Front => (-v.z / m, -v.y / m),
            Face::Back => (v.z / m, -v.y / m),
            Face::Left => (v.x / m, -v.y / m),
            Face::Right => (-v.x / m, -v.y / m),
            Face::Top => (-v.z / m, v.x / m),
            Face::Bottom => (-v.z / m, -v.x / m),
        };
        return (face, u, fv);
    }
    unreachable!("a unit vector always has a dominant axis");
}

/// The pixel-to-view mapping: the face owning the grid cell that contains
/// the CMP pixel `(x, y)`.
pub fn view_of_pixel(x: f64, y: f64, layout: &CmpLayout) -> Result<Face, GeomError> {
    let f = layout.face_size as f64;
    if x < 0.0 || y < 0.0 || x >= layout.canvas_width() as f64 || y >= layout.canvas_height() as f64
    {
        return Err(GeomError::OutsideFace { x, y });
    }
    let col = (x / f) as u32;
    let row = (y / f) as u32;
    layout
        .face_at_cell(col, row)
        .ok_or(GeomError::OutsideFace { x, y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_coord(rng: &mut StdRng) -> SphereCoord {
        SphereCoord::new(
            rng.random_range(-PI..PI),
            (rng.random_range(-1.0f64..1.0)).asin(),
        )
    }

    #[test]
    fn erp_pixel_to_sphere_center_edges() {
        let half_lon = PI / 7296.0;
        let c = erp_pixel_to_sphere(3648.0, 1824.0, 7296, 3648).unwrap();
        assert!(c.lon.abs() <= half_lon + 1e-12, "lon = {}", c.lon);
        assert!(c.lat.abs() <= PI / 2.0 / 3648.0 + 1e-12, "lat = {}", c.lat);

        let seam = erp_pixel_to_sphere(0.0, 1824.0, 7296, 3648).unwrap();
        assert!((seam.lon - (-PI + half_lon)).abs() < 1e-12);

        let pole = erp_pixel_to_sphere(3648.0, 0.0, 7296, 3648).unwrap();
        assert!((pole.lat - (FRAC_PI_2 - PI / 2.0 / 3648.0)).abs() < 1e-12);
    }

    #[test]
    fn erp_pixel_to_sphere_rejects_bad_inputs() {
        assert!(erp_pixel_to_sphere(0.0, 0.0, 100, 100).is_err());
        assert!(erp_pixel_to_sphere(-1.0, 0.0, 200, 100).is_err());
        assert!(erp_pixel_to_sphere(200.0, 0.0, 200, 100).is_err());
        assert!(erp_pixel_to_sphere(0.0, 100.0, 200, 100).is_err());
    }

    #[test]
    fn erp_round_trip_at_all_pixel_centers() {
        let (w, h) = (512u32, 256u32);
        for y in 0..h {
            for x in 0..w {
                let c = erp_pixel_to_sphere(x as f64, y as f64, w, h).unwrap();
                let (bx, by) = sphere_to_erp_pixel(&c, w, h);
                assert!(
                    (bx - x as f64).abs() < 1e-9 && (by - y as f64).abs() < 1e-9,
                    "({x}, {y}) -> ({bx}, {by})"
                );
            }
        }
    }

    #[test]
    fn sphere_to_erp_pixel_handles_seam_and_center() {
        let (x, y) = sphere_to_erp_pixel(&SphereCoord::new(0.0, 0.0), 7296, 3648);
        assert!((x - 3647.5).abs() < 1e-9);
        assert!((y - 1823.5).abs() < 1e-9);

        let (x, _) = sphere_to_erp_pixel(&SphereCoord::new(-PI, 0.0), 7296, 3648);
        assert!((x - (-0.5)).abs() < 1e-9, "seam maps to the x = 0 boundary");
    }

    #[test]
    fn unit_vec_axes() {
        let v = sphere_to_unit_vec(&SphereCoord::new(0.0, 0.0));
        assert_eq!((v.x, v.y, v.z), (1.0, 0.0, 0.0));
        let v = sphere_to_unit_vec(&SphereCoord::new(0.0, FRAC_PI_2));
        assert!((v.y - 1.0).abs() < 1e-15 && v.x.abs() < 1e-15);
        let v = sphere_to_unit_vec(&SphereCoord::new(FRAC_PI_2, 0.0));
        assert!(v.x.abs() < 1e-15 && (v.z + 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_vec_to_sphere_pole_and_inverse() {
        let pole = unit_vec_to_sphere(&UnitVec3::new(0.0, 1.0, 0.0).unwrap());
        assert_eq!(pole.lon, 0.0);
        assert!((pole.lat - FRAC_PI_2).abs() < 1e-12);

        assert!(UnitVec3::new(0.5, 0.5, 0.5).is_err());

        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let c = random_coord(&mut rng);
            let back = unit_vec_to_sphere(&sphere_to_unit_vec(&c));
            assert!((back.lon - c.lon).abs() < 1e-9, "{c:?} vs {back:?}");
            assert!((back.lat - c.lat).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_matrix_reference_values() {
        let id = rotation_matrix(0.0, 0.0);
        assert_eq!(id.matrix, RotationMatrix::identity());

        let r = rotation_matrix(FRAC_PI_2, 0.0).matrix.0;
        let want = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-15, "phi entry {i}{j}");
            }
        }

        let r = rotation_matrix(0.0, FRAC_PI_2).matrix.0;
        let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-15, "theta entry {i}{j}");
            }
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal_and_centers_forward_axis() {
        let mut rng = StdRng::seed_from_u64(11);
        let forward = UnitVec3::new(1.0, 0.0, 0.0).unwrap();
        for _ in 0..500 {
            let phi = rng.random_range(-PI..PI);
            let theta = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let spec = rotation_matrix(phi, theta);
            assert!(spec.matrix.orthonormality_error() < 1e-12);
            assert!((spec.matrix.determinant() - 1.0).abs() < 1e-12);

            let sent = unit_vec_to_sphere(&spec.matrix.apply(&forward));
            assert!((sent.lon - wrap_lon(phi)).abs() < 1e-9, "phi={phi}");
            assert!((sent.lat - theta).abs() < 1e-9, "theta={theta}");
        }
    }

    /// Independent pair-center oracle: try both wrap offsets for the second
    /// box's longitude interval on the real line and keep the shorter cover.
    fn pair_center_oracle(a: &PixelBox, b: &PixelBox, w: u32, h: u32) -> Option<SphereCoord> {
        let (a1, a2) = (erp_lon_of_x(a.x1, w), erp_lon_of_x(a.x2, w));
        let (b1, b2) = (erp_lon_of_x(b.x1, w), erp_lon_of_x(b.x2, w));
        let mut best: Option<(f64, f64)> = None;
        for k in [-1.0, 0.0, 1.0] {
            let lo = a1.min(b1 + k * TAU);
            let hi = a2.max(b2 + k * TAU);
            if best.is_none() || hi - lo < best.unwrap().1 {
                best = Some(((lo + hi) / 2.0, hi - lo));
            }
        }
        let (mid, len) = best.unwrap();
        if len >= TAU - FULL_CIRCLE_EPS {
            return None;
        }
        let lat_hi = erp_lat_of_y(a.y1, h).max(erp_lat_of_y(b.y1, h));
        let lat_lo = erp_lat_of_y(a.y2, h).min(erp_lat_of_y(b.y2, h));
        Some(SphereCoord::new(mid, (lat_hi + lat_lo) / 2.0))
    }

    fn box_around(c: SphereCoord, half_w: f64, half_h: f64, w: u32, h: u32) -> PixelBox {
        let (x, y) = sphere_to_erp_pixel(&c, w, h);
        PixelBox::new(x - half_w, y - half_h, x + half_w, y + half_h)
    }

    #[test]
    fn pair_center_symmetric_pair_is_centered_at_origin() {
        let (w, h) = (7296, 3648);
        let a = box_around(SphereCoord::new(-0.2, 0.0), 40.0, 20.0, w, h);
        let b = box_around(SphereCoord::new(0.2, 0.0), 40.0, 20.0, w, h);
        let (c, rot) = pair_center(&a, &b, w, h).unwrap();
        assert!(c.lon.abs() < 1e-9, "lon = {}", c.lon);
        assert!(c.lat.abs() < 1e-9, "lat = {}", c.lat);
        assert_eq!(rot.phi, c.lon);
        assert_eq!(rot.theta, c.lat);
    }

    #[test]
    fn pair_center_wraps_across_the_seam() {
        let (w, h) = (7296, 3648);
        let deg = PI / 180.0;
        let x_of = |lon_deg: f64| (lon_deg * deg + PI) / TAU * w as f64 - 0.5;
        let y_of = |lat_deg: f64| (FRAC_PI_2 - lat_deg * deg) / PI * h as f64 - 0.5;
        let a = PixelBox::new(x_of(170.0), y_of(10.0), x_of(175.0), y_of(-10.0));
        let b = PixelBox::new(x_of(-175.0), y_of(10.0), x_of(-170.0), y_of(-10.0));

        let oracle = pair_center_oracle(&a, &b, w, h).unwrap();
        assert!((oracle.lon - (-PI)).abs() < 1e-9);
        assert!(oracle.lat.abs() < 1e-9);

        let (c, _) = pair_center(&a, &b, w, h).unwrap();
        assert!((c.lon - oracle.lon).abs() < 1e-9);
        assert!((c.lat - oracle.lat).abs() < 1e-9);
    }

    #[test]
    fn pair_center_is_symmetric_and_shift_invariant() {
        let (w, h) = (2048, 1024);
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..100 {
            let a = box_around(random_coord(&mut rng), 30.0, 15.0, w, h).clamp_to(w, h);
            let b = box_around(random_coord(&mut rng), 30.0, 15.0, w, h).clamp_to(w, h);
            let fwd = pair_center(&a, &b, w, h);
            let rev = pair_center(&b, &a, w, h);
            match (fwd, rev) {
                (Ok((ca, _)), Ok((cb, _))) => {
                    assert!((ca.lon - cb.lon).abs() < 1e-9);
                    assert!((ca.lat - cb.lat).abs() < 1e-9);

                    // Shift both boxes by a quarter turn of longitude.
                    let wf = w as f64;
                    let dx = wf / 4.0;
                    let shift = |bx: &PixelBox| {
                        let x1 = (bx.x1 + dx) % wf;
                        let mut x2 = (bx.x2 + dx) % wf;
                        if x2 < x1 {
                            x2 += wf; // wrapped across the seam
                        }
                        PixelBox { x1, x2, ..*bx }
                    };
                    let (cs, _) = pair_center(&shift(&a), &shift(&b), w, h).unwrap();
                    let want = wrap_lon(ca.lon + TAU / 4.0);
                    assert!(
                        (wrap_lon(cs.lon - want)).abs() < 1e-9,
                        "shifted lon {} vs {}",
                        cs.lon,
                        want
                    );
                    assert!((cs.lat - ca.lat).abs() < 1e-9);
                }
                (Err(_), Err(_)) => {}
                _ => panic!("symmetry broken in the error path"),
            }
        }
    }

    #[test]
    fn pair_center_rejects_full_circle_coverage() {
        let (w, h) = (2048, 1024);
        let a = PixelBox::new(0.0, 400.0, 1200.0, 600.0);
        let b = PixelBox::new(1000.0, 400.0, 2048.0, 600.0);
        assert!(matches!(
            pair_center(&a, &b, w, h),
            Err(GeomError::DegeneratePair)
        ));
        assert!(pair_center_oracle(&a, &b, w, h).is_none());
    }

    #[test]
    fn face_centers_map_to_axes() {
        let v = face_uv_to_unit_vec(Face::Front, 0.0, 0.0);
        assert_eq!((v.x, v.y, v.z), (1.0, 0.0, 0.0));
        let v = face_uv_to_unit_vec(Face::Top, 0.0, 0.0);
        assert_eq!((v.x, v.y, v.z), (0.0, 1.0, 0.0));
        let v = face_uv_to_unit_vec(Face::Back, 0.0, 0.0);
        assert_eq!((v.x, v.y, v.z), (-1.0, 0.0, 0.0));

        let (face, u, fv) = unit_vec_to_face_uv(&UnitVec3::new(1.0, 0.0, 0.0).unwrap());
        assert_eq!((face, u, fv), (Face::Front, 0.0, 0.0));
    }

    #[test]
    fn face_uv_round_trip_on_interiors() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut seen = [0usize; 6];
        for _ in 0..10_000 {
            let face = Face::ALL[rng.random_range(0..6)];
            let u = rng.random_range(-0.999..0.999);
            let v = rng.random_range(-0.999..0.999);
            let dir = face_uv_to_unit_vec(face, u, v);
            let (back_face, bu, bv) = unit_vec_to_face_uv(&dir);
            assert_eq!(face, back_face, "u={u} v={v}");
            assert!((bu - u).abs() < 1e-9 && (bv - v).abs() < 1e-9);
            seen[Face::ALL.iter().position(|f| *f == face).unwrap()] += 1;
        }
        assert!(seen.iter().all(|&n| n > 0));
    }

    #[test]
    fn face_edge_ties_use_priority_order() {
        // All three components equal: Front wins and the point is a corner.
        let v = UnitVec3::normalized(0.5, 0.5, 0.5);
        let (face, u, fv) = unit_vec_to_face_uv(&v);
        assert_eq!(face, Face::Front);
        assert!((u - (-1.0)).abs() < 1e-12 && (fv - (-1.0)).abs() < 1e-12);

        // x negative: Back outranks Left/Right/Top/Bottom.
        let v = UnitVec3::normalized(-0.5, 0.5, 0.5);
        let (face, _, _) = unit_vec_to_face_uv(&v);
        assert_eq!(face, Face::Back);
    }

    #[test]
    fn view_of_pixel_cells() {
        let layout = CmpLayout::new(100).unwrap();
        // Center of the Front cell.
        assert_eq!(view_of_pixel(250.0, 150.0, &layout).unwrap(), Face::Front);
        // Middle row starts with Back.
        assert_eq!(view_of_pixel(50.0, 150.0, &layout).unwrap(), Face::Back);
        // Blank top-left cell.
        assert!(matches!(
            view_of_pixel(50.0, 50.0, &layout),
            Err(GeomError::OutsideFace { .. })
        ));
        // Outside the canvas entirely.
        assert!(view_of_pixel(401.0, 50.0, &layout).is_err());
    }

    #[test]
    fn view_partition_covers_six_equal_areas() {
        let layout = CmpLayout::new(8).unwrap();
        let mut counts = [0usize; 6];
        let mut blank = 0usize;
        for y in 0..layout.canvas_height() {
            for x in 0..layout.canvas_width() {
                match view_of_pixel(x as f64 + 0.5, y as f64 + 0.5, &layout) {
                    Ok(face) => {
                        counts[Face::ALL.iter().position(|f| *f == face).unwrap()] += 1
                    }
                    Err(_) => blank += 1,
                }
            }
        }
        assert!(counts.iter().all(|&n| n == 64));
        assert_eq!(blank, 6 * 64);
    }

    #[test]
    fn pixel_box_seam_split() {
        let b = PixelBox::new(1900.0, 10.0, 2150.0, 50.0);
        assert!(b.wraps(2048));
        let (first, second) = b.split_at_seam(2048);
        assert_eq!(first, PixelBox::new(1900.0, 10.0, 2048.0, 50.0));
        assert_eq!(second.unwrap(), PixelBox::new(0.0, 10.0, 102.0, 50.0));

        let plain = PixelBox::new(10.0, 10.0, 20.0, 20.0);
        assert_eq!(plain.split_at_seam(2048), (plain, None));
    }
}
