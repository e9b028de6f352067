//! Image resampling between the ERP and CMP projections, spherical rotation
//! of panoramas, box transport between frames, crops, and annotated overlays.
//!
//! All resampling is bilinear, with longitude wrap-around in ERP images and
//! border clamping inside CMP faces. Per-pixel work is parallelized across
//! rows, but each output pixel depends only on its own direction, so outputs
//! are byte-identical regardless of thread count.

use crate::geom::{
    erp_lat_of_y, erp_lon_of_x, face_uv_to_unit_vec, sphere_to_erp_pixel, sphere_to_unit_vec,
    unit_vec_to_face_uv, unit_vec_to_sphere, view_of_pixel, CmpLayout, Face, GeomError, PixelBox,
    RotationMatrix, SphereCoord, UnitVec3,
};
use image::{Rgb, RgbImage};
use rayon::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;
use thiserror::Error;

mod font;

/// Boundary sampling step (in pixels) when transporting boxes between frames.
const BOX_SAMPLE_STEP: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ReprojectError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("box covers the full longitude circle after rotation")]
    DegenerateBox,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

// ---------------------------------------------------------------------------
// Image types
// ---------------------------------------------------------------------------

/// An equirectangular panorama: 8-bit RGB with `width = 2 · height`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pixels: RgbImage,
}

impl ErpImage {
    pub fn new(pixels: RgbImage) -> Result<Self, ReprojectError> {
        let (w, h) = pixels.dimensions();
        if w == 0 || h == 0 || w != 2 * h {
            return Err(ReprojectError::InvalidImage(format!(
                "ERP image must satisfy width = 2 * height, got {w}x{h}"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        f: impl Fn(u32, u32) -> Rgb<u8>,
    ) -> Result<Self, ReprojectError> {
        Self::new(RgbImage::from_fn(width, height, f))
    }

    /// Load from a raster file (PNG, JPEG, ...); alpha is dropped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReprojectError> {
        Self::new(image::open(path)?.to_rgb8())
    }

    /// Save to a raster file chosen by extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReprojectError> {
        Ok(self.pixels.save(path)?)
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    pub fn crop(&self, bbox: &PixelBox) -> Result<RgbImage, ReprojectError> {
        crop(&self.pixels, bbox)
    }
}

/// A cubemap panorama in the 4×3-cross layout; blank cells are zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct CmpImage {
    layout: CmpLayout,
    pixels: RgbImage,
}

impl CmpImage {
    /// Wrap a canvas buffer; the blank cells of the cross are zero-filled to
    /// uphold the layout invariant.
    pub fn new(layout: CmpLayout, mut pixels: RgbImage) -> Result<Self, ReprojectError> {
        let (w, h) = pixels.dimensions();
        if w != layout.canvas_width() || h != layout.canvas_height() {
            return Err(ReprojectError::InvalidImage(format!(
                "CMP canvas must be {}x{}, got {w}x{h}",
                layout.canvas_width(),
                layout.canvas_height()
            )));
        }
        let f = layout.face_size();
        for row in 0..3 {
            for col in 0..4 {
                if layout.face_at_cell(col, row).is_some() {
                    continue;
                }
                for y in row * f..(row + 1) * f {
                    for x in col * f..(col + 1) * f {
                        pixels.put_pixel(x, y, Rgb([0, 0, 0]));
                    }
                }
            }
        }
        Ok(Self { layout, pixels })
    }

    /// Load a 4×3-cross image, inferring the face size from the dimensions.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReprojectError> {
        let pixels = image::open(path)?.to_rgb8();
        let (w, h) = pixels.dimensions();
        if w % 4 != 0 || h != w / 4 * 3 {
            return Err(ReprojectError::InvalidImage(format!(
                "expected a 4x3 cubemap cross, got {w}x{h}"
            )));
        }
        Self::new(CmpLayout::new(w / 4)?, pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReprojectError> {
        Ok(self.pixels.save(path)?)
    }

    pub fn layout(&self) -> &CmpLayout {
        &self.layout
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    pub fn crop(&self, bbox: &PixelBox) -> Result<RgbImage, ReprojectError> {
        crop(&self.pixels, bbox)
    }
}

// ---------------------------------------------------------------------------
// Bilinear sampling
// ---------------------------------------------------------------------------

fn pixel_f64(img: &RgbImage, x: u32, y: u32) -> [f64; 3] {
    let p = img.get_pixel(x, y).0;
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Bilinear sample with longitude wrap in x and clamp in y.
fn sample_erp(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = img.dimensions();
    let y = y.clamp(0.0, (h - 1) as f64);
    let y0 = y.floor();
    let fy = y - y0;
    let row0 = y0 as u32;
    let row1 = (row0 + 1).min(h - 1);

    let x0 = x.floor();
    let fx = x - x0;
    let col0 = (x0.rem_euclid(w as f64)) as u32 % w;
    let col1 = (col0 + 1) % w;

    blend(
        pixel_f64(img, col0, row0),
        pixel_f64(img, col1, row0),
        pixel_f64(img, col0, row1),
        pixel_f64(img, col1, row1),
        fx,
        fy,
    )
}

/// Bilinear sample clamped inside one CMP face cell (no inter-face blending).
fn sample_face(img: &RgbImage, layout: &CmpLayout, face: Face, u: f64, v: f64) -> [f64; 3] {
    let f = layout.face_size() as f64;
    let (ox, oy) = layout.face_origin(face);
    let max = f - 1.0;
    let lx = ((u + 1.0) / 2.0 * f - 0.5).clamp(0.0, max);
    let ly = ((v + 1.0) / 2.0 * f - 0.5).clamp(0.0, max);

    let x0 = lx.floor();
    let fx = lx - x0;
    let y0 = ly.floor();
    let fy = ly - y0;
    let cx0 = ox as u32 + x0 as u32;
    let cy0 = oy as u32 + y0 as u32;
    let cx1 = ox as u32 + (x0 + 1.0).min(max) as u32;
    let cy1 = oy as u32 + (y0 + 1.0).min(max) as u32;

    blend(
        pixel_f64(img, cx0, cy0),
        pixel_f64(img, cx1, cy0),
        pixel_f64(img, cx0, cy1),
        pixel_f64(img, cx1, cy1),
        fx,
        fy,
    )
}

fn blend(p00: [f64; 3], p10: [f64; 3], p01: [f64; 3], p11: [f64; 3], fx: f64, fy: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Fill an RGB buffer row-by-row in parallel with a per-pixel function.
fn fill_parallel(width: u32, height: u32, per_pixel: impl Fn(u32, u32) -> [f64; 3] + Sync) -> RgbImage {
    let mut buf = vec![0u8; width as usize * height as usize * 3];
    buf.par_chunks_mut(width as usize * 3)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..width {
                let rgb = per_pixel(x, y as u32);
                let o = x as usize * 3;
                row[o] = to_u8(rgb[0]);
                row[o + 1] = to_u8(rgb[1]);
                row[o + 2] = to_u8(rgb[2]);
            }
        });
    RgbImage::from_raw(width, height, buf).expect("buffer sized to dimensions")
}

// ---------------------------------------------------------------------------
// Projection conversion and rotation
// ---------------------------------------------------------------------------

/// Render an ERP panorama into the 4×3-cross cubemap layout.
///
/// Each occupied output pixel takes its face direction, converts it to a
/// sphere coordinate, and bilinearly samples the source with longitude wrap;
/// blank cells stay zero.
pub fn erp_to_cmp(src: &ErpImage, layout: &CmpLayout) -> CmpImage {
    let (sw, sh) = (src.width(), src.height());
    let f = layout.face_size() as f64;
    let pixels = fill_parallel(layout.canvas_width(), layout.canvas_height(), |x, y| {
        let col = x / layout.face_size();
        let row = y / layout.face_size();
        let Some(face) = layout.face_at_cell(col, row) else {
            return [0.0, 0.0, 0.0];
        };
        let (ox, oy) = layout.face_origin(face);
        let u = 2.0 * (x as f64 - ox + 0.5) / f - 1.0;
        let v = 2.0 * (y as f64 - oy + 0.5) / f - 1.0;
        let dir = face_uv_to_unit_vec(face, u, v);
        let sc = unit_vec_to_sphere(&dir);
        let (sx, sy) = sphere_to_erp_pixel(&sc, sw, sh);
        sample_erp(src.pixels(), sx, sy)
    });
    CmpImage {
        layout: *layout,
        pixels,
    }
}

/// Render a cubemap back to an ERP panorama of the given width.
pub fn cmp_to_erp(src: &CmpImage, width: u32) -> Result<ErpImage, ReprojectError> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(ReprojectError::InvalidImage(format!(
            "ERP width must be positive and even, got {width}"
        )));
    }
    let height = width / 2;
    let pixels = fill_parallel(width, height, |x, y| {
        let sc = SphereCoord::new(erp_lon_of_x(x as f64, width), erp_lat_of_y(y as f64, height));
        let dir = sphere_to_unit_vec(&sc);
        let (face, u, v) = unit_vec_to_face_uv(&dir);
        sample_face(src.pixels(), src.layout(), face, u, v)
    });
    Ok(ErpImage { pixels })
}

/// Rotate an ERP panorama: output pixel with direction `d` samples the source
/// at `rotation · d`, so the direction `(lon = φ, lat = θ)` of the centering
/// rotation lands at the output image center.
pub fn rotate_erp(src: &ErpImage, rotation: &RotationMatrix) -> ErpImage {
    if rotation.is_identity() {
        return src.clone();
    }
    let (w, h) = (src.width(), src.height());
    let pixels = fill_parallel(w, h, |x, y| {
        let sc = SphereCoord::new(erp_lon_of_x(x as f64, w), erp_lat_of_y(y as f64, h));
        let src_dir = rotation.apply(&sphere_to_unit_vec(&sc));
        let (sx, sy) = sphere_to_erp_pixel(&unit_vec_to_sphere(&src_dir), w, h);
        sample_erp(src.pixels(), sx, sy)
    });
    ErpImage { pixels }
}

// ---------------------------------------------------------------------------
// Box transport
// ---------------------------------------------------------------------------

fn boundary_points(b: &PixelBox) -> Vec<(f64, f64)> {
    let steps = |len: f64| ((len / BOX_SAMPLE_STEP).ceil() as usize).clamp(16, 1024);
    let nx = steps(b.width());
    let ny = steps(b.height());
    let mut pts = Vec::with_capacity(2 * (nx + ny) + 4);
    for i in 0..=nx {
        let x = b.x1 + b.width() * i as f64 / nx as f64;
        pts.push((x, b.y1));
        pts.push((x, b.y2));
    }
    for j in 0..=ny {
        let y = b.y1 + b.height() * j as f64 / ny as f64;
        pts.push((b.x1, y));
        pts.push((b.x2, y));
    }
    pts
}

/// Whether an ERP point lies inside a (possibly seam-wrapping) box.
fn box_contains_erp_point(b: &PixelBox, x: f64, y: f64, width: u32) -> bool {
    if y < b.y1 || y > b.y2 {
        return false;
    }
    let w = width as f64;
    (x - b.x1).rem_euclid(w) <= b.x2 - b.x1
}

/// Minimal covering arc of a set of longitudes, as `(start, length)` with the
/// start in `[0, 2π)`. Returns `None` when the largest gap between points is
/// so small the set effectively covers the circle.
fn covering_arc(lons: &[f64]) -> Option<(f64, f64)> {
    debug_assert!(!lons.is_empty());
    let mut angles: Vec<f64> = lons.iter().map(|l| l.rem_euclid(TAU)).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut gap_start = *angles.last().unwrap();
    let mut largest = angles[0] + TAU - gap_start;
    for pair in angles.windows(2) {
        let gap = pair[1] - pair[0];
        if gap > largest {
            largest = gap;
            gap_start = pair[0];
        }
    }
    if largest <= 1e-12 {
        return None;
    }
    let start = (gap_start + largest).rem_euclid(TAU);
    Some((start, TAU - largest))
}

fn arc_to_erp_box(start: f64, len: f64, y1: f64, y2: f64, width: u32) -> PixelBox {
    let w = width as f64;
    let mut x1 = (crate::geom::wrap_lon(start) + PI) / TAU * w - 0.5;
    if x1 < 0.0 {
        x1 += w;
    }
    let x2 = x1 + len / TAU * w;
    PixelBox { x1, y1, x2, y2 }
}

fn y_of_lat(lat: f64, height: u32) -> f64 {
    (FRAC_PI_2 - lat) / PI * height as f64 - 0.5
}

/// Transport an ERP box into the frame of a rotated ERP image.
///
/// Boundary points are mapped through the inverse rotation and covered with
/// an axis-aligned box using circular-longitude semantics; the result may
/// wrap the seam (`x2 > width`). A box that covers every longitude in the
/// rotated frame (it encloses a pole there) is rejected as degenerate.
pub fn transform_box_erp(
    bbox: &PixelBox,
    rotation: &RotationMatrix,
    width: u32,
    height: u32,
) -> Result<PixelBox, ReprojectError> {
    // The output region contains a pole exactly when the source box contains
    // the rotated pole direction.
    for pole in [
        UnitVec3 { x: 0.0, y: 1.0, z: 0.0 },
        UnitVec3 { x: 0.0, y: -1.0, z: 0.0 },
    ] {
        let src_dir = rotation.apply(&pole);
        let (px, py) = sphere_to_erp_pixel(&unit_vec_to_sphere(&src_dir), width, height);
        if box_contains_erp_point(bbox, px, py, width) {
            return Err(ReprojectError::DegenerateBox);
        }
    }

    let inverse = rotation.transpose();
    let mut lons = Vec::new();
    let mut lat_lo = f64::INFINITY;
    let mut lat_hi = f64::NEG_INFINITY;
    for (x, y) in boundary_points(bbox) {
        let sc = SphereCoord::new(erp_lon_of_x(x, width), erp_lat_of_y(y, height));
        let mapped = unit_vec_to_sphere(&inverse.apply(&sphere_to_unit_vec(&sc)));
        lons.push(mapped.lon);
        lat_lo = lat_lo.min(mapped.lat);
        lat_hi = lat_hi.max(mapped.lat);
    }
    let (start, len) = covering_arc(&lons).ok_or(ReprojectError::DegenerateBox)?;
    Ok(arc_to_erp_box(
        start,
        len,
        y_of_lat(lat_hi, height),
        y_of_lat(lat_lo, height),
        width,
    ))
}

/// Map a CMP box into the covering ERP box.
///
/// Boundary points are mapped face → sphere → ERP pixel and covered with
/// circular-longitude semantics. A box that encloses a pole (for example the
/// whole Top face) covers every longitude and yields a full-width band
/// extended to that pole.
pub fn cmp_box_to_erp_box(
    bbox: &PixelBox,
    layout: &CmpLayout,
    erp_width: u32,
    erp_height: u32,
) -> Result<PixelBox, ReprojectError> {
    let canvas = PixelBox::new(
        0.0,
        0.0,
        layout.canvas_width() as f64,
        layout.canvas_height() as f64,
    );
    if bbox.intersect(&canvas) != Some(*bbox) {
        return Err(ReprojectError::InvalidBox(format!(
            "box ({:.1}, {:.1})-({:.1}, {:.1}) exceeds the CMP canvas",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2
        )));
    }

    // Far edges are half-open: a box ending exactly on a cell border belongs
    // to the cell it covers, so sample just inside it.
    let eps = 1e-6;
    let sample_box = PixelBox {
        x1: bbox.x1,
        y1: bbox.y1,
        x2: (bbox.x2 - eps).max(bbox.x1),
        y2: (bbox.y2 - eps).max(bbox.y1),
    };

    let mut lons = Vec::new();
    let mut lat_lo = f64::INFINITY;
    let mut lat_hi = f64::NEG_INFINITY;
    for (x, y) in boundary_points(&sample_box) {
        let face = view_of_pixel(x, y, layout).map_err(|_| {
            ReprojectError::InvalidBox(format!(
                "box spans an unoccupied cell at ({x:.1}, {y:.1})"
            ))
        })?;
        let (ox, oy) = layout.face_origin(face);
        let f = layout.face_size() as f64;
        let u = 2.0 * (x - ox + 0.5) / f - 1.0;
        let v = 2.0 * (y - oy + 0.5) / f - 1.0;
        let sc = unit_vec_to_sphere(&face_uv_to_unit_vec(face, u, v));
        lons.push(sc.lon);
        lat_lo = lat_lo.min(sc.lat);
        lat_hi = lat_hi.max(sc.lat);
    }

    // A box enclosing a pole covers every longitude.
    for (pole_face, pole_lat) in [(Face::Top, FRAC_PI_2), (Face::Bottom, -FRAC_PI_2)] {
        let (ox, oy) = layout.face_origin(pole_face);
        let f = layout.face_size() as f64;
        let pole_px = (ox + f / 2.0 - 0.5, oy + f / 2.0 - 0.5);
        if bbox.x1 <= pole_px.0
            && pole_px.0 <= bbox.x2
            && bbox.y1 <= pole_px.1
            && pole_px.1 <= bbox.y2
        {
            if pole_lat > 0.0 {
                lat_hi = FRAC_PI_2;
            } else {
                lat_lo = -FRAC_PI_2;
            }
            return Ok(PixelBox {
                x1: 0.0,
                y1: y_of_lat(lat_hi, erp_height).max(0.0),
                x2: erp_width as f64,
                y2: y_of_lat(lat_lo, erp_height).min(erp_height as f64),
            });
        }
    }

    let (start, len) = covering_arc(&lons).ok_or(ReprojectError::DegenerateBox)?;
    Ok(arc_to_erp_box(
        start,
        len,
        y_of_lat(lat_hi, erp_height),
        y_of_lat(lat_lo, erp_height),
        erp_width,
    ))
}

// ---------------------------------------------------------------------------
// Crop
// ---------------------------------------------------------------------------

/// Extract the sub-image under the clamped box; at least 1×1.
pub fn crop(img: &RgbImage, bbox: &PixelBox) -> Result<RgbImage, ReprojectError> {
    let (w, h) = img.dimensions();
    if bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= w as f64 || bbox.y1 >= h as f64 {
        return Err(ReprojectError::InvalidBox(
            "box does not intersect the image".into(),
        ));
    }
    let clamped = bbox.clamp_to(w, h);
    let x0 = (clamped.x1.floor() as u32).min(w - 1);
    let y0 = (clamped.y1.floor() as u32).min(h - 1);
    let x1 = (clamped.x2.ceil() as u32).clamp(x0 + 1, w);
    let y1 = (clamped.y2.ceil() as u32).clamp(y0 + 1, h);
    let mut out = RgbImage::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.put_pixel(x - x0, y - y0, *img.get_pixel(x, y));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Overlays
// ---------------------------------------------------------------------------

/// Fixed overlay palette; colors are assigned to items in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaletteColor {
    Blue,
    Red,
    Green,
    Orange,
    Purple,
    Cyan,
}

impl PaletteColor {
    pub const ORDER: [PaletteColor; 6] = [
        PaletteColor::Blue,
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Orange,
        PaletteColor::Purple,
        PaletteColor::Cyan,
    ];

    pub fn from_index(index: usize) -> Self {
        Self::ORDER[index % Self::ORDER.len()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            PaletteColor::Blue => "blue",
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Orange => "orange",
            PaletteColor::Purple => "purple",
            PaletteColor::Cyan => "cyan",
        }
    }

    pub fn rgb(&self) -> Rgb<u8> {
        match self {
            PaletteColor::Blue => Rgb([0, 0, 255]),
            PaletteColor::Red => Rgb([255, 0, 0]),
            PaletteColor::Green => Rgb([0, 128, 0]),
            PaletteColor::Orange => Rgb([255, 165, 0]),
            PaletteColor::Purple => Rgb([128, 0, 128]),
            PaletteColor::Cyan => Rgb([0, 255, 255]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OverlayItem {
    pub bbox: PixelBox,
    pub color: PaletteColor,
    pub label: String,
}

/// A set of labeled boxes plus the legend describing them.
#[derive(Debug, Clone, Default)]
pub struct Overlay {
    items: Vec<OverlayItem>,
}

impl Overlay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add an item; its color is the next palette entry.
    pub fn push(&mut self, label: impl Into<String>, bbox: PixelBox) {
        let color = PaletteColor::from_index(self.items.len());
        self.items.push(OverlayItem {
            bbox,
            color,
            label: label.into(),
        });
    }

    pub fn items(&self) -> &[OverlayItem] {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Legend text: one `label:color line` entry per item, comma separated.
    pub fn legend(&self) -> String {
        self.items
            .iter()
            .map(|i| format!("{}:{} line", i.label, i.color.name()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Draw each overlay box outline at the given stroke width and append a
/// legend strip below the image. An empty overlay returns the image
/// unchanged, with no strip.
pub fn annotate(img: &RgbImage, overlay: &Overlay, stroke: u32) -> RgbImage {
    if overlay.is_empty() {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let scale = (h / 256).clamp(1, 8);
    let strip_h = font::GLYPH_HEIGHT * scale + 6 * scale;
    let mut out = RgbImage::from_pixel(w, h + strip_h, Rgb([16, 16, 16]));
    for (x, y, p) in img.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }

    for item in &overlay.items {
        let (first, second) = item.bbox.split_at_seam(w);
        draw_box_outline(&mut out, &first, h, item.color.rgb(), stroke);
        if let Some(part) = second {
            draw_box_outline(&mut out, &part, h, item.color.rgb(), stroke);
        }
    }

    // Legend strip: a swatch line in each item's color followed by its text.
    let mut cursor = 2 * scale;
    let text_y = h + 3 * scale;
    let swatch_len = 6 * scale;
    for (idx, item) in overlay.items.iter().enumerate() {
        let mid = text_y + font::GLYPH_HEIGHT * scale / 2;
        for dy in 0..scale.max(2) {
            for dx in 0..swatch_len {
                let (px, py) = (cursor + dx, mid + dy);
                if px < w && py < out.height() {
                    out.put_pixel(px, py, item.color.rgb());
                }
            }
        }
        cursor += swatch_len + 2 * scale;
        let text = format!("{}:{} line", item.label, item.color.name());
        cursor = font::draw_text(&mut out, &text, cursor, text_y, scale, Rgb([255, 255, 255]));
        if idx + 1 < overlay.items.len() {
            cursor = font::draw_text(&mut out, ", ", cursor, text_y, scale, Rgb([255, 255, 255]));
        }
        cursor += 2 * scale;
    }
    out
}

/// Paint a rectangle outline, clipped to the image region above `max_y`.
fn draw_box_outline(img: &mut RgbImage, bbox: &PixelBox, max_y: u32, color: Rgb<u8>, stroke: u32) {
    let w = img.width() as i64;
    let h = max_y as i64;
    let x1 = bbox.x1.round() as i64;
    let y1 = bbox.y1.round() as i64;
    let x2 = bbox.x2.round() as i64;
    let y2 = bbox.y2.round() as i64;
    let s = stroke.max(1) as i64;

    let mut fill = |fx1: i64, fy1: i64, fx2: i64, fy2: i64| {
        for y in fy1.max(0)..fy2.min(h) {
            for x in fx1.max(0)..fx2.min(w) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };
    fill(x1, y1, x2, y1 + s); // top
    fill(x1, y2 - s, x2, y2); // bottom
    fill(x1, y1, x1 + s, y2); // left
    fill(x2 - s, y1, x2, y2); // right
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{pair_center, rotation_matrix};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gradient_erp(w: u32, h: u32) -> ErpImage {
        ErpImage::from_fn(w, h, |x, y| {
            let lon = erp_lon_of_x(x as f64, w);
            let r = ((lon.sin() * 0.5 + 0.5) * 255.0).round() as u8;
            let g = ((y as f64 + 0.5) / h as f64 * 255.0).round() as u8;
            let b = ((lon.cos() * 0.5 + 0.5) * 255.0).round() as u8;
            Rgb([r, g, b])
        })
        .unwrap()
    }

    #[test]
    fn erp_to_cmp_dimensions_match_the_target_resolution() {
        let src = ErpImage::from_fn(7296, 3648, |_, _| Rgb([30, 60, 90])).unwrap();
        let layout = CmpLayout::new(7296 / 4).unwrap();
        let cmp = erp_to_cmp(&src, &layout);
        assert_eq!((cmp.width(), cmp.height()), (7296, 5472));
        assert_eq!(4 * layout.face_size(), src.width());
    }

    #[test]
    fn erp_to_cmp_constant_input_fills_occupied_cells_only() {
        let src = ErpImage::from_fn(256, 128, |_, _| Rgb([10, 200, 40])).unwrap();
        let layout = CmpLayout::new(64).unwrap();
        let cmp = erp_to_cmp(&src, &layout);
        for (x, y, p) in cmp.pixels().enumerate_pixels() {
            let occupied = layout
                .face_at_cell(x / layout.face_size(), y / layout.face_size())
                .is_some();
            if occupied {
                assert_eq!(p.0, [10, 200, 40], "at ({x}, {y})");
            } else {
                assert_eq!(p.0, [0, 0, 0], "blank cell at ({x}, {y})");
            }
        }
    }

    #[test]
    fn cmp_to_erp_constant_and_dimensions() {
        let layout = CmpLayout::new(64).unwrap();
        let src_erp = ErpImage::from_fn(256, 128, |_, _| Rgb([7, 77, 177])).unwrap();
        let cmp = erp_to_cmp(&src_erp, &layout);
        let erp = cmp_to_erp(&cmp, 256).unwrap();
        assert_eq!((erp.width(), erp.height()), (256, 128));
        for (_, _, p) in erp.pixels().enumerate_pixels() {
            assert_eq!(p.0, [7, 77, 177]);
        }
        assert!(cmp_to_erp(&cmp, 255).is_err());
    }

    #[test]
    fn rotate_identity_is_byte_identical() {
        let src = gradient_erp(256, 128);
        let rot = rotation_matrix(0.0, 0.0);
        let out = rotate_erp(&src, &rot.matrix);
        assert_eq!(src.pixels().as_raw(), out.pixels().as_raw());
    }

    /// Mark the pixel at c* with a small angular disc (one equatorial pixel
    /// of radius, so the mark survives resampling at any latitude) and check
    /// that its blob centroid lands at the image center after rotation.
    #[test]
    fn rotate_centers_marked_pixel() {
        let (w, h) = (512u32, 256u32);
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..20 {
            let mx = rng.random_range(0..w);
            let my = rng.random_range(0..h);
            let c = crate::geom::erp_pixel_to_sphere(mx as f64, my as f64, w, h).unwrap();
            let cdir = sphere_to_unit_vec(&c);
            let cos_r = (1.5 * TAU / w as f64).cos();
            let src = ErpImage::from_fn(w, h, |x, y| {
                let d = sphere_to_unit_vec(&SphereCoord::new(
                    erp_lon_of_x(x as f64, w),
                    erp_lat_of_y(y as f64, h),
                ));
                if d.x * cdir.x + d.y * cdir.y + d.z * cdir.z >= cos_r {
                    Rgb([255, 255, 255])
                } else {
                    Rgb([0, 0, 0])
                }
            })
            .unwrap();
            let rot = rotation_matrix(c.lon, c.lat);
            let out = rotate_erp(&src, &rot.matrix);
            let peak = out.pixels().pixels().map(|p| p.0[0]).max().unwrap();
            assert!(peak >= 100, "mark lost for ({mx}, {my})");
            let cut = peak / 2;
            let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
            for (x, y, p) in out.pixels().enumerate_pixels() {
                if p.0[0] >= cut {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
            let (bx, by) = (sx / n as f64, sy / n as f64);
            let dx = (bx - w as f64 / 2.0).abs();
            let dy = (by - h as f64 / 2.0).abs();
            assert!(
                dx <= 1.0 && dy <= 1.0,
                "marker centroid ({bx:.2}, {by:.2}) for ({mx}, {my})"
            );
        }
    }

    #[test]
    fn rotate_round_trip_recovers_the_source() {
        let (w, h) = (512u32, 256u32);
        let src = gradient_erp(w, h);
        let rot = rotation_matrix(1.1, 0.4);
        let there = rotate_erp(&src, &rot.matrix);
        let back = rotate_erp(&there, &rot.matrix.transpose());

        // PSNR away from the poles.
        let mut se = 0.0f64;
        let mut n = 0usize;
        for (x, y, p) in back.pixels().enumerate_pixels() {
            let lat = erp_lat_of_y(y as f64, h);
            if lat.abs() >= 80.0_f64.to_radians() {
                continue;
            }
            let q = src.pixels().get_pixel(x, y);
            for c in 0..3 {
                let d = p.0[c] as f64 - q.0[c] as f64;
                se += d * d;
                n += 1;
            }
        }
        let psnr = 10.0 * (255.0f64 * 255.0 * n as f64 / se).log10();
        assert!(psnr >= 40.0, "round-trip PSNR {psnr:.2} dB");
    }

    #[test]
    fn transform_box_identity_and_centering() {
        let (w, h) = (2048u32, 1024u32);
        let b = PixelBox::new(300.0, 400.0, 500.0, 560.0);
        let id = rotation_matrix(0.0, 0.0);
        let out = transform_box_erp(&b, &id.matrix, w, h).unwrap();
        assert!((out.x1 - b.x1).abs() < 1.0 && (out.x2 - b.x2).abs() < 1.0);
        assert!((out.y1 - b.y1).abs() < 1.0 && (out.y2 - b.y2).abs() < 1.0);

        // A box centered at its own pair center, rotated by that rotation,
        // lands at the image center.
        let centered = PixelBox::new(1506.0, 380.0, 1566.0, 420.0);
        let (_, rot) = pair_center(&centered, &centered, w, h).unwrap();
        let moved = transform_box_erp(&centered, &rot.matrix, w, h).unwrap();
        let (cx, cy) = moved.center();
        assert!((cx - (w as f64 / 2.0 - 0.5)).abs() <= 2.0, "cx = {cx}");
        assert!((cy - (h as f64 / 2.0 - 0.5)).abs() <= 2.0, "cy = {cy}");
    }

    /// Rasterize-and-map oracle: mark every pixel of the box, rotate the mask
    /// image, and take the bounding box of lit pixels per seam side.
    #[test]
    fn transform_box_matches_rasterized_mask_across_the_seam() {
        let (w, h) = (512u32, 256u32);
        let b = PixelBox::new(480.0, 100.0, 544.0, 140.0); // wraps: x2 > w
        let rot = rotation_matrix(PI, 0.0);
        let out = transform_box_erp(&b, &rot.matrix, w, h).unwrap();
        assert!(!out.wraps(w), "rotating by pi should unwrap the seam box");

        let mask = ErpImage::from_fn(w, h, |x, y| {
            if box_contains_erp_point(&b, x as f64, y as f64, w) {
                Rgb([255, 255, 255])
            } else {
                Rgb([0, 0, 0])
            }
        })
        .unwrap();
        let rotated = rotate_erp(&mask, &rot.matrix);
        let mut lit = Vec::new();
        for (x, y, p) in rotated.pixels().enumerate_pixels() {
            if p.0[0] > 128 {
                lit.push((x as f64, y as f64));
            }
        }
        let min_x = lit.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = lit.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = lit.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = lit.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        assert!((out.x1 - min_x).abs() <= 3.0, "x1 {} vs mask {min_x}", out.x1);
        assert!((out.x2 - max_x).abs() <= 3.0, "x2 {} vs mask {max_x}", out.x2);
        assert!((out.y1 - min_y).abs() <= 3.0, "y1 {} vs mask {min_y}", out.y1);
        assert!((out.y2 - max_y).abs() <= 3.0, "y2 {} vs mask {max_y}", out.y2);
    }

    #[test]
    fn transform_box_rejects_pole_coverage() {
        let (w, h) = (512u32, 256u32);
        // Rotate the equator onto the pole: a box centered at lon 0 on the
        // equator ends up enclosing the pole after a 90° latitude rotation.
        let b = PixelBox::new(200.0, 100.0, 312.0, 156.0);
        let rot = rotation_matrix(0.0, FRAC_PI_2);
        assert!(matches!(
            transform_box_erp(&b, &rot.matrix, w, h),
            Err(ReprojectError::DegenerateBox)
        ));
    }

    #[test]
    fn cmp_box_front_face_covers_the_forward_quarter() {
        let layout = CmpLayout::new(128).unwrap();
        let (ew, eh) = (512u32, 256u32);
        let front = layout.face_cell(Face::Front);
        let out = cmp_box_to_erp_box(&front, &layout, ew, eh).unwrap();
        // lon in [-45°, 45°] around image center.
        let x_lo = (-PI / 4.0 + PI) / TAU * ew as f64 - 0.5;
        let x_hi = (PI / 4.0 + PI) / TAU * ew as f64 - 0.5;
        assert!((out.x1 - x_lo).abs() <= 3.0, "x1 = {}", out.x1);
        assert!((out.x2 - x_hi).abs() <= 3.0, "x2 = {}", out.x2);

        // Single point at the Front center lands on the image center.
        let c = front.center();
        let point = PixelBox::new(c.0, c.1, c.0, c.1);
        let out = cmp_box_to_erp_box(&point, &layout, ew, eh).unwrap();
        let (ocx, ocy) = out.center();
        assert!((ocx - (ew as f64 / 2.0 - 0.5)).abs() <= 1.0);
        assert!((ocy - (eh as f64 / 2.0 - 0.5)).abs() <= 1.0);
    }

    #[test]
    fn cmp_box_top_face_spans_full_width_near_the_top() {
        let layout = CmpLayout::new(128).unwrap();
        let (ew, eh) = (512u32, 256u32);
        let top = layout.face_cell(Face::Top);
        let out = cmp_box_to_erp_box(&top, &layout, ew, eh).unwrap();
        assert_eq!(out.x1, 0.0);
        assert_eq!(out.x2, ew as f64);
        assert_eq!(out.y1, 0.0, "reaches the pole row");
        // Bottom edge of the band sits at the lowest latitude of the Top
        // face, which is atan(1/sqrt(2)) at the corners.
        let corner_lat = (1.0f64 / 2.0f64.sqrt()).atan();
        let want_y2 = y_of_lat(corner_lat, eh);
        assert!((out.y2 - want_y2).abs() <= 3.0, "y2 = {}", out.y2);
    }

    #[test]
    fn cmp_box_rejects_blank_cells() {
        let layout = CmpLayout::new(128).unwrap();
        let blank = PixelBox::new(10.0, 10.0, 100.0, 100.0); // top-left cell
        assert!(matches!(
            cmp_box_to_erp_box(&blank, &layout, 512, 256),
            Err(ReprojectError::InvalidBox(_))
        ));
        let outside = PixelBox::new(-5.0, 0.0, 50.0, 50.0);
        assert!(cmp_box_to_erp_box(&outside, &layout, 512, 256).is_err());
    }

    #[test]
    fn crop_cases() {
        let img = RgbImage::from_pixel(40, 30, Rgb([9, 9, 9]));
        let full = crop(&img, &PixelBox::new(0.0, 0.0, 40.0, 30.0)).unwrap();
        assert_eq!(full.dimensions(), (40, 30));
        assert_eq!(full.as_raw(), img.as_raw());

        let ten = crop(&img, &PixelBox::new(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert_eq!(ten.dimensions(), (10, 10));
        assert!(ten.pixels().all(|p| p.0 == [9, 9, 9]));

        let clamped = crop(&img, &PixelBox::new(35.0, 0.0, 60.0, 10.0)).unwrap();
        assert_eq!(clamped.dimensions(), (5, 10));

        assert!(crop(&img, &PixelBox::new(40.0, 0.0, 50.0, 10.0)).is_err());
    }

    #[test]
    fn annotate_empty_overlay_is_identity() {
        let img = RgbImage::from_pixel(64, 32, Rgb([1, 2, 3]));
        let out = annotate(&img, &Overlay::new(), 2);
        assert_eq!(out.dimensions(), (64, 32));
        assert_eq!(out.as_raw(), img.as_raw());
    }

    #[test]
    fn annotate_draws_palette_colors_and_legend() {
        let img = RgbImage::from_pixel(200, 100, Rgb([50, 50, 50]));
        let mut overlay = Overlay::new();
        overlay.push("entityA", PixelBox::new(10.0, 10.0, 60.0, 40.0));
        overlay.push("entityB", PixelBox::new(80.0, 20.0, 150.0, 70.0));
        assert_eq!(overlay.legend(), "entityA:blue line, entityB:red line");

        let out = annotate(&img, &overlay, 2);
        assert!(out.height() > 100, "legend strip appended");
        assert_eq!(out.get_pixel(11, 10).0, [0, 0, 255], "first box is blue");
        assert_eq!(out.get_pixel(81, 20).0, [255, 0, 0], "second box is red");
        // Interior pixels untouched.
        assert_eq!(out.get_pixel(30, 25).0, [50, 50, 50]);
    }

    #[test]
    fn erp_image_validates_aspect() {
        assert!(ErpImage::new(RgbImage::new(100, 100)).is_err());
        assert!(ErpImage::new(RgbImage::new(200, 100)).is_ok());
    }

    #[test]
    fn cmp_image_zero_fills_blank_cells() {
        let layout = CmpLayout::new(16).unwrap();
        let noisy = RgbImage::from_pixel(64, 48, Rgb([200, 100, 50]));
        let cmp = CmpImage::new(layout, noisy).unwrap();
        assert_eq!(cmp.pixels().get_pixel(0, 0).0, [0, 0, 0], "blank cell");
        assert_eq!(cmp.pixels().get_pixel(0, 20).0, [200, 100, 50], "Back cell");
    }

    #[test]
    fn png_and_jpeg_io_round_trip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let src = gradient_erp(256, 128);

        let png = dir.path().join("pano.png");
        src.save(&png).unwrap();
        let loaded = ErpImage::load(&png).unwrap();
        assert_eq!(loaded.pixels().as_raw(), src.pixels().as_raw());

        let jpg = dir.path().join("pano.jpg");
        src.save(&jpg).unwrap();
        let loaded = ErpImage::load(&jpg).unwrap();
        assert_eq!((loaded.width(), loaded.height()), (256, 128));
    }

    /// Resampling runs on a thread pool; outputs must not depend on it.
    #[test]
    fn resampling_is_byte_deterministic_across_runs() {
        let src = gradient_erp(512, 256);
        let layout = CmpLayout::new(128).unwrap();
        let rot = rotation_matrix(0.7, -0.3);

        let cmp_a = erp_to_cmp(&src, &layout);
        let cmp_b = erp_to_cmp(&src, &layout);
        assert_eq!(cmp_a.pixels().as_raw(), cmp_b.pixels().as_raw());

        let erp_a = cmp_to_erp(&cmp_a, 512).unwrap();
        let erp_b = cmp_to_erp(&cmp_a, 512).unwrap();
        assert_eq!(erp_a.pixels().as_raw(), erp_b.pixels().as_raw());

        let rot_a = rotate_erp(&src, &rot.matrix);
        let rot_b = rotate_erp(&src, &rot.matrix);
        assert_eq!(rot_a.pixels().as_raw(), rot_b.pixels().as_raw());
    }
}
