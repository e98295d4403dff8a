//! Top-down raster images of a scene with one candidate trajectory, and the
//! indexed 4 x 3 composite handed to the annotator.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rollout::RolloutSet;
use crate::scene::{LaneKind, LightState, Point, Scene, Trajectory, EGO_LENGTH, EGO_WIDTH};

pub type Rgb = [u8; 3];

const BACKGROUND: Rgb = [24, 24, 24];
const LANE: Rgb = [128, 128, 128];
const BOUNDARY: Rgb = [88, 88, 88];
const CROSSWALK: Rgb = [255, 255, 255];
const AGENT: Rgb = [50, 100, 255];
const EGO: Rgb = [40, 200, 70];
const CANDIDATE: Rgb = [230, 30, 30];
const LABEL: Rgb = [255, 255, 255];
const LABEL_BG: Rgb = [0, 0, 0];
const SEPARATOR: Rgb = [255, 255, 255];

pub const GRID_COLS: usize = 4;
pub const GRID_ROWS: usize = 3;
pub const SEPARATOR_PX: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    Config(String),
    #[error("composite needs {expected} candidates, got {found}")]
    CandidateCount { expected: usize, found: usize },
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub meters_per_pixel: f64,
    pub width: usize,
    pub height: usize,
    /// Ego anchor as fractions of width and height from the top-left.
    pub anchor: (f64, f64),
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            meters_per_pixel: 0.25,
            width: 256,
            height: 256,
            anchor: (0.5, 0.75),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.meters_per_pixel.is_finite() && self.meters_per_pixel > 0.0) {
            return Err(RenderError::Config("meters_per_pixel must be positive".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(RenderError::Config("canvas must be at least 16 x 16".into()));
        }
        Ok(())
    }

    /// Pixel coordinates (column, row) of an ego-frame point; `+x` is up and
    /// `+y` is left.
    pub fn to_pixel(&self, p: Point) -> (f64, f64) {
        let ax = self.anchor.0 * self.width as f64;
        let ay = self.anchor.1 * self.height as f64;
        (ax - p.y / self.meters_per_pixel, ay - p.x / self.meters_per_pixel)
    }
}

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: fill.repeat(width * height),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    pub fn sub_image(&self, x0: usize, y0: usize, w: usize, h: usize) -> RasterImage {
        let mut pixels = Vec::with_capacity(3 * w * h);
        for y in y0..y0 + h {
            let s = 3 * (y * self.width + x0);
            pixels.extend_from_slice(&self.pixels[s..s + 3 * w]);
        }
        RasterImage {
            width: w,
            height: h,
            pixels,
        }
    }

    fn blit(&mut self, src: &RasterImage, x0: usize, y0: usize) {
        for y in 0..src.height {
            let d = 3 * ((y0 + y) * self.width + x0);
            let s = 3 * y * src.width;
            self.pixels[d..d + 3 * src.width].copy_from_slice(&src.pixels[s..s + 3 * src.width]);
        }
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RenderError> {
        let bad = |m: &str| RenderError::Ppm(m.to_string());
        // header: magic, width, height, maxval separated by whitespace
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let pixels = bytes.get(i + 1..).ok_or_else(|| bad("missing pixel data"))?.to_vec();
        if pixels.len() != 3 * width * height {
            return Err(bad("pixel data does not match dimensions"));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Clips the segment to `[lo, hi]` on both axes (Liang-Barsky).
fn clip(a: (f64, f64), b: (f64, f64), lo: f64, hi_x: f64, hi_y: f64) -> Option<((f64, f64), (f64, f64))> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [(-dx, a.0 - lo), (dx, hi_x - a.0), (-dy, a.1 - lo), (dy, hi_y - a.1)] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then(|| ((a.0 + t0 * dx, a.1 + t0 * dy), (a.0 + t1 * dx, a.1 + t1 * dy)))
}

fn draw_line(img: &mut RasterImage, a: (f64, f64), b: (f64, f64), c: Rgb) {
    if !(a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite()) {
        return;
    }
    let Some((a, b)) = clip(a, b, -1.0, img.width as f64, img.height as f64) else {
        return;
    };
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.put(x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_dot(img: &mut RasterImage, p: (f64, f64), radius: i64, c: Rgb) {
    if !(p.0.is_finite() && p.1.is_finite()) {
        return;
    }
    let lim = (img.width.max(img.height) + 16) as f64;
    if p.0.abs() > lim || p.1.abs() > lim {
        return;
    }
    let (cx, cy) = (p.0.round() as i64, p.1.round() as i64);
    for y in -radius..=radius {
        for x in -radius..=radius {
            if x * x + y * y <= radius * radius + radius {
                img.put(cx + x, cy + y, c);
            }
        }
    }
}

/// Filled convex polygon (pixel-center sampling).
fn fill_convex(img: &mut RasterImage, poly: &[(f64, f64)], c: Rgb) {
    if poly.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return;
    }
    let min_x = poly.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let max_x = poly.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(img.width as f64 - 1.0);
    let min_y = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0);
    let max_y = poly.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(img.height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    for y in min_y as i64..=max_y as i64 {
        for x in min_x as i64..=max_x as i64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut sign = 0.0;
            let inside = (0..poly.len()).all(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                let cross = (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                if cross == 0.0 {
                    return true;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                }
                cross.signum() == sign
            });
            if inside {
                img.put(x, y, c);
            }
        }
    }
}

fn oriented_box(cfg: &RenderConfig, center: Point, heading: f64, length: f64, width: f64) -> Vec<(f64, f64)> {
    let (s, c) = heading.sin_cos();
    let (hl, hw) = (length / 2.0, width / 2.0);
    [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
        .iter()
        .map(|&(l, w)| cfg.to_pixel(Point::new(center.x + l * c - w * s, center.y + l * s + w * c)))
        .collect()
}

/// 5 x 7 digit glyphs, one byte per row, low 5 bits used (MSB on the left).
const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

pub const LABEL_ORIGIN: (usize, usize) = (4, 4);
pub const LABEL_SCALE: usize = 2;
const GLYPH_ADVANCE: usize = 6;

pub fn glyph(digit: u8) -> &'static [u8; 7] {
    &DIGITS[digit as usize]
}

fn draw_label(img: &mut RasterImage, n: usize) {
    let text = n.to_string();
    let s = LABEL_SCALE as i64;
    let (ox, oy) = (LABEL_ORIGIN.0 as i64, LABEL_ORIGIN.1 as i64);
    let w = (text.len() * GLYPH_ADVANCE) as i64 * s;
    img.fill_rect(ox - s, oy - s, w + s, 9 * s, LABEL_BG);
    for (i, ch) in text.bytes().enumerate() {
        let g = glyph(ch - b'0');
        let gx = ox + (i * GLYPH_ADVANCE) as i64 * s;
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    img.fill_rect(gx + col * s, oy + row as i64 * s, s, s, LABEL);
                }
            }
        }
    }
}

/// Renders the scene with one candidate trajectory and its index label.
pub fn render_bev(scene: &Scene, candidate: &Trajectory, index_label: usize, cfg: &RenderConfig) -> RasterImage {
    let mut img = RasterImage::new(cfg.width, cfg.height, BACKGROUND);
    for lane in &scene.roadgraph {
        let color = match lane.kind {
            LaneKind::Lane => LANE,
            LaneKind::Boundary => BOUNDARY,
            LaneKind::Crosswalk => CROSSWALK,
        };
        for w in lane.points.windows(2) {
            draw_line(&mut img, cfg.to_pixel(w[0]), cfg.to_pixel(w[1]), color);
        }
    }
    for a in &scene.agents {
        let poly = oriented_box(cfg, a.last_position(), a.heading(), a.extent.length, a.extent.width);
        fill_convex(&mut img, &poly, AGENT);
    }
    for l in &scene.traffic_lights {
        let c = match l.state {
            LightState::Red => [255, 0, 0],
            LightState::Yellow => [255, 220, 0],
            LightState::Green => [0, 255, 0],
        };
        draw_dot(&mut img, cfg.to_pixel(l.position), 3, c);
    }
    let ego = oriented_box(cfg, Point::ORIGIN, 0.0, EGO_LENGTH, EGO_WIDTH);
    fill_convex(&mut img, &ego, EGO);

    let mut prev = cfg.to_pixel(Point::ORIGIN);
    for p in &candidate.points {
        let q = cfg.to_pixel(*p);
        draw_line(&mut img, prev, q, CANDIDATE);
        prev = q;
    }
    for p in &candidate.points {
        draw_dot(&mut img, cfg.to_pixel(*p), 1, CANDIDATE);
    }
    draw_label(&mut img, index_label);
    img
}

/// Tiles the candidate renders row-major into a 4 x 3 grid.
pub fn render_composite(scene: &Scene, rs: &RolloutSet, cfg: &RenderConfig) -> Result<RasterImage, RenderError> {
    cfg.validate()?;
    let n = GRID_COLS * GRID_ROWS;
    if rs.candidates.len() != n {
        return Err(RenderError::CandidateCount {
            expected: n,
            found: rs.candidates.len(),
        });
    }
    let w = GRID_COLS * cfg.width + (GRID_COLS - 1) * SEPARATOR_PX;
    let h = GRID_ROWS * cfg.height + (GRID_ROWS - 1) * SEPARATOR_PX;
    let mut img = RasterImage::new(w, h, SEPARATOR);
    for (i, c) in rs.candidates.iter().enumerate() {
        let tile = render_bev(scene, &c.trajectory, i, cfg);
        let (x, y) = tile_origin(i, cfg);
        img.blit(&tile, x, y);
    }
    Ok(img)
}

/// Top-left pixel of tile `i` in the composite.
pub fn tile_origin(i: usize, cfg: &RenderConfig) -> (usize, usize) {
    let (r, c) = (i / GRID_COLS, i % GRID_COLS);
    (c * (cfg.width + SEPARATOR_PX), r * (cfg.height + SEPARATOR_PX))
}
