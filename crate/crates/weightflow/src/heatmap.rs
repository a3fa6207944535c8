//! Binary PPM (P6) renderings of grid fields.
//!
//! Values map linearly from the field minimum to its maximum onto a
//! 256-entry ramp interpolated between five anchor colours of the viridis
//! palette: #440154, #3b528b, #21918c, #5ec962, #fde725. Column `i` runs
//! left to right, row `j` bottom to top.

use weightflow_core::Grid2D;

const ANCHORS: [[u8; 3]; 5] = [[0x44, 0x01, 0x54], [0x3b, 0x52, 0x8b], [0x21, 0x91, 0x8c], [0x5e, 0xc9, 0x62], [0xfd, 0xe7, 0x25]];

/// Pixels per grid cell.
pub const CELL_PIXELS: usize = 4;
const GAP: usize = 4;

pub fn ramp() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for (k, c) in out.iter_mut().enumerate() {
        let t = k as f64 / 255.0 * 4.0;
        let a = (t.floor() as usize).min(3);
        let f = t - a as f64;
        for ch in 0..3 {
            let v = f64::from(ANCHORS[a][ch]) * (1.0 - f) + f64::from(ANCHORS[a + 1][ch]) * f;
            c[ch] = v.round() as u8;
        }
    }
    out
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![255; 3 * w * h] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let k = 3 * (y as usize * self.w + x as usize);
            self.px[k..k + 3].copy_from_slice(&c);
        }
    }

    fn field(&mut self, grid: &Grid2D, values: &[f64], x0: usize) {
        let lut = ramp();
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                let k = (((values[grid.index(i, j)] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as usize;
                let top = (grid.ny() - 1 - j) * CELL_PIXELS;
                for dy in 0..CELL_PIXELS {
                    for dx in 0..CELL_PIXELS {
                        self.set((x0 + i * CELL_PIXELS + dx) as i64, (top + dy) as i64, lut[k]);
                    }
                }
            }
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = a;
        let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
        let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x, y, c);
            if (x, y) == b {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.px);
        out
    }
}

/// One field as a PPM image.
pub fn render(grid: &Grid2D, values: &[f64]) -> Vec<u8> {
    let mut c = Canvas::new(grid.nx() * CELL_PIXELS, grid.ny() * CELL_PIXELS);
    c.field(grid, values, 0);
    c.encode()
}

/// Two fields on the same grid next to each other, each scaled on its own.
pub fn render_pair(grid: &Grid2D, left: &[f64], right: &[f64]) -> Vec<u8> {
    let w = grid.nx() * CELL_PIXELS;
    let mut c = Canvas::new(2 * w + GAP, grid.ny() * CELL_PIXELS);
    c.field(grid, left, 0);
    c.field(grid, right, w + GAP);
    c.encode()
}

/// A field with white direction strokes of `vectors` every `stride` cells;
/// each stroke starts at a cell centre and ends in a small square head.
pub fn render_with_arrows(grid: &Grid2D, values: &[f64], vectors: &[[f64; 2]], stride: usize) -> Vec<u8> {
    let mut c = Canvas::new(grid.nx() * CELL_PIXELS, grid.ny() * CELL_PIXELS);
    c.field(grid, values, 0);
    let stride = stride.max(1);
    let len = (stride * CELL_PIXELS) as f64 * 0.8;
    let white = [255, 255, 255];
    for i in (stride / 2..grid.nx()).step_by(stride) {
        for j in (stride / 2..grid.ny()).step_by(stride) {
            let v = vectors[grid.index(i, j)];
            // Scale by cell size so arrows follow the physical direction.
            let (vx, vy) = (v[0] / grid.dx(), v[1] / grid.dy());
            let n = vx.hypot(vy);
            if !(n > 0.0) || !n.is_finite() {
                continue;
            }
            let x0 = (i * CELL_PIXELS + CELL_PIXELS / 2) as i64;
            let y0 = ((grid.ny() - 1 - j) * CELL_PIXELS + CELL_PIXELS / 2) as i64;
            let x1 = x0 + (vx / n * len).round() as i64;
            let y1 = y0 - (vy / n * len).round() as i64;
            c.line((x0, y0), (x1, y1), white);
            for d in -1..=1 {
                for e in -1..=1 {
                    c.set(x1 + d, y1 + e, white);
                }
            }
        }
    }
    c.encode()
}
