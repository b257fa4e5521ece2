//! Binary foreground masks: rasterization, PGM I/O and exact Euclidean distance transform.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::camera::Pixel;
use crate::error::{Error, Result};

/// Row-major binary image; `true` is foreground. Pixel `(x, y)` covers
/// `[x, x + 1) x [y, y + 1)` and has its center at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Pixel index containing a sub-pixel position, if inside the image.
    pub fn cell_of(&self, p: &Pixel<f64>) -> Option<(usize, usize)> {
        if !(p.u >= 0.0 && p.v >= 0.0) {
            return None;
        }
        let (x, y) = (p.u.floor() as usize, p.v.floor() as usize);
        (x < self.width && y < self.height).then_some((x, y))
    }

    pub fn union(&mut self, other: &Mask) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a |= *b);
    }

    /// Marks every pixel whose center lies within `stroke_width / 2` of segment `a`-`b`.
    pub fn draw_segment(&mut self, a: &Pixel<f64>, b: &Pixel<f64>, stroke_width: f64) {
        let r = stroke_width / 2.0;
        let (w, h) = (self.width as f64, self.height as f64);
        let x0 = (a.u.min(b.u) - r - 1.0).floor().clamp(0.0, w);
        let x1 = (a.u.max(b.u) + r + 1.0).ceil().clamp(0.0, w);
        let y0 = (a.v.min(b.v) - r - 1.0).floor().clamp(0.0, h);
        let y1 = (a.v.max(b.v) + r + 1.0).ceil().clamp(0.0, h);
        for y in y0 as usize..y1 as usize {
            for x in x0 as usize..x1 as usize {
                let c = Pixel::new(x as f64 + 0.5, y as f64 + 0.5);
                if point_segment_distance(&c, a, b) <= r {
                    self.set(x, y, true);
                }
            }
        }
    }

    /// Exact Euclidean distance (in pixels) from every pixel to the nearest
    /// foreground pixel. All entries are infinite when the mask is empty.
    pub fn distance_transform(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut grid: Vec<f64> = self.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
        let n = w.max(h);
        let mut f = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        for x in 0..w {
            for y in 0..h {
                f[y] = grid[y * w + x];
            }
            edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
            for y in 0..h {
                grid[y * w + x] = d[y];
            }
        }
        for y in 0..h {
            f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
            edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
            grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
        }
        grid.into_iter().map(f64::sqrt).collect()
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a binary (P5) PGM; any nonzero sample is foreground.
    pub fn read_pgm<R: BufRead>(mut r: R, path: &Path) -> Result<Mask> {
        let malformed = |msg: &str| Error::Malformed {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(malformed("truncated PGM header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P5" {
            return Err(malformed("expected binary PGM (P5)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed("bad PGM header number"));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(malformed("only 8-bit PGM is supported"));
        }
        let mut bytes = vec![0u8; width * height];
        r.read_exact(&mut bytes).map_err(|_| malformed("truncated PGM data"))?;
        Ok(Mask {
            width,
            height,
            data: bytes.into_iter().map(|b| b != 0).collect(),
        })
    }
}

/// One-dimensional squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            // z[0] is -inf, so this never pops the first parabola.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

pub fn point_segment_distance(p: &Pixel<f64>, a: &Pixel<f64>, b: &Pixel<f64>) -> f64 {
    let (dx, dy) = (b.u - a.u, b.v - a.v);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.u - a.u) * dx + (p.v - a.v) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.u - (a.u + t * dx)).hypot(p.v - (a.v + t * dy))
}
