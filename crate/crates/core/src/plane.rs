//! Row-major single-channel 2-D arrays and the resampling helpers used by
//! preprocessing.

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Plane<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Plane({}×{})", self.width, self.height)
    }
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}×{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

impl Plane<f32> {
    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Plane<f32> {
        if self.dims() == (width, height) {
            return self.clone();
        }
        let xs = axis_table(self.width, width);
        let ys = axis_table(self.height, height);
        let mut out = Vec::with_capacity(width * height);
        for &(y0, y1, ty) in &ys {
            let (r0, r1) = (&self.data[y0 * self.width..], &self.data[y1 * self.width..]);
            for &(x0, x1, tx) in &xs {
                let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * tx;
                out.push(top + (bottom - top) * ty);
            }
        }
        Plane {
            width,
            height,
            data: out,
        }
    }

    /// Rescale to `[0, 1]`. Returns `false` (and zeroes the plane) when the
    /// input is constant.
    pub fn normalize_min_max(&mut self) -> bool {
        let lo = self.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if !(hi > lo) {
            self.data.fill(0.0);
            return false;
        }
        let scale = 1.0 / (hi - lo);
        self.data
            .iter_mut()
            .for_each(|v| *v = ((*v - lo) * scale).clamp(0.0, 1.0));
        true
    }

    /// Round to the nearest multiple of 1/255, the precision of the on-disk
    /// 8-bit layout.
    pub fn quantize_u8(&mut self) {
        self.data
            .iter_mut()
            .for_each(|v| *v = f32::from(to_u8(*v)) / 255.0);
    }

    /// Separable Gaussian blur with mirrored borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Plane<f32> {
        let p = self;
        if sigma <= 0.0 {
            return p.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (w, h) = p.dims();
        let mirror = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
            }
            i as usize
        };
        let pass = |src: &Plane<f32>, horizontal: bool| {
            Plane::from_fn(w, h, |x, y| {
                let mut acc = 0.0f64;
                for (t, k) in kernel.iter().enumerate() {
                    let o = t as isize - r;
                    let v = if horizontal {
                        src.get(mirror(x as isize + o, w), y)
                    } else {
                        src.get(x, mirror(y as isize + o, h))
                    };
                    acc += k * f64::from(v);
                }
                acc as f32
            })
        };
        pass(&pass(p, true), false)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl<T: Copy> Plane<T> {
    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Plane<T> {
        if self.dims() == (width, height) {
            return self.clone();
        }
        let src = |dst: usize, from: usize, to: usize| {
            (((dst as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1)
        };
        Plane::from_fn(width, height, |x, y| {
            self.get(src(x, self.width, width), src(y, self.height, height))
        })
    }
}

impl Plane<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_f32(&self) -> Plane<f32> {
        self.map(|b| if b { 1.0 } else { 0.0 })
    }
}

fn axis_table(from: usize, to: usize) -> Vec<(usize, usize, f32)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}
