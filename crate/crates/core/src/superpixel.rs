//! Grayscale SLIC over-segmentation and region-mean rendering.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    /// Target region count.
    pub k: usize,
    /// Spatial weight `m` against the 0..255 intensity distance.
    pub compactness: f64,
    pub iterations: usize,
    /// Gaussian pre-smoothing applied before clustering only; speckle
    /// otherwise shatters regions into fragments.
    pub sigma: f64,
    /// Components below this size are merged away; `None` means `(N/k)/4`.
    pub min_size: Option<usize>,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            k: 2000,
            compactness: 10.0,
            iterations: 10,
            sigma: 1.0,
            min_size: None,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("superpixel count k must be ≥ 1".into()));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::Config(format!(
                "compactness must be > 0, got {}",
                self.compactness
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing sigma must be ≥ 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Region ids per pixel, contiguous in `0..region_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub region_count: usize,
}

impl LabelMap {
    pub fn from_raw(width: usize, height: usize, labels: Vec<u32>) -> Result<LabelMap> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}×{height} label map needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        let (labels, region_count) = relabel_raster(&labels);
        Ok(LabelMap {
            width,
            height,
            labels,
            region_count,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.region_count];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }
}

#[derive(Clone, Copy)]
struct Center {
    intensity: f64,
    x: f64,
    y: f64,
}

/// SLIC on the (optionally pre-smoothed) image, with seeds on a regular grid nudged to the lowest-gradient cell of
/// their 3×3 neighbourhood, `iterations` rounds of windowed k-means, then
/// [`enforce_connectivity`].
pub fn slic_segment(image: &Plane<f32>, params: &SlicParams) -> Result<LabelMap> {
    params.validate()?;
    let (w, h) = image.dims();
    let n = w * h;
    if params.k > n {
        return Err(Error::Config(format!(
            "superpixel count {} exceeds the {n} pixels of the image",
            params.k
        )));
    }
    let smoothed = image.gaussian_blur(params.sigma);
    let image = &smoothed;
    let step = (n as f64 / params.k as f64).sqrt();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);
    let value = |x: usize, y: usize| f64::from(image.get(x, y)) * 255.0;

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let (bx, by) = lowest_gradient(image, cx, cy);
            centers.push(Center {
                intensity: value(bx, by),
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let spatial = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let (x0, x1) = window(c.x, radius, w);
            let (y0, y1) = window(c.y, radius, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dc = value(x, y) - c.intensity;
                    let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
                    let d = dc * dc + (dx * dx + dy * dy) * spatial;
                    let idx = y * w + x;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                if l != u32::MAX {
                    let a = &mut acc[l as usize];
                    a.0 += value(x, y);
                    a.1 += x as f64;
                    a.2 += y as f64;
                    a.3 += 1;
                }
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let m = a.3 as f64;
                *c = Center {
                    intensity: a.0 / m,
                    x: a.1 / m,
                    y: a.2 / m,
                };
            }
        }
    }

    let min_size = params.min_size.unwrap_or((n / params.k) / 4).max(1);
    let raw = LabelMap {
        width: w,
        height: h,
        labels,
        region_count: centers.len() + 1,
    };
    Ok(enforce_connectivity(&raw, min_size))
}

fn window(c: f64, radius: isize, len: usize) -> (usize, usize) {
    let c = c.round() as isize;
    let lo = (c - radius).max(0) as usize;
    let hi = ((c + radius + 1).max(0) as usize).min(len);
    (lo, hi)
}

fn lowest_gradient(image: &Plane<f32>, cx: usize, cy: usize) -> (usize, usize) {
    let (w, h) = image.dims();
    let grad = |x: usize, y: usize| {
        let g = |a: usize, b: usize| f64::from(image.get(a, b));
        let gx = g((x + 1).min(w - 1), y) - g(x.saturating_sub(1), y);
        let gy = g(x, (y + 1).min(h - 1)) - g(x, y.saturating_sub(1));
        gx * gx + gy * gy
    };
    let mut best = (cx, cy);
    let mut best_g = grad(cx, cy);
    for y in cy.saturating_sub(1)..(cy + 2).min(h) {
        for x in cx.saturating_sub(1)..(cx + 2).min(w) {
            let g = grad(x, y);
            if g < best_g {
                best_g = g;
                best = (x, y);
            }
        }
    }
    best
}

/// 4-connected components of equal labels; returns per-pixel component id
/// and component sizes.
fn components(labels: &[u32], w: usize, h: usize) -> (Vec<u32>, Vec<usize>) {
    let mut comp = vec![u32::MAX; labels.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let target = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && labels[q] == target {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn relabel_raster(labels: &[u32]) -> (Vec<u32>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len() as u32;
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        parent[a as usize] = parent[parent[a as usize] as usize];
        a = parent[a as usize];
    }
    a
}

/// Split labels into 4-connected components, merge every component smaller
/// than `min_size` into the neighbour it shares the longest border with, and
/// relabel in raster order of first appearance.
pub fn enforce_connectivity(labels: &LabelMap, min_size: usize) -> LabelMap {
    let (w, h) = (labels.width, labels.height);
    let mut current = labels.labels.clone();
    loop {
        let (comp, sizes) = components(&current, w, h);
        current = comp;
        let mut small: Vec<u32> = (0..sizes.len() as u32)
            .filter(|&c| sizes[c as usize] < min_size)
            .collect();
        if small.is_empty() || sizes.len() == 1 {
            break;
        }
        let is_small: Vec<bool> = sizes.iter().map(|&s| s < min_size).collect();
        let mut borders: HashMap<u32, HashMap<u32, usize>> = HashMap::new();
        let touch = |a: u32, b: usize, borders: &mut HashMap<u32, HashMap<u32, usize>>| {
            let b = current[b];
            if a != b && is_small[a as usize] {
                *borders.entry(a).or_default().entry(b).or_default() += 1;
            }
        };
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let a = current[p];
                if x + 1 < w {
                    touch(a, p + 1, &mut borders);
                    touch(current[p + 1], p, &mut borders);
                }
                if y + 1 < h {
                    touch(a, p + w, &mut borders);
                    touch(current[p + w], p, &mut borders);
                }
            }
        }
        small.sort_by_key(|&c| (sizes[c as usize], c));
        let mut parent: Vec<u32> = (0..sizes.len() as u32).collect();
        let mut merged = false;
        for c in small {
            let Some(nb) = borders.get(&c) else { continue };
            let root = find(&mut parent, c);
            let best = nb
                .iter()
                .map(|(&b, &len)| (len, std::cmp::Reverse(b)))
                .max()
                .map(|(_, std::cmp::Reverse(b))| b);
            if let Some(b) = best {
                let target = find(&mut parent, b);
                if target != root {
                    parent[root as usize] = target;
                    merged = true;
                }
            }
        }
        if !merged {
            break;
        }
        for l in current.iter_mut() {
            *l = find(&mut parent, *l);
        }
    }
    let (labels_out, region_count) = relabel_raster(&current);
    LabelMap {
        width: w,
        height: h,
        labels: labels_out,
        region_count,
    }
}

/// Replace every pixel with the mean intensity of its region.
pub fn render_superpixel_image(image: &Plane<f32>, labels: &LabelMap) -> Result<Plane<f32>> {
    if image.dims() != (labels.width, labels.height) {
        return Err(Error::Shape(format!(
            "image is {}×{}, label map {}×{}",
            image.width(),
            image.height(),
            labels.width,
            labels.height
        )));
    }
    let mut sums = vec![(0.0f64, 0usize); labels.region_count];
    for (&v, &l) in image.data().iter().zip(&labels.labels) {
        let s = &mut sums[l as usize];
        s.0 += f64::from(v);
        s.1 += 1;
    }
    let means: Vec<f32> = sums
        .iter()
        .map(|&(s, c)| (s / c.max(1) as f64) as f32)
        .collect();
    Plane::from_vec(
        labels.width,
        labels.height,
        labels.labels.iter().map(|&l| means[l as usize]).collect(),
    )
}

/// Segment and render in one call.
pub fn superpixel_channel(image: &Plane<f32>, params: &SlicParams) -> Result<Plane<f32>> {
    let labels = slic_segment(image, params)?;
    render_superpixel_image(image, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_regular_grid() {
        let img = Plane::filled(256, 256, 0.4f32);
        let lm = slic_segment(
            &img,
            &SlicParams {
                k: 256,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(lm.region_count, 256);
        let target = 256.0;
        for a in lm.areas() {
            assert!((a as f64 - target).abs() <= 0.3 * target, "area {a}");
        }
    }

    #[test]
    fn single_region() {
        let img = Plane::from_fn(20, 10, |x, y| ((x * y) % 7) as f32 / 7.0);
        let lm = slic_segment(
            &img,
            &SlicParams {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(lm.region_count, 1);
        let r = render_superpixel_image(&img, &lm).unwrap();
        let mean = img.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 200.0;
        assert!(r.data().iter().all(|&v| (f64::from(v) - mean).abs() < 1e-6));
    }

    #[test]
    fn too_many_regions_is_an_error() {
        let img = Plane::filled(4, 4, 0.0f32);
        assert!(slic_segment(
            &img,
            &SlicParams {
                k: 17,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn stray_pixel_is_absorbed() {
        let mut raw = vec![1u32; 25];
        raw[12] = 7;
        let lm = LabelMap {
            width: 5,
            height: 5,
            labels: raw,
            region_count: 8,
        };
        let out = enforce_connectivity(&lm, 2);
        assert_eq!(out.region_count, 1);
        assert!(out.labels.iter().all(|&l| l == 0));
        let kept = enforce_connectivity(&lm, 1);
        assert_eq!(kept.region_count, 2);
        assert_eq!(kept.labels[12], 1);
    }

    #[test]
    fn split_label_becomes_two_regions() {
        // Label 0 appears in two disconnected columns.
        let raw: Vec<u32> = (0..12)
            .map(|i| {
                if i % 4 == 1 {
                    5
                } else if i % 4 == 3 {
                    5
                } else {
                    0
                }
            })
            .collect();
        let out = enforce_connectivity(
            &LabelMap {
                width: 4,
                height: 3,
                labels: raw,
                region_count: 6,
            },
            1,
        );
        assert_eq!(out.region_count, 4);
        assert_eq!(&out.labels[..4], &[0, 1, 2, 3]);
    }

    #[test]
    fn half_planes_render_exactly() {
        let img = Plane::from_fn(8, 4, |x, _| if x < 4 { 0.2f32 } else { 0.8 });
        let lm =
            LabelMap::from_raw(8, 4, (0..32).map(|i| u32::from(i % 8 >= 4)).collect()).unwrap();
        let r = render_superpixel_image(&img, &lm).unwrap();
        assert_eq!(r, img);
    }
}
