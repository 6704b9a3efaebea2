//! Superpixels over Φ and pixel position, or passed through from synthesis
//! labels when those are known.

use std::collections::VecDeque;

use super::{ScreenEmbedding, EMBED_CHANNELS};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::screentone::RegionLabels;

/// A labelling of every pixel with one of `n` contiguous superpixel ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelPartition {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    n: usize,
}

impl SuperpixelPartition {
    /// Relabels arbitrary ids to `0..n` in order of first appearance.
    pub fn from_raw(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != height * width || raw.is_empty() {
            return Err(Error::shape(height * width, raw.len()));
        }
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&r| {
                let next = map.len() as u32;
                *map.entry(r).or_insert(next)
            })
            .collect();
        Ok(Self {
            height,
            width,
            labels,
            n: map.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n];
        for &l in &self.labels {
            s[l as usize] += 1;
        }
        s
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::param("superpixel crop out of bounds"));
        }
        let mut raw = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            raw.extend_from_slice(&self.labels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::from_raw(h, w, &raw)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SlicOptions {
    pub target_n: usize,
    /// Weight of spatial distance relative to Φ distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicOptions {
    fn default() -> Self {
        Self {
            target_n: 64,
            compactness: 0.4,
            iterations: 10,
        }
    }
}

/// Partition of `gt` into superpixels. Known synthesis labels are resized to
/// `gt` and returned as they are; otherwise SLIC clusters Φ and position.
pub fn superpixels(
    emb: &ScreenEmbedding,
    gt: &Image,
    labels: Option<&RegionLabels>,
    opts: &SlicOptions,
) -> Result<SuperpixelPartition> {
    let (h, w) = gt.dims();
    if let Some(l) = labels {
        let l = if l.dims() == (h, w) { l.clone() } else { l.resize_nearest(h, w) };
        let raw: Vec<u32> = l.data().iter().map(|&v| v as u32).collect();
        return SuperpixelPartition::from_raw(h, w, &raw);
    }
    if opts.target_n == 0 {
        return Err(Error::param("target superpixel count must be positive"));
    }
    let phi = emb.embed(gt)?;
    let scale = emb.asset().bank_scale;
    let feats: Vec<[f64; EMBED_CHANNELS]> = (0..h * w)
        .map(|p| std::array::from_fn(|c| phi.data()[p * EMBED_CHANNELS + c] / scale))
        .collect();
    Ok(slic(&feats, h, w, opts))
}

#[derive(Clone, Copy)]
struct Center {
    y: f64,
    x: f64,
    f: [f64; EMBED_CHANNELS],
}

fn slic(feats: &[[f64; EMBED_CHANNELS]], h: usize, w: usize, opts: &SlicOptions) -> SuperpixelPartition {
    let step = ((h * w) as f64 / opts.target_n as f64).sqrt().max(1.0);
    let ny = ((h as f64 / step).round() as usize).max(1);
    let nx = ((w as f64 / step).round() as usize).max(1);
    let mut centers: Vec<Center> = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let y = (i as f64 + 0.5) * h as f64 / ny as f64;
            let x = (j as f64 + 0.5) * w as f64 / nx as f64;
            let p = (y as usize).min(h - 1) * w + (x as usize).min(w - 1);
            centers.push(Center { y, x, f: feats[p] });
        }
    }
    let spatial = opts.compactness / step;
    let reach = (2.0 * step).ceil() as isize;
    let mut label = vec![0u32; h * w];
    let mut dist = vec![f64::INFINITY; h * w];
    for _ in 0..opts.iterations.max(1) {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let (cy, cx) = (c.y as isize, c.x as isize);
            for y in (cy - reach).max(0)..(cy + reach).min(h as isize) {
                for x in (cx - reach).max(0)..(cx + reach).min(w as isize) {
                    let p = y as usize * w + x as usize;
                    let df: f64 = feats[p].iter().zip(&c.f).map(|(a, b)| (a - b).powi(2)).sum();
                    let ds = (y as f64 + 0.5 - c.y).powi(2) + (x as f64 + 0.5 - c.x).powi(2);
                    let d = df + spatial * spatial * ds;
                    if d < dist[p] {
                        dist[p] = d;
                        label[p] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0.0, 0.0, [0.0; EMBED_CHANNELS], 0usize); centers.len()];
        for p in 0..h * w {
            let a = &mut acc[label[p] as usize];
            a.0 += (p / w) as f64 + 0.5;
            a.1 += (p % w) as f64 + 0.5;
            for (s, v) in a.2.iter_mut().zip(&feats[p]) {
                *s += v;
            }
            a.3 += 1;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                c.y = a.0 / n;
                c.x = a.1 / n;
                c.f = std::array::from_fn(|i| a.2[i] / n);
            }
        }
    }
    enforce_connectivity(&mut label, h, w, (step * step / 4.0) as usize);
    SuperpixelPartition::from_raw(h, w, &label).expect("label raster sized from dims")
}

/// Splits labels into 4-connected components and merges components below
/// `min_size` into a neighbouring one.
fn enforce_connectivity(label: &mut [u32], h: usize, w: usize, min_size: usize) {
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    for start in 0..h * w {
        if out[start] != UNSET {
            continue;
        }
        let own = label[start];
        // a previously finished neighbouring component absorbs small pieces
        let mut adjacent = None;
        members.clear();
        out[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            members.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if label[q] == own && out[q] == UNSET {
                    out[q] = next;
                    queue.push_back(q);
                } else if out[q] != UNSET && out[q] != next && adjacent.is_none() {
                    adjacent = Some(out[q]);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        match adjacent {
            Some(a) if members.len() < min_size => {
                for &p in &members {
                    out[p] = a;
                }
            }
            _ => next += 1,
        }
    }
    label.copy_from_slice(&out);
}
