use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Removal;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const ROAD_NOISE_STD: f64 = 0.01;

const CG_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadConfig {
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig { noise_std: ROAD_NOISE_STD, seed: 0 }
    }
}

impl RoadConfig {
    /// Noise source for one (image, percentage, direction) triple, so
    /// results do not depend on evaluation order.
    pub fn rng_for(&self, id: u32, v: f64, removal: Removal) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dir = matches!(removal, Removal::LeastRelevantFirst) as u64;
        rng.set_stream(((id as u64) << 32) | (((v * 100.0).round() as u64) << 1) | dir);
        rng
    }
}

/// Noisy linear imputation of a `[C,H,W]` image.
///
/// Every removed pixel is set to the mean of its 4-neighbours, with known
/// pixels as boundary values, by solving the resulting sparse system per
/// channel. Gaussian noise with `noise_std` is then added to the imputed
/// pixels only.
pub fn road_impute(image: &Tensor, remove: &[bool], noise_std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::Shape(format!("expected a [C,H,W] image, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if remove.len() != h * w {
        return Err(Error::Shape(format!("removal mask of {} pixels for a {h}×{w} image", remove.len())));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid(format!("noise std must be non-negative, got {noise_std}")));
    }
    let unknowns: Vec<usize> = (0..h * w).filter(|&p| remove[p]).collect();
    if unknowns.is_empty() {
        return Ok(image.clone());
    }
    if unknowns.len() == h * w {
        return Err(invalid("every pixel is removed; nothing to impute from"));
    }
    let system = System::new(remove, h, w, &unknowns);
    let mut out = image.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        // Solving relative to a known value keeps constant images exact.
        let base = plane[remove.iter().position(|r| !r).expect("a known pixel")];
        let shifted: Vec<f64> = plane.iter().map(|v| v - base).collect();
        let u = system.solve(&shifted);
        for (&p, v) in unknowns.iter().zip(u) {
            plane[p] = base + v;
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| invalid(e.to_string()))?;
        for ch in 0..c {
            for &p in &unknowns {
                out.data_mut()[ch * h * w + p] += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

/// `deg_p·u_p − Σ u_q (q removed) = Σ I_q (q known)` over 4-neighbours.
struct System<'a> {
    unknowns: &'a [usize],
    degree: Vec<f64>,
    /// Removed neighbours of each unknown, as unknown indices.
    coupled: Vec<Vec<usize>>,
    /// Known neighbours of each unknown, as pixel indices.
    boundary: Vec<Vec<usize>>,
}

impl<'a> System<'a> {
    fn new(remove: &[bool], h: usize, w: usize, unknowns: &'a [usize]) -> Self {
        let mut slot = vec![usize::MAX; h * w];
        unknowns.iter().enumerate().for_each(|(i, &p)| slot[p] = i);
        let mut degree = Vec::with_capacity(unknowns.len());
        let mut coupled = Vec::with_capacity(unknowns.len());
        let mut boundary = Vec::with_capacity(unknowns.len());
        for &p in unknowns {
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            degree.push(nb.len() as f64);
            coupled.push(nb.iter().filter(|&&q| remove[q]).map(|&q| slot[q]).collect());
            boundary.push(nb.into_iter().filter(|&q| !remove[q]).collect());
        }
        System { unknowns, degree, coupled, boundary }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        for i in 0..u.len() {
            out[i] = self.degree[i] * u[i] - self.coupled[i].iter().map(|&j| u[j]).sum::<f64>();
        }
    }

    /// Jacobi-preconditioned conjugate gradients.
    fn solve(&self, plane: &[f64]) -> Vec<f64> {
        let n = self.unknowns.len();
        let b: Vec<f64> = self.boundary.iter().map(|nb| nb.iter().map(|&q| plane[q]).sum()).collect();
        let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Start from the mean of the known neighbours' values.
        let mut u: Vec<f64> = self
            .boundary
            .iter()
            .map(|nb| if nb.is_empty() { 0.0 } else { nb.iter().map(|&q| plane[q]).sum::<f64>() / nb.len() as f64 })
            .collect();
        let mut au = vec![0.0; n];
        self.apply(&u, &mut au);
        let mut r: Vec<f64> = b.iter().zip(&au).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.degree).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut ap = vec![0.0; n];
        for _ in 0..10 * n + 100 {
            let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r_norm <= CG_TOLERANCE * b_norm.max(1.0) {
                break;
            }
            self.apply(&p, &mut ap);
            let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
            u.iter_mut().zip(&p).for_each(|(u, p)| *u += alpha * p);
            r.iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
            z.iter_mut().zip(r.iter().zip(&self.degree)).for_each(|(z, (r, d))| *z = r / d);
            let next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = next / rz;
            rz = next;
            p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        }
        u
    }
}
