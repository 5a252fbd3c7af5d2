use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::linalg::Mat;

/// Log-scales are squashed to `(-LOG_SCALE_BOUND, LOG_SCALE_BOUND)`.
pub const LOG_SCALE_BOUND: f64 = 5.0;

/// Roles in a layer mask.
pub const FROZEN: u8 = 0;
pub const CONDITIONER: u8 = 1;
pub const TRANSFORMED: u8 = 2;

/// Affine coupling `y_T ← y_T ⊙ exp(s(y_C)) + t(y_C)`. `s` and `t` are
/// separate ReLU networks with two hidden layers of `width` units whose last
/// layer starts at zero. Coordinates in neither set pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub transform: Vec<usize>,
    pub cond: Vec<usize>,
    pub width: usize,
}

impl CouplingLayer {
    pub fn from_mask(mask: &[u8], width: usize) -> Option<Self> {
        let pick = |role| mask.iter().enumerate().filter(|(_, &m)| m == role).map(|(i, _)| i).collect::<Vec<_>>();
        if mask.iter().any(|&m| m > TRANSFORMED) {
            return None;
        }
        let transform = pick(TRANSFORMED);
        (!transform.is_empty()).then(|| CouplingLayer { transform, cond: pick(CONDITIONER), width })
    }

    pub fn mask(&self, dim: usize) -> Vec<u8> {
        let mut m = vec![FROZEN; dim];
        self.cond.iter().for_each(|&i| m[i] = CONDITIONER);
        self.transform.iter().for_each(|&i| m[i] = TRANSFORMED);
        m
    }

    fn subnet_sizes(&self) -> [usize; 4] {
        [self.cond.len(), self.width, self.width, self.transform.len()]
    }

    fn subnet_count(&self) -> usize {
        self.subnet_sizes().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        2 * self.subnet_count()
    }

    /// He-scaled hidden weights, zero biases, zero output layer.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for _ in 0..2 {
            let sizes = self.subnet_sizes();
            for (l, p) in sizes.windows(2).enumerate() {
                let (n_in, n_out) = (p[0], p[1]);
                if l < 2 && n_in > 0 {
                    let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive scale");
                    out.extend((0..n_in * n_out).map(|_| normal.sample(rng)));
                } else {
                    out.extend(std::iter::repeat_n(0.0, n_in * n_out));
                }
                out.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        out
    }

    fn subnet(&self, params: &[f64], c: &Mat) -> Mat {
        let sizes = self.subnet_sizes();
        let mut h = c.clone();
        let mut off = 0;
        for (l, p) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (p[0], p[1]);
            let w = Mat::from_vec(n_in, n_out, params[off..off + n_in * n_out].to_vec());
            off += n_in * n_out;
            let b = &params[off..off + n_out];
            off += n_out;
            let mut z = h.matmul(&w);
            for i in 0..z.rows() {
                for (v, bj) in z.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                    if l < 2 && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = z;
        }
        h
    }

    /// Squashed log-scales and shifts for the transformed coordinates, `n x |T|` each.
    pub fn scale_shift(&self, params: &[f64], y: &Mat) -> (Mat, Mat) {
        let c = y.select_cols(&self.cond);
        let k = self.subnet_count();
        let raw = self.subnet(&params[..k], &c);
        let s = raw.map(|v| LOG_SCALE_BOUND * (v / LOG_SCALE_BOUND).tanh());
        (s, self.subnet(&params[k..], &c))
    }

    /// Forward map and per-row log-determinant.
    pub fn forward(&self, params: &[f64], y: &Mat) -> (Mat, Vec<f64>) {
        let (s, t) = self.scale_shift(params, y);
        let mut out = y.clone();
        for r in 0..y.rows() {
            for (k, &j) in self.transform.iter().enumerate() {
                out.set(r, j, y.get(r, j) * s.get(r, k).exp() + t.get(r, k));
            }
        }
        (out, s.row_sums().into_vec())
    }

    /// Inverse map and the per-row log-determinant of the *forward* map at
    /// the returned point.
    pub fn inverse(&self, params: &[f64], y: &Mat) -> (Mat, Vec<f64>) {
        let (s, t) = self.scale_shift(params, y);
        let mut out = y.clone();
        for r in 0..y.rows() {
            for (k, &j) in self.transform.iter().enumerate() {
                out.set(r, j, (y.get(r, j) - t.get(r, k)) * (-s.get(r, k)).exp());
            }
        }
        (out, s.row_sums().into_vec())
    }

    fn subnet_on_tape(&self, tape: &mut Tape, all: &[f64], offset: usize, c: Var) -> Var {
        let sizes = self.subnet_sizes();
        let mut h = c;
        let mut off = offset;
        for (l, p) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (p[0], p[1]);
            let w = tape.param(all, off, n_in, n_out);
            off += n_in * n_out;
            let b = tape.param(all, off, 1, n_out);
            off += n_out;
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if l < 2 { tape.relu(z) } else { z };
        }
        h
    }

    /// Tape version of [`scale_shift`](Self::scale_shift); the layer's
    /// parameters start at `offset` of the flat vector `all`.
    pub fn scale_shift_on_tape(&self, tape: &mut Tape, all: &[f64], offset: usize, y: Var) -> (Var, Var) {
        let c = tape.select_cols(y, &self.cond);
        let raw = self.subnet_on_tape(tape, all, offset, c);
        let s = tape.scale(raw, 1.0 / LOG_SCALE_BOUND);
        let s = tape.tanh(s);
        let s = tape.scale(s, LOG_SCALE_BOUND);
        let t = self.subnet_on_tape(tape, all, offset + self.subnet_count(), c);
        (s, t)
    }

    /// Columns of `y` that this layer leaves alone.
    pub fn passthrough(&self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|i| !self.transform.contains(i)).collect()
    }
}

/// Masks for `layers` coupling layers over `dim` coordinates split into
/// `k_blocks` contiguous groups. Layer `l` belongs to block `⌊l K / L⌋`;
/// block `b` works on the first `K - b` groups only, so the trailing group is
/// frozen after each block. Inside a block the active coordinates are halved
/// and the two halves take turns being transformed.
pub fn kr_masks(dim: usize, layers: usize, k_blocks: usize) -> Vec<Vec<u8>> {
    let base = dim / k_blocks;
    let extra = dim % k_blocks;
    let group_end: Vec<usize> = (0..k_blocks).map(|g| (g + 1) * base + (g + 1).min(extra)).collect();
    let mut masks = Vec::with_capacity(layers);
    let mut block_start = 0;
    for l in 0..layers {
        let block = l * k_blocks / layers;
        if l == 0 || block != (l - 1) * k_blocks / layers {
            block_start = l;
        }
        let active = group_end[k_blocks - 1 - block];
        let mut m = vec![FROZEN; dim];
        if active == 1 {
            m[0] = TRANSFORMED;
        } else {
            let half = active / 2;
            let second = (l - block_start) % 2 == 0;
            for (i, mi) in m.iter_mut().enumerate().take(active) {
                *mi = if (i >= half) == second { TRANSFORMED } else { CONDITIONER };
            }
        }
        masks.push(m);
    }
    masks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_dimensional_masks_alternate() {
        let m = kr_masks(2, 4, 1);
        assert_eq!(m, vec![vec![1, 2], vec![2, 1], vec![1, 2], vec![2, 1]]);
    }

    #[test]
    fn blocks_freeze_trailing_groups() {
        let m = kr_masks(5, 6, 3);
        assert_eq!(m[0], vec![1, 1, 2, 2, 2]);
        assert_eq!(m[1], vec![2, 2, 1, 1, 1]);
        assert_eq!(m[2], vec![1, 1, 2, 2, 0]);
        assert_eq!(m[3], vec![2, 2, 1, 1, 0]);
        assert_eq!(m[4], vec![1, 2, 0, 0, 0]);
        assert_eq!(m[5], vec![2, 1, 0, 0, 0]);
        let one = kr_masks(3, 3, 3);
        assert_eq!(one[2], vec![2, 0, 0]);
    }

    #[test]
    fn mask_round_trip() {
        let layer = CouplingLayer::from_mask(&[1, 0, 2, 2], 8).unwrap();
        assert_eq!(layer.transform, vec![2, 3]);
        assert_eq!(layer.cond, vec![0]);
        assert_eq!(layer.mask(4), vec![1, 0, 2, 2]);
        assert!(CouplingLayer::from_mask(&[1, 1], 8).is_none());
    }
}
