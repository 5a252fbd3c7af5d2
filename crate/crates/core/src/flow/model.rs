use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bounded::{BoundedMap, Frame};
use super::coupling::{kr_masks, CouplingLayer};
use crate::error::{contract, Error, Result};
use crate::linalg::Mat;
use crate::problems::BoxDomain;

/// Architecture of a flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    /// Number of coupling layers `L`.
    pub layers: usize,
    /// Number of coordinate blocks `K` in the triangular schedule.
    pub k_blocks: usize,
    /// Hidden width of the coupling subnetworks.
    pub width: usize,
    pub map: BoundedMap,
}

/// Density on the padded box `B` around a physical domain: a standard
/// Gaussian pulled back through affine couplings, the logarithmic map and
/// the affine rescaling to the reference cube.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    frame: Frame,
    spec: FlowSpec,
    seed: u64,
    layers: Vec<CouplingLayer>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Draws from a flow with their log-densities.
#[derive(Clone, Debug)]
pub struct FlowSamples {
    /// Physical coordinates, strictly inside `B` up to rounding.
    pub points: Mat,
    pub log_density: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerRecord {
    mask: Vec<u8>,
    params: Vec<f64>,
}

/// On-disk form of a flow.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct FlowCheckpoint {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "L")]
    l: usize,
    width: usize,
    delta: f64,
    s: f64,
    #[serde(rename = "box")]
    domain: BoxDomain,
    seed: u64,
    layers: Vec<LayerRecord>,
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn log_std_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - HALF_LOG_2PI * z.len() as f64
}

impl FlowModel {
    /// A flow whose couplings start as the identity.
    pub fn new(domain: BoxDomain, spec: FlowSpec, seed: u64) -> Result<Self> {
        let d = domain.dim();
        if spec.layers == 0 || spec.width == 0 {
            return Err(Error::Config("flow needs at least one coupling layer of positive width".into()));
        }
        if spec.k_blocks == 0 || spec.k_blocks > d || spec.k_blocks > spec.layers {
            return Err(Error::Config(format!(
                "flow.k_blocks must lie in 1..={} for d={d} and L={}, got {}",
                d.min(spec.layers),
                spec.layers,
                spec.k_blocks
            )));
        }
        BoundedMap::new(spec.map.delta, spec.map.scale)?;
        let layers: Vec<CouplingLayer> = kr_masks(d, spec.layers, spec.k_blocks)
            .iter()
            .map(|m| CouplingLayer::from_mask(m, spec.width).expect("schedule transforms at least one coordinate"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut offsets = Vec::with_capacity(layers.len());
        for layer in &layers {
            offsets.push(params.len());
            params.extend(layer.init_params(&mut rng));
        }
        Ok(FlowModel { frame: Frame::new(domain, spec.map), spec, seed, layers, offsets, params })
    }

    pub fn dim(&self) -> usize {
        self.frame.dim()
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.frame.domain
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layer_params(&self, l: usize) -> &[f64] {
        &self.params[self.offsets[l]..self.offsets[l] + self.layers[l].param_count()]
    }

    pub(crate) fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    /// `ℓ` applied to physical points, with the log-Jacobian of the rescale
    /// and `ℓ` per row.
    pub fn to_latent_input(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        if x.cols() != self.dim() {
            return Err(contract(format!("points have {} coordinates, flow expects {}", x.cols(), self.dim())));
        }
        let map = self.frame.map;
        let mut y = Mat::zeros(x.rows(), x.cols());
        let mut logdet = Vec::with_capacity(x.rows());
        let rescale = self.frame.log_rescale();
        for (r, p) in x.iter_rows().enumerate() {
            let xr = self.frame.to_reference(p);
            let yr = map.forward(&xr)?;
            y.row_mut(r).copy_from_slice(&yr);
            logdet.push(map.log_jacobian(&xr) + rescale);
        }
        Ok((y, logdet))
    }

    /// `z = f(ℓ(x̃))` with `x̃` the reference image of `x`, and
    /// `log |det ∂z/∂x|` per row.
    pub fn forward(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        let (mut y, mut logdet) = self.to_latent_input(x)?;
        for l in 0..self.layers.len() {
            let (next, ld) = self.layers[l].forward(self.layer_params(l), &y);
            y = next;
            logdet.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
        }
        Ok((y, logdet))
    }

    /// Physical points for latent rows `z`, and the log-density there.
    pub fn inverse(&self, z: &Mat) -> Result<FlowSamples> {
        if z.cols() != self.dim() {
            return Err(contract(format!("latent points have {} coordinates, flow expects {}", z.cols(), self.dim())));
        }
        let mut log_density: Vec<f64> = z.iter_rows().map(log_std_normal).collect();
        let mut y = z.clone();
        for l in (0..self.layers.len()).rev() {
            let (prev, ld) = self.layers[l].inverse(self.layer_params(l), &y);
            y = prev;
            log_density.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
        }
        let map = self.frame.map;
        let rescale = self.frame.log_rescale();
        let mut points = Mat::zeros(z.rows(), z.cols());
        for (r, yr) in y.iter_rows().enumerate() {
            let xr = map.inverse(yr);
            points.row_mut(r).copy_from_slice(&self.frame.to_physical(&xr));
            log_density[r] += yr.iter().map(|&v| map.log_derivative_at_image(v)).sum::<f64>() + rescale;
        }
        Ok(FlowSamples { points, log_density })
    }

    /// `log p̂` at physical points strictly inside `B`.
    pub fn log_density(&self, x: &Mat) -> Result<Vec<f64>> {
        let (z, logdet) = self.forward(x)?;
        Ok(z.iter_rows().zip(logdet).map(|(zr, ld)| log_std_normal(zr) + ld).collect())
    }

    pub fn density(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(self.log_density(x)?.into_iter().map(f64::exp).collect())
    }

    /// Density at one point; zero outside `B`.
    pub fn density_at(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(contract(format!("point has {} coordinates, flow expects {}", x.len(), self.dim())));
        }
        if !self.frame.in_padded_box(x) {
            return Ok(0.0);
        }
        Ok(self.density(&Mat::from_rows(&[x], x.len()))?[0])
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<FlowSamples> {
        let d = self.dim();
        let z = Mat::from_fn(n, d, |_, _| rng.sample(StandardNormal));
        self.inverse(&z)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = FlowCheckpoint {
            d: self.dim(),
            k: self.spec.k_blocks,
            l: self.spec.layers,
            width: self.spec.width,
            delta: self.spec.map.delta,
            s: self.spec.map.scale,
            domain: self.frame.domain.clone(),
            seed: self.seed,
            layers: (0..self.layers.len())
                .map(|l| LayerRecord { mask: self.layers[l].mask(self.dim()), params: self.layer_params(l).to_vec() })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: FlowCheckpoint = serde_json::from_str(text)?;
        let domain = BoxDomain::new(ck.domain.lo, ck.domain.hi)?;
        if domain.dim() != ck.d || ck.layers.len() != ck.l {
            return Err(contract("flow checkpoint dimensions are inconsistent"));
        }
        let spec = FlowSpec { layers: ck.l, k_blocks: ck.k, width: ck.width, map: BoundedMap::new(ck.delta, ck.s)? };
        let mut layers = Vec::with_capacity(ck.l);
        let mut offsets = Vec::with_capacity(ck.l);
        let mut params = Vec::new();
        for (i, rec) in ck.layers.into_iter().enumerate() {
            if rec.mask.len() != ck.d {
                return Err(contract(format!("layer {i} mask has length {}", rec.mask.len())));
            }
            let layer = CouplingLayer::from_mask(&rec.mask, ck.width)
                .ok_or_else(|| contract(format!("layer {i} mask {:?} is invalid", rec.mask)))?;
            if rec.params.len() != layer.param_count() {
                return Err(contract(format!("layer {i} has {} parameters, expected {}", rec.params.len(), layer.param_count())));
            }
            offsets.push(params.len());
            params.extend(rec.params);
            layers.push(layer);
        }
        Ok(FlowModel { frame: Frame::new(domain, spec.map), spec, seed: ck.seed, layers, offsets, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Standard normal density for one coordinate, used by tests and diagnostics.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}
