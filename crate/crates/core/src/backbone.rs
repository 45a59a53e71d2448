//! Shared convolutional feature extractor.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, BatchNorm2d, BnCache, BnStats, Conv2d, ConvCache, Module, NormMode};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl BackboneConfig {
    /// Six 3x3 conv layers, 32 -> 64 -> 128 channels, overall stride 4, the
    /// last two dilated by 2.
    pub fn toy() -> Self {
        Self::with_widths([32, 32, 64, 64, 128, 128])
    }

    /// The toy topology with custom per-layer widths.
    pub fn with_widths(widths: [usize; 6]) -> Self {
        let strides = [1, 2, 1, 2, 1, 1];
        let dilations = [1, 1, 1, 1, 2, 2];
        Self {
            in_channels: 3,
            layers: (0..6)
                .map(|i| LayerSpec {
                    out_channels: widths[i],
                    stride: strides[i],
                    dilation: dilations[i],
                })
                .collect(),
        }
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }
}

/// Backbone output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `(C_f, h, w)`
    pub values: Array3<f64>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
}

pub struct BackboneCache {
    layers: Vec<(ConvCache, BnCache, Array4<f64>)>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = config.in_channels;
        for l in &config.layers {
            convs.push(Conv2d::new(in_ch, l.out_channels, 3, l.stride, l.dilation));
            norms.push(BatchNorm2d::new(l.out_channels));
            in_ch = l.out_channels;
        }
        Self { config, convs, norms }
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for c in &mut self.convs {
            c.init(rng);
        }
    }

    pub fn stride(&self) -> usize {
        self.config.stride()
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Gradient container with the same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// Batched forward pass over `(N, 3, H, W)`.
    ///
    /// Returns features `(N, C_f, ceil(H/s), ceil(W/s))`, the backward cache
    /// and, in training mode, the batch statistics of every norm layer. The
    /// caller decides whether to fold those into the running averages.
    pub fn forward(
        &self,
        x: &Array4<f64>,
        mode: NormMode,
    ) -> Result<(Array4<f64>, BackboneCache, Vec<BnStats>)> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("backbone input".into()));
        }
        let mut h = x.clone();
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut stats = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let (z, cc) = conv.forward(&h)?;
            let (y, bc, st) = norm.forward(&z, mode);
            h = relu(&y);
            stats.extend(st);
            layers.push((cc, bc, h.clone()));
        }
        Ok((h, BackboneCache { layers }, stats))
    }

    pub fn backward(&self, cache: &BackboneCache, d_out: &Array4<f64>, grads: &mut Backbone) -> Array4<f64> {
        let mut d = d_out.clone();
        for i in (0..self.convs.len()).rev() {
            let (cc, bc, out) = &cache.layers[i];
            let dy = relu_backward(out, &d);
            let dz = self.norms[i].backward(bc, &dy, &mut grads.norms[i]);
            d = self.convs[i].backward(cc, &dz, &mut grads.convs[i]);
        }
        d
    }

    pub fn apply_stats(&mut self, stats: &[BnStats]) {
        for (norm, st) in self.norms.iter_mut().zip(stats) {
            norm.update_running(st);
        }
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .map(|c| c as &dyn Module)
            .chain(self.norms.iter().map(|n| n as &dyn Module))
            .flat_map(|m| m.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.params_mut());
        }
        for n in &mut self.norms {
            out.extend(n.params_mut());
        }
        out
    }

    fn buffers(&self) -> Vec<&[f64]> {
        self.norms.iter().flat_map(|n| n.buffers()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut [f64]> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for c in &mut self.convs {
            params.extend(c.params_mut());
        }
        for n in &mut self.norms {
            let mut s = n.state_mut();
            let b = s.split_off(2);
            params.extend(s);
            buffers.extend(b);
        }
        params.extend(buffers);
        params
    }
}

/// Single-image inference with running statistics.
pub fn backbone_forward(image: &Array3<f64>, params: &Backbone) -> Result<FeatureMap> {
    let x = image.clone().insert_axis(Axis(0));
    let (f, _, _) = params.forward(&x, NormMode::Eval)?;
    Ok(FeatureMap {
        values: f.index_axis(Axis(0), 0).to_owned(),
        stride: params.stride(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_features() {
        let bb = Backbone::new(BackboneConfig::with_widths([2, 2, 3, 3, 4, 4]));
        let f = backbone_forward(&Array3::zeros((3, 16, 16)), &bb).unwrap();
        assert_eq!(f.values.dim(), (4, 4, 4));
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_size_tracks_stride() {
        let mut bb = Backbone::new(BackboneConfig::with_widths([2, 2, 3, 3, 4, 4]));
        bb.init(&mut ChaCha8Rng::seed_from_u64(0));
        for (h, w) in [(16, 16), (32, 32), (17, 23)] {
            let f = backbone_forward(&Array3::zeros((3, h, w)), &bb).unwrap();
            assert_eq!(f.values.dim(), (4, h.div_ceil(4), w.div_ceil(4)));
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let bb = Backbone::new(BackboneConfig::with_widths([2, 2, 3, 3, 4, 4]));
        let mut img = Array3::zeros((3, 8, 8));
        img[[1, 2, 3]] = f64::NAN;
        assert!(matches!(backbone_forward(&img, &bb), Err(Error::NonFinite(_))));
    }

    #[test]
    fn flat_state_roundtrip() {
        let mut bb = Backbone::new(BackboneConfig::with_widths([2, 2, 3, 3, 4, 4]));
        bb.init(&mut ChaCha8Rng::seed_from_u64(1));
        bb.norms[3].running_var.fill(2.5);
        let flat = bb.to_flat();
        let mut other = Backbone::new(bb.config.clone());
        other.load_flat(&flat).unwrap();
        assert_eq!(other, bb);
    }
}
