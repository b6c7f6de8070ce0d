//! Stride-2 CNN encoder and mirrored transposed-convolution decoder for the
//! RGB-D baseline. Input channels: [r, g, b, symlog(depth)].

use rand::Rng;

use crate::diffmath::{symlog, DiffError, Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use crate::diffmath::params::xavier_uniform;
use crate::scenesim::RgbdImage;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Spatial size at the encoder bottleneck.
const FINAL_SPATIAL: usize = 2;

#[derive(Clone, Debug)]
pub struct CnnConfig {
    /// Image side length; must be a power of two.
    pub image_size: usize,
    /// Channels per stride-2 level; length must equal log2(size / 2).
    pub channels: Vec<usize>,
    pub embed: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        if !self.image_size.is_power_of_two() || self.image_size < 4 {
            return Err(DiffError::InvalidArg {
                what: "image size must be a power of two, at least 4",
            });
        }
        let levels = (self.image_size / FINAL_SPATIAL).trailing_zeros() as usize;
        if self.channels.len() != levels {
            return Err(DiffError::InvalidArg {
                what: "channel list must have one entry per stride-2 level",
            });
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.channels.len()
    }

    fn flat_dim(&self) -> usize {
        self.channels.last().unwrap() * FINAL_SPATIAL * FINAL_SPATIAL
    }
}

pub struct CnnEncoder {
    pub cfg: CnnConfig,
    convs: Vec<(crate::diffmath::ParamKey, crate::diffmath::ParamKey)>, // (kernel, bias)
    head: Linear,
    norm: LayerNorm,
}

impl CnnEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: CnnConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 4;
        for (l, &c_out) in cfg.channels.iter().enumerate() {
            let fan_in = c_in * KERNEL * KERNEL;
            let w = xavier_uniform(rng, fan_in, c_out);
            let w = Tensor::new(vec![c_out, c_in, KERNEL, KERNEL], w.into_data());
            convs.push((
                store.add(&format!("{name}.conv{l}.w"), w),
                store.add(&format!("{name}.conv{l}.b"), Tensor::zeros(&[c_out])),
            ));
            c_in = c_out;
        }
        let head = Linear::new(store, &format!("{name}.head"), cfg.flat_dim(), cfg.embed, rng);
        let norm = LayerNorm::new(store, &format!("{name}.ln"), cfg.embed);
        Ok(CnnEncoder {
            cfg,
            convs,
            head,
            norm,
        })
    }

    /// Image to a graph constant [4, H, W] with symlog depth.
    pub fn image_input(g: &mut Graph, img: &RgbdImage) -> Var {
        let hw = img.width * img.height;
        let mut data = vec![0.0; 4 * hw];
        for (i, c) in img.rgb.iter().enumerate() {
            data[i] = c[0];
            data[hw + i] = c[1];
            data[2 * hw + i] = c[2];
            data[3 * hw + i] = symlog(img.depth[i]);
        }
        g.constant(Tensor::new(vec![4, img.height, img.width], data))
    }

    /// Pooled embeddings for a batch of images: [B, d].
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&RgbdImage],
        frozen: bool,
    ) -> Result<Var, DiffError> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            if img.width != self.cfg.image_size || img.height != self.cfg.image_size {
                return Err(DiffError::InvalidArg {
                    what: "image size does not match the encoder configuration",
                });
            }
            let mut x = Self::image_input(g, img);
            for &(wk, bk) in &self.convs {
                let w = if frozen { g.frozen_param(store, wk) } else { g.param(store, wk) };
                let b = if frozen { g.frozen_param(store, bk) } else { g.param(store, bk) };
                let y = g.conv2d(x, w, STRIDE, PAD);
                let y = g.add_chan_bias(y, b);
                x = g.silu(y);
            }
            rows.push(g.reshape(x, vec![1, self.cfg.flat_dim()]));
        }
        let flat = g.concat_rows(&rows);
        let e = if frozen {
            self.head.forward_frozen(g, store, flat)
        } else {
            self.head.forward(g, store, flat)
        };
        let e = if frozen {
            self.norm.forward_frozen(g, store, e)
        } else {
            self.norm.forward(g, store, e)
        };
        Ok(g.silu(e))
    }
}

pub struct CnnDecoder {
    pub cfg: CnnConfig,
    pub state_dim: usize,
    head: Linear,
    deconvs: Vec<(crate::diffmath::ParamKey, crate::diffmath::ParamKey)>,
}

impl CnnDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: CnnConfig,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        cfg.validate()?;
        let head = Linear::new(store, &format!("{name}.head"), state_dim, cfg.flat_dim(), rng);
        let mut deconvs = Vec::new();
        // mirror the encoder: channels reversed, final level emits 4 channels
        let mut dims: Vec<usize> = cfg.channels.clone();
        dims.reverse();
        dims.push(4);
        for l in 0..cfg.levels() {
            let (c_in, c_out) = (dims[l], dims[l + 1]);
            let fan = c_in * KERNEL * KERNEL;
            let w = xavier_uniform(rng, fan, c_out);
            // transposed-conv weight layout: [in, out, kh, kw]
            let w = Tensor::new(vec![c_in, c_out, KERNEL, KERNEL], w.into_data());
            deconvs.push((
                store.add(&format!("{name}.deconv{l}.w"), w),
                store.add(&format!("{name}.deconv{l}.b"), Tensor::zeros(&[c_out])),
            ));
        }
        Ok(CnnDecoder {
            cfg,
            state_dim,
            head,
            deconvs,
        })
    }

    /// Decode one state row [1, state_dim] into a [4, H, W] reconstruction
    /// (rgb + symlog depth).
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, state: Var) -> Var {
        let c0 = *self.cfg.channels.last().unwrap();
        let flat = self.head.forward(g, store, state);
        let mut x = g.reshape(flat, vec![c0, FINAL_SPATIAL, FINAL_SPATIAL]);
        let mut size = FINAL_SPATIAL;
        for (l, &(wk, bk)) in self.deconvs.iter().enumerate() {
            let w = g.param(store, wk);
            let b = g.param(store, bk);
            size *= 2;
            let y = g.conv_t2d(x, w, STRIDE, PAD, (size, size));
            let y = g.add_chan_bias(y, b);
            x = if l + 1 < self.deconvs.len() { g.silu(y) } else { y };
        }
        x
    }

    /// Reconstruction loss for one image: unit-variance Gaussian NLL on the
    /// RGB channels plus squared error on symlog depth, both averaged per
    /// entry.
    pub fn reconstruction_loss(&self, g: &mut Graph, recon: Var, target: &RgbdImage) -> Var {
        let hw = target.width * target.height;
        let mut tdata = vec![0.0; 4 * hw];
        for (i, c) in target.rgb.iter().enumerate() {
            tdata[i] = c[0];
            tdata[hw + i] = c[1];
            tdata[2 * hw + i] = c[2];
            tdata[3 * hw + i] = symlog(target.depth[i]);
        }
        let t = g.constant(Tensor::new(vec![4, target.height, target.width], tdata));
        let diff = g.sub(recon, t);
        let sq = g.square(diff);
        let flat = g.reshape(sq, vec![4, hw]);
        // rgb rows: 0.5 * err^2 + 0.5 ln(2 pi); depth row: plain squared error
        let rgb = g.gather_rows(flat, vec![0, 1, 2]);
        let depth = g.gather_rows(flat, vec![3]);
        let rgb_mean = g.mean_all(rgb);
        let rgb_nll = g.scale(rgb_mean, 0.5);
        let rgb_nll = g.add_const(rgb_nll, 0.5 * (2.0 * std::f64::consts::PI).ln());
        let depth_mean = g.mean_all(depth);
        g.add(rgb_nll, depth_mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(size: usize, fill: f64) -> RgbdImage {
        RgbdImage {
            width: size,
            height: size,
            rgb: vec![[fill, fill * 0.5, fill * 0.25]; size * size],
            depth: vec![fill; size * size],
        }
    }

    fn cfg8() -> CnnConfig {
        CnnConfig {
            image_size: 8,
            channels: vec![3, 5],
            embed: 6,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg8().validate().is_ok());
        let mut bad = cfg8();
        bad.image_size = 12;
        assert!(bad.validate().is_err());
        let mut bad = cfg8();
        bad.channels = vec![3];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_zero_image_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, "cnn", cfg8(), &mut rng).unwrap();
        for key in store.keys().collect::<Vec<_>>() {
            let shape = store.tensor(key).shape().to_vec();
            if store.name(key).ends_with("ln.scale") {
                continue; // keep the norm's unit scale
            }
            store.set_value(key, Tensor::zeros(&shape));
        }
        let img = image(8, 0.0);
        let mut g = Graph::new();
        let e = enc.encode_batch(&mut g, &store, &[&img], true).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_output_shape_mirrors_encoder_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for size in [8usize, 16, 32] {
            let levels = (size / 2).trailing_zeros() as usize;
            let cfg = CnnConfig {
                image_size: size,
                channels: (0..levels).map(|i| 3 + i).collect(),
                embed: 6,
            };
            let mut store = ParamStore::new();
            let dec = CnnDecoder::new(&mut store, "dec", cfg, 10, &mut rng).unwrap();
            let mut g = Graph::new();
            let state = g.constant(Tensor::from_rows(1, 10, vec![0.1; 10]));
            let out = dec.decode(&mut g, &store, state);
            assert_eq!(g.value(out).shape(), &[4, size, size]);
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = CnnEncoder::new(&mut store, "cnn", cfg8(), &mut rng).unwrap();
        let img = image(16, 0.3);
        let mut g = Graph::new();
        assert!(enc.encode_batch(&mut g, &store, &[&img], true).is_err());
    }

    #[test]
    fn perfect_reconstruction_leaves_only_the_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let dec = CnnDecoder::new(&mut store, "dec", cfg8(), 4, &mut rng).unwrap();
        let img = image(8, 0.4);
        let mut g = Graph::new();
        // bypass the network: feed the exact target as the reconstruction
        let hw = 64;
        let mut tdata = vec![0.0; 4 * hw];
        for (i, c) in img.rgb.iter().enumerate() {
            tdata[i] = c[0];
            tdata[hw + i] = c[1];
            tdata[2 * hw + i] = c[2];
            tdata[3 * hw + i] = symlog(img.depth[i]);
        }
        let recon = g.constant(Tensor::new(vec![4, 8, 8], tdata));
        let loss = dec.reconstruction_loss(&mut g, recon, &img);
        let want = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }
}
