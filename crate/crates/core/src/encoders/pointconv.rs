//! Point set encoder: stacked point-convolution layers over FPS-halved
//! centroid sets.
//!
//! Each layer gathers the k nearest neighbors of every centroid, runs a
//! small weight network on the relative offsets, and aggregates
//! linear(sum_j w_j ⊙ f_j). Neighbor order never matters (sum aggregation),
//! and centroid selection depends on geometry only, so row permutations of
//! the input leave the encoding unchanged up to float associativity.

use rand::Rng;

use crate::diffmath::{DiffError, Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use crate::pointcloud::{farthest_point_sample_indices, knn_gather, PointCloud, Vec3};

#[derive(Clone, Debug)]
pub struct PointConvConfig {
    /// Expected input cloud size N.
    pub n_points: usize,
    /// Neighborhood size at every layer.
    pub k: usize,
    /// Output feature width per layer; the last entry is the embedding
    /// width d.
    pub widths: Vec<usize>,
    pub weightnet_hidden: usize,
    pub embed: usize,
}

impl PointConvConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        let halvings = self.widths.len() as u32;
        if self.n_points < (1usize << halvings) {
            return Err(DiffError::InvalidArg {
                what: "input point budget is below 2^layers",
            });
        }
        if self.widths.last() != Some(&self.embed) {
            return Err(DiffError::InvalidArg {
                what: "final layer width must equal the embedding width",
            });
        }
        if self.k == 0 {
            return Err(DiffError::InvalidArg {
                what: "neighborhood size must be positive",
            });
        }
        Ok(())
    }

    /// Point count after all halvings.
    pub fn out_points(&self) -> usize {
        self.n_points >> self.widths.len()
    }
}

/// Per-point features plus their mean-pooled aggregate.
pub struct Embedding {
    pub per_point: Tensor,
    pub pooled: Vec<f64>,
}

struct PcLayer {
    wnet_in: Linear,
    wnet_out: Linear,
    proj: Linear,
    norm: LayerNorm,
}

pub struct PointConvEncoder {
    pub cfg: PointConvConfig,
    layers: Vec<PcLayer>,
}

impl PointConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: PointConvConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut c_in = 6;
        for (l, &c_out) in cfg.widths.iter().enumerate() {
            layers.push(PcLayer {
                wnet_in: Linear::new(store, &format!("{name}.l{l}.wnet_in"), 3, cfg.weightnet_hidden, rng),
                wnet_out: Linear::new(
                    store,
                    &format!("{name}.l{l}.wnet_out"),
                    cfg.weightnet_hidden,
                    c_in,
                    rng,
                ),
                proj: Linear::new(store, &format!("{name}.l{l}.proj"), c_in, c_out, rng),
                norm: LayerNorm::new(store, &format!("{name}.l{l}.ln"), c_out),
            });
            c_in = c_out;
        }
        Ok(PointConvEncoder { cfg, layers })
    }

    /// Pooled embeddings for a batch of equally sized clouds: [B, d].
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clouds: &[&PointCloud],
        frozen: bool,
    ) -> Result<Var, DiffError> {
        let feats = self.encode_batch_points(g, store, clouds, frozen)?;
        Ok(g.mean_rows_seg(feats, self.cfg.out_points()))
    }

    /// Final per-point features for a batch, stacked: [B·n, d].
    pub fn encode_batch_points(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clouds: &[&PointCloud],
        frozen: bool,
    ) -> Result<Var, DiffError> {
        let n = self.cfg.n_points;
        for pc in clouds {
            if pc.len() != n {
                return Err(DiffError::DimMismatch {
                    what: "cloud size does not match the configured point budget",
                });
            }
        }
        let batch = clouds.len();

        // Geometry plan per cloud and level: centroid positions + neighbor
        // indices. Pure function of positions; no gradients flow here.
        let mut positions: Vec<Vec<Vec3>> = clouds.iter().map(|c| c.positions.clone()).collect();
        let mut feats = {
            let mut rows = Vec::with_capacity(batch * n * 6);
            for pc in clouds {
                rows.extend(pc.features());
            }
            g.constant(Tensor::from_rows(batch * n, 6, rows))
        };

        let mut m_in = n;
        for layer in &self.layers {
            let m_out = m_in / 2;
            let k = self.cfg.k.min(m_in);
            let mut gather_idx = Vec::with_capacity(batch * m_out * k);
            let mut offsets = Vec::with_capacity(batch * m_out * k * 3);
            let mut next_positions = Vec::with_capacity(batch);
            for (b, pos) in positions.iter().enumerate() {
                let seed = lexicographic_min_index(pos);
                let fps = farthest_point_sample_indices(pos, m_out, seed)?;
                let centroids: Vec<Vec3> = fps.iter().map(|&i| pos[i as usize]).collect();
                let nn = knn_gather(&centroids, pos, k)?;
                for (ci, c) in centroids.iter().enumerate() {
                    for j in 0..k {
                        let pi = nn[ci * k + j] as usize;
                        gather_idx.push((b * m_in + pi) as u32);
                        let p = pos[pi];
                        offsets.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                    }
                }
                next_positions.push(centroids);
            }
            let offs = g.constant(Tensor::from_rows(batch * m_out * k, 3, offsets));
            let gathered = g.gather_rows(feats, gather_idx);

            let bind = |g: &mut Graph, lin: &Linear, x: Var| {
                if frozen {
                    lin.forward_frozen(g, store, x)
                } else {
                    lin.forward(g, store, x)
                }
            };
            let h = bind(g, &layer.wnet_in, offs);
            let h = g.silu(h);
            let w = bind(g, &layer.wnet_out, h);
            let prod = g.mul(w, gathered);
            let summed = g.sum_rows_seg(prod, k);
            let proj = bind(g, &layer.proj, summed);
            let normed = if frozen {
                layer.norm.forward_frozen(g, store, proj)
            } else {
                layer.norm.forward(g, store, proj)
            };
            feats = g.silu(normed);

            positions = next_positions;
            m_in = m_out;
        }
        Ok(feats)
    }

    /// Single-cloud embedding with concrete values.
    pub fn encode_one(
        &self,
        store: &ParamStore,
        pc: &PointCloud,
    ) -> Result<Embedding, DiffError> {
        let mut g = Graph::new();
        let feats = self.encode_batch_points(&mut g, store, &[pc], true)?;
        let pooled = g.mean_rows_seg(feats, self.cfg.out_points());
        Ok(Embedding {
            per_point: g.value(feats).clone(),
            pooled: g.value(pooled).data().to_vec(),
        })
    }
}

/// Seed for encoder-side FPS: the lexicographically smallest point, ties by
/// lowest row index. A pure function of geometry, which keeps centroid
/// selection invariant under row permutations.
fn lexicographic_min_index(positions: &[Vec3]) -> usize {
    let mut best = 0;
    for (i, p) in positions.iter().enumerate().skip(1) {
        let b = positions[best];
        if (p[0], p[1], p[2]) < (b[0], b[1], b[2]) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(n: usize) -> PointConvConfig {
        PointConvConfig {
            n_points: n,
            k: 4,
            widths: vec![8, 8],
            weightnet_hidden: 6,
            embed: 8,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let positions = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.0..0.5),
                ]
            })
            .collect();
        let colors = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        PointCloud::new(positions, colors).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(16);
        cfg.n_points = 2; // below 2^layers
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(16);
        cfg.embed = 99;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_cloud_size_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = PointConvEncoder::new(&mut store, "pc", small_cfg(16), &mut rng).unwrap();
        let pc = random_cloud(&mut rng, 8);
        let mut g = Graph::new();
        assert!(enc.encode_batch(&mut g, &store, &[&pc], true).is_err());
    }

    #[test]
    fn permutation_leaves_pooled_embedding_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = PointConvEncoder::new(&mut store, "pc", small_cfg(16), &mut rng).unwrap();
        for trial in 0..20 {
            let pc = random_cloud(&mut rng, 16);
            // deterministic shuffle of rows
            let mut order: Vec<usize> = (0..16).collect();
            for i in (1..16).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let permuted = PointCloud::new(
                order.iter().map(|&i| pc.positions[i]).collect(),
                order.iter().map(|&i| pc.colors[i]).collect(),
            )
            .unwrap();
            let a = enc.encode_one(&store, &pc).unwrap().pooled;
            let b = enc.encode_one(&store, &permuted).unwrap().pooled;
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5, "trial {trial}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = PointConvEncoder::new(&mut store, "pc", small_cfg(16), &mut rng).unwrap();
        for key in store.keys().collect::<Vec<_>>() {
            let shape = store.tensor(key).shape().to_vec();
            store.set_value(key, Tensor::zeros(&shape));
        }
        let pc = random_cloud(&mut rng, 16);
        let emb = enc.encode_one(&store, &pc).unwrap();
        assert!(emb.pooled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_weightnet_reduces_to_uniform_mean() {
        // Zero the weight-net matrices and set its output bias to 1/k: the
        // aggregation becomes linear(mean of neighbor features).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = PointConvConfig {
            n_points: 8,
            k: 4,
            widths: vec![5],
            weightnet_hidden: 6,
            embed: 5,
        };
        let enc = PointConvEncoder::new(&mut store, "pc", cfg.clone(), &mut rng).unwrap();
        let zero = |store: &mut ParamStore, name: &str| {
            let key = store.key(name).unwrap();
            let shape = store.tensor(key).shape().to_vec();
            store.set_value(key, Tensor::zeros(&shape));
        };
        zero(&mut store, "pc.l0.wnet_in.w");
        zero(&mut store, "pc.l0.wnet_in.b");
        zero(&mut store, "pc.l0.wnet_out.w");
        let bkey = store.key("pc.l0.wnet_out.b").unwrap();
        store.set_value(bkey, Tensor::full(&[6], 0.25)); // 1/k

        // all points at the same location: offsets are all zero anyway, and
        // every neighborhood holds identical features
        let pc = PointCloud::new(
            vec![[0.1, 0.2, 0.3]; 8],
            vec![[0.6, 0.2, 0.8]; 8],
        )
        .unwrap();
        let emb = enc.encode_one(&store, &pc).unwrap();

        // expected: silu(layernorm(proj(mean_features))) with mean = the
        // shared 6-d feature row
        let mut g = Graph::new();
        let feat = g.constant(Tensor::from_rows(1, 6, vec![0.1, 0.2, 0.3, 0.6, 0.2, 0.8]));
        let pkey = store.key("pc.l0.proj.w").unwrap();
        let bkey = store.key("pc.l0.proj.b").unwrap();
        let w = g.constant(store.tensor(pkey).clone());
        let b = g.constant(store.tensor(bkey).clone());
        let lin = g.linear(feat, w, b);
        let sc = g.constant(store.tensor(store.key("pc.l0.ln.scale").unwrap()).clone());
        let sh = g.constant(store.tensor(store.key("pc.l0.ln.shift").unwrap()).clone());
        let ln = g.layer_norm_rows(lin, sc, sh);
        let want = g.silu(ln);
        for (a, b) in emb.pooled.iter().zip(g.value(want).data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn wnet_hidden_1_matches_hand_computation() {
        // 1 centroid (one halving of 2 points), k=2, weight-net with a
        // single hidden unit, 2-wide output layer.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = PointConvConfig {
            n_points: 2,
            k: 2,
            widths: vec![2],
            weightnet_hidden: 1,
            embed: 2,
        };
        let enc = PointConvEncoder::new(&mut store, "pc", cfg, &mut rng).unwrap();
        let set = |store: &mut ParamStore, name: &str, vals: Vec<f64>| {
            let key = store.key(name).unwrap();
            let shape = store.tensor(key).shape().to_vec();
            store.set_value(key, Tensor::new(shape, vals));
        };
        let wnet_w = [0.5, -0.3, 0.2];
        let wnet_out_w = [1.0, -0.5, 0.3, 0.7, -0.2, 0.4]; // 1x6
        let wnet_out_b = [0.05, 0.1, -0.1, 0.2, 0.0, -0.05];
        let proj_w = [
            0.3, -0.4, 0.5, 0.6, -0.7, 0.8, // column pairs row-major 6x2
            -0.2, 0.1, 0.9, -0.6, 0.4, 0.2,
        ];
        // proj.w is 6x2 row-major: rows are input features
        let proj_rows: Vec<f64> = (0..6)
            .flat_map(|i| vec![proj_w[i], proj_w[6 + i]])
            .collect();
        set(&mut store, "pc.l0.wnet_in.w", wnet_w.to_vec());
        set(&mut store, "pc.l0.wnet_in.b", vec![0.1]);
        set(&mut store, "pc.l0.wnet_out.w", wnet_out_w.to_vec());
        set(&mut store, "pc.l0.wnet_out.b", wnet_out_b.to_vec());
        set(&mut store, "pc.l0.proj.w", proj_rows);
        set(&mut store, "pc.l0.proj.b", vec![0.01, -0.02]);

        let p0 = [0.0, 0.0, 0.0];
        let p1 = [0.1, -0.2, 0.3];
        let pc = PointCloud::new(vec![p0, p1], vec![[0.9, 0.5, 0.1], [0.2, 0.8, 0.6]]).unwrap();
        let emb = enc.encode_one(&store, &pc).unwrap();

        // hand evaluation: centroid = p0 (lexicographic min), neighbors p0, p1
        let silu = |x: f64| x / (1.0 + (-x).exp());
        let f = [[0.0, 0.0, 0.0, 0.9, 0.5, 0.1], [0.1, -0.2, 0.3, 0.2, 0.8, 0.6]];
        let offs = [[0.0, 0.0, 0.0], [0.1, -0.2, 0.3]];
        let mut acc = [0.0f64; 6];
        for (o, feat) in offs.iter().zip(&f) {
            let h = silu(o[0] * wnet_w[0] + o[1] * wnet_w[1] + o[2] * wnet_w[2] + 0.1);
            for c in 0..6 {
                acc[c] += (h * wnet_out_w[c] + wnet_out_b[c]) * feat[c];
            }
        }
        let lin = [
            acc.iter().zip(&proj_w[0..6]).map(|(a, w)| a * w).sum::<f64>() + 0.01,
            acc.iter().zip(&proj_w[6..12]).map(|(a, w)| a * w).sum::<f64>() - 0.02,
        ];
        // layer norm over the 2 features, scale 1 shift 0
        let mean = (lin[0] + lin[1]) / 2.0;
        let var = ((lin[0] - mean).powi(2) + (lin[1] - mean).powi(2)) / 2.0;
        let s = (var + 1e-5).sqrt();
        let want = [silu((lin[0] - mean) / s), silu((lin[1] - mean) / s)];
        for (a, b) in emb.pooled.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
