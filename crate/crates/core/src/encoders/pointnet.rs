//! PointNet baseline: a shared per-point MLP followed by max pooling.
//! Exactly permutation invariant.

use rand::Rng;

use crate::diffmath::{DiffError, Graph, Linear, ParamStore, Tensor, Var};
use crate::pointcloud::PointCloud;

#[derive(Clone, Debug)]
pub struct PointNetConfig {
    pub n_points: usize,
    pub hidden: usize,
    pub embed: usize,
}

pub struct PointNetEncoder {
    pub cfg: PointNetConfig,
    l1: Linear,
    l2: Linear,
}

impl PointNetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: PointNetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), 6, cfg.hidden, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), cfg.hidden, cfg.embed, rng);
        PointNetEncoder { cfg, l1, l2 }
    }

    /// Pooled embeddings for a batch of equally sized clouds: [B, d].
    pub fn encode_batch(
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
        let mut rows = Vec::with_capacity(clouds.len() * n * 6);
        for pc in clouds {
            rows.extend(pc.features());
        }
        let x = g.constant(Tensor::from_rows(clouds.len() * n, 6, rows));
        let h = if frozen {
            self.l1.forward_frozen(g, store, x)
        } else {
            self.l1.forward(g, store, x)
        };
        let h = g.silu(h);
        let f = if frozen {
            self.l2.forward_frozen(g, store, h)
        } else {
            self.l2.forward(g, store, h)
        };
        Ok(g.max_rows_seg(f, n))
    }

    /// Single-cloud embedding values.
    pub fn encode_one(&self, store: &ParamStore, pc: &PointCloud) -> Result<Vec<f64>, DiffError> {
        let mut g = Graph::new();
        let v = self.encode_batch(&mut g, store, &[pc], true)?;
        Ok(g.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(n: usize) -> (ParamStore, PointNetEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let e = PointNetEncoder::new(
            &mut store,
            "pn",
            PointNetConfig {
                n_points: n,
                hidden: 7,
                embed: 5,
            },
            &mut rng,
        );
        (store, e)
    }

    #[test]
    fn permutation_exactly_invariant() {
        let (store, e) = enc(6);
        let pc = PointCloud::new(
            (0..6).map(|i| [i as f64 * 0.1, -0.2, 0.3]).collect(),
            (0..6).map(|i| [0.1 * i as f64, 0.5, 0.9]).collect(),
        )
        .unwrap();
        let rev = PointCloud::new(
            pc.positions.iter().rev().copied().collect(),
            pc.colors.iter().rev().copied().collect(),
        )
        .unwrap();
        assert_eq!(e.encode_one(&store, &pc).unwrap(), e.encode_one(&store, &rev).unwrap());
    }

    #[test]
    fn repeated_point_matches_single() {
        let (store, e6) = enc(6);
        let p = [0.3, -0.1, 0.2];
        let c = [0.9, 0.2, 0.4];
        let many = PointCloud::new(vec![p; 6], vec![c; 6]).unwrap();
        let a = e6.encode_one(&store, &many).unwrap();
        // same weights, n=1 variant
        let e1 = PointNetEncoder {
            cfg: PointNetConfig {
                n_points: 1,
                hidden: 7,
                embed: 5,
            },
            l1: e6.l1,
            l2: e6.l2,
        };
        let one = PointCloud::new(vec![p], vec![c]).unwrap();
        let b = e1.encode_one(&store, &one).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_point_two_unit_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = PointNetEncoder::new(
            &mut store,
            "pn",
            PointNetConfig {
                n_points: 2,
                hidden: 2,
                embed: 2,
            },
            &mut rng,
        );
        let set = |store: &mut ParamStore, name: &str, vals: Vec<f64>| {
            let key = store.key(name).unwrap();
            let shape = store.tensor(key).shape().to_vec();
            store.set_value(key, crate::diffmath::Tensor::new(shape, vals));
        };
        // 6x2 weights, row-major
        set(
            &mut store,
            "pn.l1.w",
            vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, -1.0, 0.2, 0.1],
        );
        set(&mut store, "pn.l1.b", vec![0.05, -0.05]);
        set(&mut store, "pn.l2.w", vec![1.0, 0.5, -0.5, 0.25]);
        set(&mut store, "pn.l2.b", vec![0.0, 0.1]);

        let rows = [
            [0.2f64, 0.1, 0.0, 0.9, 0.1, 0.1],
            [-0.1, 0.3, 0.2, 0.2, 0.8, 0.3],
        ];
        let pc = PointCloud::new(
            vec![[rows[0][0], rows[0][1], rows[0][2]], [rows[1][0], rows[1][1], rows[1][2]]],
            vec![[rows[0][3], rows[0][4], rows[0][5]], [rows[1][3], rows[1][4], rows[1][5]]],
        )
        .unwrap();
        let got = e.encode_one(&store, &pc).unwrap();

        let silu = |x: f64| x / (1.0 + (-x).exp());
        let w1 = [
            [0.1, -0.2],
            [0.3, 0.4],
            [-0.5, 0.6],
            [0.7, -0.8],
            [0.9, -1.0],
            [0.2, 0.1],
        ];
        let mut per_point = Vec::new();
        for r in &rows {
            let mut h = [0.05, -0.05];
            for (i, v) in r.iter().enumerate() {
                h[0] += v * w1[i][0];
                h[1] += v * w1[i][1];
            }
            let h = [silu(h[0]), silu(h[1])];
            per_point.push([
                h[0] * 1.0 + h[1] * -0.5,
                h[0] * 0.5 + h[1] * 0.25 + 0.1,
            ]);
        }
        let want = [
            per_point[0][0].max(per_point[1][0]),
            per_point[0][1].max(per_point[1][1]),
        ];
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
