//! Host-side reference implementations shared by the integration tests.
//! Everything here is plain f64 loops, independent of the tensor code.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use candle_nn::Linear;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use lanedet::model::attention::MultiHeadAttention;
use lanedet::model::deformable::DeformableLaneAttention;
use lanedet::model::params::{LayerNorm, ParamStore};

pub type Mat = Vec<Vec<f64>>;

pub fn host1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32).collect();
    Tensor::from_vec(v, shape, &candle_core::Device::Cpu).unwrap()
}

/// Overwrites every parameter with uniform noise of the given scale.
pub fn randomize(params: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let data = params.varmap().data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let t = random_tensor(rng, var.as_tensor().dims(), scale);
        var.set(&t).unwrap();
    }
}

pub struct HostLinear {
    /// `[out][in]`
    pub w: Mat,
    pub b: Vec<f64>,
}

impl HostLinear {
    pub fn of(l: &Linear) -> Self {
        let (o, i) = l.weight().dims2().unwrap();
        let flat = host1(l.weight());
        Self {
            w: (0..o).map(|r| flat[r * i..(r + 1) * i].to_vec()).collect(),
            b: l.bias().map(host1).unwrap_or_else(|| vec![0.0; o]),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

pub fn host_layer_norm(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let (w, b) = (host1(ln.weight()), host1(ln.bias()));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + LayerNorm::EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / denom * w[i] + b[i])
        .collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head attention of every query over every key, with `allowed(q, k)`
/// masking out pairs (masked scores are -inf before the softmax).
pub fn masked_attention(
    mha: &MultiHeadAttention,
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    allowed: impl Fn(usize, usize) -> bool,
) -> Mat {
    let (qp, kp, vp, op) = (
        HostLinear::of(&mha.q_proj),
        HostLinear::of(&mha.k_proj),
        HostLinear::of(&mha.v_proj),
        HostLinear::of(&mha.out_proj),
    );
    let c = queries[0].len();
    let heads = mha.heads();
    let d = c / heads;
    let q: Mat = queries.iter().map(|x| qp.apply(x)).collect();
    let k: Mat = keys.iter().map(|x| kp.apply(x)).collect();
    let v: Mat = keys.iter().map(|x| vp.apply(x)).collect();
    q.iter()
        .enumerate()
        .map(|(qi, qv)| {
            let mut mixed = vec![0.0; c];
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let scores: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(ki, kv)| {
                        if allowed(qi, ki) {
                            qv[r.clone()].iter().zip(&kv[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (d as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let w = softmax(&scores);
                for (ki, wk) in w.iter().enumerate() {
                    for j in r.clone() {
                        mixed[j] += wk * v[ki][j];
                    }
                }
            }
            op.apply(&mixed)
        })
        .collect()
}

pub fn residual_norm(q: &[f64], mixed: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let s: Vec<f64> = q.iter().zip(mixed).map(|(a, b)| a + b).collect();
    host_layer_norm(&s, ln)
}

/// Row-sliced view helpers for `[B, H, K, C]` / `[B, Hf, Wf, C]` tensors.
pub fn rows4(t: &Tensor) -> (Vec<f64>, [usize; 4]) {
    let (a, b, c, d) = t.dims4().unwrap();
    (host1(t), [a, b, c, d])
}

pub fn at4(data: &[f64], s: [usize; 4], i: usize, j: usize, k: usize) -> Vec<f64> {
    let base = ((i * s[1] + j) * s[2] + k) * s[3];
    data[base..base + s[3]].to_vec()
}

/// Naive deformable attention (before residual and norm) for one batch.
/// `refs[b][i][k] = (x, y)` in feature cells.
pub fn deformable_oracle(
    lpa: &DeformableLaneAttention,
    query: &Tensor,
    features: &Tensor,
    refs: &Tensor,
) -> Vec<f64> {
    let (q, qs) = rows4(query);
    let (f, fs) = rows4(features);
    let (r, rs) = rows4(refs);
    let [b, h, k, c] = qs;
    let (fh, fw) = (fs[1], fs[2]);
    let heads = lpa.heads();
    let m = lpa.points();
    let d = c / heads;
    let (vp, offp, wp, op) = (
        HostLinear::of(&lpa.value_proj),
        HostLinear::of(&lpa.offset_proj),
        HostLinear::of(&lpa.weight_proj),
        HostLinear::of(&lpa.out_proj),
    );
    let mut out = Vec::with_capacity(b * h * k * c);
    for bi in 0..b {
        let value: Vec<Vec<Vec<f64>>> = (0..fh)
            .map(|y| (0..fw).map(|x| vp.apply(&at4(&f, fs, bi, y, x))).collect())
            .collect();
        for i in 0..h {
            for a in 0..k {
                let qv = at4(&q, qs, bi, i, a);
                let rv = at4(&r, rs, bi, i, a);
                let offs = offp.apply(&qv);
                let logits = wp.apply(&qv);
                let mut mixed = vec![0.0; c];
                for hd in 0..heads {
                    let w = softmax(&logits[hd * m..(hd + 1) * m]);
                    for p in 0..m {
                        let o = (hd * m + p) * 2;
                        let x = (rv[0] + offs[o]).clamp(0.0, (fw - 1) as f64);
                        let y = (rv[1] + offs[o + 1]).clamp(0.0, (fh - 1) as f64);
                        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
                        let (tx, ty) = (x - x0 as f64, y - y0 as f64);
                        for j in hd * d..(hd + 1) * d {
                            let s = value[y0][x0][j] * (1.0 - tx) * (1.0 - ty)
                                + value[y0][x1][j] * tx * (1.0 - ty)
                                + value[y1][x0][j] * (1.0 - tx) * ty
                                + value[y1][x1][j] * tx * ty;
                            mixed[j] += w[p] * s;
                        }
                    }
                }
                out.extend(op.apply(&mixed));
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Minimum total cost over all injective maps rows -> columns.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; cols])
}

pub mod gradcheck {
    //! Central finite differences in f64 against candle's f32 backward pass
    //! for the summed two-stage loss, with assignments held fixed.

    use candle_core::{DType, Device, Tensor, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use lanedet::geometry::{init_anchor_centers, sample_y_grid, Lane};
    use lanedet::losses::tensor::{stage_loss, StageTargets};
    use lanedet::losses::LossConfig;
    use lanedet::matching::Assignment;
    use lanedet::model::predictor::AnchorGeometry;
    use lanedet::train::assign;

    const B: usize = 2;
    const K: usize = 4;
    const N: usize = 8;
    const W: f64 = 100.0;
    const H: f64 = 50.0;
    const STEP: f64 = 1e-5;

    pub struct Instance {
        geometry: AnchorGeometry,
        /// Per stage: angle logits `[B, K]`, offsets `[B, K, N]`, score logits `[B, K]`.
        inputs: Vec<[Vec<f64>; 3]>,
        targets: Vec<StageTargets>,
        cfg: LossConfig,
    }

    fn shape(slot: usize) -> Vec<usize> {
        match slot {
            1 => vec![B, K, N],
            _ => vec![B, K],
        }
    }

    fn tensor(v: &[f64], slot: usize, dtype: DType) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape(slot), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn random_gt(rng: &mut ChaCha8Rng) -> Lane {
        let start = rng.random_range(0..N / 2);
        let x0 = rng.random_range(15.0..85.0);
        let slope = rng.random_range(-3.0..3.0);
        let xs = (0..N).map(|i| x0 + slope * i as f64).collect();
        let valid = (0..N).map(|i| i >= start).collect();
        Lane::new(xs, valid).unwrap()
    }

    impl Instance {
        pub fn random(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = sample_y_grid(N, H).unwrap();
            let centers = init_anchor_centers(K, W).unwrap();
            let geometry = AnchorGeometry::new(&centers, grid.ys(), 0.6 * H, W).unwrap();
            let gts: Vec<Vec<Lane>> = (0..B)
                .map(|_| (0..rng.random_range(1..=3)).map(|_| random_gt(&mut rng)).collect())
                .collect();
            let cfg = LossConfig::default();
            loop {
                let inputs: Vec<[Vec<f64>; 3]> = (0..2)
                    .map(|_| {
                        [
                            (0..B * K).map(|_| rng.random_range(-1.5..1.5)).collect(),
                            (0..B * K * N).map(|_| rng.random_range(-20.0..20.0)).collect(),
                            (0..B * K).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        ]
                    })
                    .collect();
                let mut targets = Vec::new();
                let mut near_kink = false;
                for stage in &inputs {
                    let xs = geometry
                        .compose(&tensor(&stage[0], 0, DType::F64), &tensor(&stage[1], 1, DType::F64))
                        .unwrap()
                        .to_vec3::<f64>()
                        .unwrap();
                    let assignments: Vec<Assignment> = (0..B)
                        .map(|b| {
                            let preds: Vec<Lane> = (0..K)
                                .map(|k| {
                                    let s = 1.0 / (1.0 + (-stage[2][b * K + k]).exp());
                                    Lane::from_xs(xs[b][k].clone()).with_score(s)
                                })
                                .collect();
                            assign(&preds, &gts[b], W).unwrap()
                        })
                        .collect();
                    for (b, a) in assignments.iter().enumerate() {
                        for &(g, p) in &a.pairs {
                            for (i, x) in gts[b][g].valid_points() {
                                near_kink |= (xs[b][p][i] - x).abs() < 1e-2;
                            }
                        }
                    }
                    let refs: Vec<&[Lane]> = gts.iter().map(|g| g.as_slice()).collect();
                    targets.push(StageTargets::new(&assignments, &refs, K, N).unwrap());
                }
                if !near_kink {
                    return Self {
                        geometry,
                        inputs,
                        targets,
                        cfg,
                    };
                }
            }
        }

        fn loss(&self, tensors: &[[Tensor; 3]]) -> Tensor {
            let mut total: Option<Tensor> = None;
            for (stage, t) in tensors.iter().zip(&self.targets) {
                let xs = self.geometry.compose(&stage[0], &stage[1]).unwrap();
                let l = stage_loss(&xs, &stage[2], t, W, &self.cfg).unwrap().total;
                total = Some(match total {
                    None => l,
                    Some(s) => (s + l).unwrap(),
                });
            }
            total.unwrap()
        }

        fn loss_f64(&self, inputs: &[[Vec<f64>; 3]]) -> f64 {
            let tensors: Vec<[Tensor; 3]> = inputs
                .iter()
                .map(|s| std::array::from_fn(|slot| tensor(&s[slot], slot, DType::F64)))
                .collect();
            self.loss(&tensors).to_scalar::<f64>().unwrap()
        }

        /// Largest per-tensor relative error `|g - g_fd| / |g_fd|` (L2 norms)
        /// over angle logits, offsets and score logits of both stages.
        pub fn max_relative_error(&self) -> f64 {
            let vars: Vec<[Var; 3]> = self
                .inputs
                .iter()
                .map(|s| std::array::from_fn(|slot| Var::from_tensor(&tensor(&s[slot], slot, DType::F32)).unwrap()))
                .collect();
            let tensors: Vec<[Tensor; 3]> = vars
                .iter()
                .map(|s| std::array::from_fn(|slot| s[slot].as_tensor().clone()))
                .collect();
            let grads = self.loss(&tensors).backward().unwrap();

            let mut worst: f64 = 0.0;
            for (si, stage) in self.inputs.iter().enumerate() {
                for slot in 0..3 {
                    let analytic: Vec<f64> = grads
                        .get(vars[si][slot].as_tensor())
                        .map(|g| super::host1(g))
                        .unwrap_or_else(|| vec![0.0; stage[slot].len()]);
                    let mut fd = Vec::with_capacity(stage[slot].len());
                    for e in 0..stage[slot].len() {
                        let mut plus = self.inputs.clone();
                        let mut minus = self.inputs.clone();
                        plus[si][slot][e] += STEP;
                        minus[si][slot][e] -= STEP;
                        fd.push((self.loss_f64(&plus) - self.loss_f64(&minus)) / (2.0 * STEP));
                    }
                    let diff: f64 = analytic.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
                    let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
                    worst = worst.max(if norm > 0.0 { diff / norm } else { diff });
                }
            }
            worst
        }
    }
}
