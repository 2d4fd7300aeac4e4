//! Straight-line reference implementations and fixtures shared by the
//! integration tests. Nothing here touches the autodiff graph: every
//! oracle is a direct loop over plain `Vec`s.

#![allow(dead_code)]

use dmsconv::autodiff::{Graph, Segments, Var};
use dmsconv::dynamic::{DkConv, MultiScaleDk};
use dmsconv::nn::{Ctx, Init, Mode, ParamId, ParamStore};
use dmsconv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

/// Epsilon of the library's guarded `sqrt` and divisions.
pub const EPS: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(r)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let cols = m[0].len();
    Tensor::new(vec![m.len(), cols], m.concat()).unwrap()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn guard(d: f64) -> f64 {
    if d >= 0.0 {
        d + EPS
    } else {
        d - EPS
    }
}

/// `y[o][t] = b[o] + Σ_i Σ_k w[o][i][k] · x[i][t + k·d − pad]`, zero outside.
pub fn conv_oracle(x: &Mat, w: &Tensor, bias: &[f64], dilation: usize) -> Mat {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_len = x[0].len() as isize;
    let pad = ((k - 1) * dilation / 2) as isize;
    let wd = w.data();
    let mut y = vec![vec![0.0; t_len as usize]; c_out];
    for o in 0..c_out {
        for t in 0..t_len {
            let mut acc = bias[o];
            for i in 0..c_in {
                for kk in 0..k {
                    let src = t + (kk * dilation) as isize - pad;
                    if src >= 0 && src < t_len {
                        acc += wd[(o * c_in + i) * k + kk] * x[i][src as usize];
                    }
                }
            }
            y[o][t as usize] = acc;
        }
    }
    y
}

/// Mean, `sqrt(m2 + ε)`, `m3 / σ³` and `m4 / σ⁴ − 3` of one row.
pub fn hosp_oracle(row: &[f64]) -> [f64; 4] {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in row {
        let d = v - mu;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let sigma = (m2 + EPS).sqrt();
    let skew = m3 / guard(sigma.powi(3));
    let kurt = m4 / guard(sigma.powi(4)) - 3.0;
    [mu, sigma, skew, kurt]
}

/// Parameters of a dynamic kernel convolution copied out of a store.
pub struct DkParams {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
    /// `[4C × C/r]`.
    pub v: Tensor,
    pub b: Vec<f64>,
    /// `[C/r × C]` each.
    pub w: [Tensor; 2],
    pub n: [Vec<f64>; 2],
}

impl DkParams {
    pub fn of(dk: &DkConv, store: &ParamStore) -> Self {
        let get = |id: ParamId| store.get(id).clone();
        let vec = |id: ParamId| store.get(id).data().to_vec();
        DkParams {
            w1: get(dk.branches[0].weight),
            b1: vec(dk.branches[0].bias),
            w2: get(dk.branches[1].weight),
            b2: vec(dk.branches[1].bias),
            v: get(dk.squeeze),
            b: vec(dk.squeeze_bias),
            w: [get(dk.excite[0]), get(dk.excite[1])],
            n: [vec(dk.excite_bias[0]), vec(dk.excite_bias[1])],
        }
    }
}

/// Output and branch-1 attention weight of a dynamic kernel convolution
/// on a single segment, written out step by step.
pub fn dk_oracle(x: &Mat, p: &DkParams) -> (Mat, Vec<f64>) {
    let h1 = conv_oracle(x, &p.w1, &p.b1, 1);
    let h2 = conv_oracle(x, &p.w2, &p.b2, 2);
    let c = h1.len();
    let t_len = h1[0].len();
    let sum: Mat = (0..c)
        .map(|i| (0..t_len).map(|t| h1[i][t] + h2[i][t]).collect())
        .collect();
    let stats: Vec<[f64; 4]> = sum.iter().map(|r| hosp_oracle(r)).collect();
    let mut pooled = Vec::with_capacity(4 * c);
    for k in 0..4 {
        for s in &stats {
            pooled.push(s[k]);
        }
    }
    let hidden = p.v.shape()[1];
    let vd = p.v.data();
    let z: Vec<f64> = (0..hidden)
        .map(|j| {
            p.b[j]
                + (0..4 * c)
                    .map(|i| vd[i * hidden + j] * pooled[i])
                    .sum::<f64>()
        })
        .collect();
    let logits: Vec<Vec<f64>> = (0..2)
        .map(|br| {
            let wd = p.w[br].data();
            (0..c)
                .map(|ch| p.n[br][ch] + (0..hidden).map(|j| wd[j * c + ch] * z[j]).sum::<f64>())
                .collect()
        })
        .collect();
    let mut s1 = vec![0.0; c];
    let mut out = vec![vec![0.0; t_len]; c];
    for ch in 0..c {
        let m = logits[0][ch].max(logits[1][ch]);
        let e1 = (logits[0][ch] - m).exp();
        let e2 = (logits[1][ch] - m).exp();
        let a1 = e1 / (e1 + e2);
        let a2 = e2 / (e1 + e2);
        s1[ch] = a1;
        for t in 0..t_len {
            out[ch][t] = a1 * h1[ch][t] + a2 * h2[ch][t];
        }
    }
    (out, s1)
}

/// `Out₁ = X₁`, `Out₂ = F₂(X₂)`, `Out_i = F_i(Out_{i−1} + X_i)`, concatenated.
pub fn multiscale_oracle(x: &Mat, scales: usize, mut f: impl FnMut(usize, &Mat) -> Mat) -> Mat {
    let w = x.len() / scales;
    let group = |i: usize| -> Mat { x[i * w..(i + 1) * w].to_vec() };
    let mut outs: Vec<Mat> = vec![group(0)];
    for i in 1..scales {
        let xi = group(i);
        let input = if i == 1 {
            xi
        } else {
            let prev = &outs[i - 1];
            prev.iter()
                .zip(&xi)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
                .collect()
        };
        outs.push(f(i, &input));
    }
    outs.concat()
}

/// Channel-concatenates the taps and returns `[μ; sqrt(var + ε)]` with the
/// variance from a second pass around the mean.
pub fn pool_oracle(taps: &[Mat]) -> Vec<f64> {
    let rows: Vec<&Vec<f64>> = taps.iter().flatten().collect();
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for r in rows {
        let n = r.len() as f64;
        let m = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mu.push(m);
        sigma.push((var + EPS).sqrt());
    }
    mu.extend(sigma);
    mu
}

/// Splits packed columns `[C × ΣT]` into one matrix per segment.
pub fn split_segments(x: &Mat, lens: &[usize]) -> Vec<Mat> {
    let mut off = 0;
    lens.iter()
        .map(|&l| {
            let m = x.iter().map(|r| r[off..off + l].to_vec()).collect();
            off += l;
            m
        })
        .collect()
}

pub fn concat_segments(parts: &[Mat]) -> Mat {
    let rows = parts[0].len();
    (0..rows)
        .map(|r| parts.iter().flat_map(|p| p[r].iter().copied()).collect())
        .collect()
}

/// Overwrites every tensor in `store` with N(0, scale²) draws.
pub fn randomize(store: &mut ParamStore, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let z: f64 = StandardNormal.sample(r);
            *v = scale * z;
        }
    }
}

/// A dynamic kernel convolution with every parameter drawn at random.
pub fn random_dk(c_in: usize, c_out: usize, reduction: usize, seed: u64) -> (DkConv, ParamStore) {
    let mut store = ParamStore::new();
    let mut init_rng = dmsconv::rng::stream(seed, "test-dk", 0);
    let dk = {
        let mut init = Init::new(&mut store, &mut init_rng);
        DkConv::new(&mut init, "dk", "", c_in, c_out, 3, reduction).unwrap()
    };
    randomize(&mut store, &mut rng(seed ^ 0xd1), 0.5);
    (dk, store)
}

pub fn random_ms(
    width: usize,
    scales: usize,
    reduction: usize,
    seed: u64,
) -> (MultiScaleDk, ParamStore) {
    let mut store = ParamStore::new();
    let mut init_rng = dmsconv::rng::stream(seed, "test-ms", 0);
    let ms = {
        let mut init = Init::new(&mut store, &mut init_rng);
        MultiScaleDk::new(&mut init, "ms", "", width, scales, 3, reduction).unwrap()
    };
    randomize(&mut store, &mut rng(seed ^ 0x35), 0.5);
    (ms, store)
}

/// Runs `f` on a fresh graph with `store` bound in training mode and
/// returns the value of its output.
pub fn run<F>(store: &ParamStore, x: &Tensor, f: F) -> Tensor
where
    F: FnOnce(&mut Ctx, Var) -> dmsconv::Result<Var>,
{
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut cx = Ctx::new(&mut g, vars, Mode::Train);
    let xv = cx.graph.constant(x.clone());
    let out = f(&mut cx, xv).unwrap();
    cx.graph.value(out).clone()
}

/// Random segment lengths in `lo..=hi`.
pub fn random_lens(r: &mut ChaCha8Rng, count: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..count).map(|_| r.random_range(lo..=hi)).collect()
}

pub fn segs(lens: &[usize]) -> Segments {
    Segments::new(lens).unwrap()
}

/// Gradient-check inputs for every entry of `store` (buffers held constant)
/// followed by `x`.
pub fn grad_inputs(store: &ParamStore, x: Tensor) -> Vec<dmsconv::gradcheck::GradInput> {
    use dmsconv::gradcheck::GradInput;
    use dmsconv::nn::ParamKind;
    store
        .entries()
        .iter()
        .map(|e| match e.kind {
            ParamKind::Trainable => GradInput::new(e.name.clone(), e.tensor.clone()),
            ParamKind::Buffer => GradInput::constant(e.name.clone(), e.tensor.clone()),
        })
        .chain([GradInput::new("x", x)])
        .collect()
}

/// Recomputes the trailing CRC32 after a deliberate edit.
pub fn reseal(bytes: &mut Vec<u8>) {
    let body = bytes.len() - 4;
    let crc = crc32(&bytes[..body]);
    bytes.truncate(body);
    bytes.extend_from_slice(&crc.to_le_bytes());
}

/// Bitwise CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in data {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

/// Perturbs every tensor of `model` a little, keeping running variances
/// positive, so a round trip cannot pass on initial values alone.
pub fn trained_looking(model: &mut dmsconv::Model, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let variance = model.params.entry(id).name.ends_with("running_var");
        let t = model.params.get_mut(id);
        let noise = randn(&mut r, t.shape());
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v *= 1.0 + 0.1 * n.tanh();
            if !variance {
                *v += 0.01 * n;
            }
        }
    }
}
