//! Independent f64 reference implementations of every differentiable op, plus a
//! central-difference gradient checker that compares them against the tape.
//! Nothing here calls into the crate's kernels.

#![allow(dead_code)]

use octofunc::numerics::{Graph, NodeId, Rng, SeedStream, Tensor};

pub type Mat = (Vec<usize>, Vec<f64>);

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / c.max(1), c)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = rows_cols(&a.0);
    let (_, n) = rows_cols(&b.0);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.1[i * k + p] * b.1[p * n + j];
            }
        }
    }
    (vec![m, n], out)
}

pub fn transpose(a: &Mat) -> Mat {
    let (r, c) = rows_cols(&a.0);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.1[i * c + j];
        }
    }
    (vec![c, r], out)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    let (_, c) = rows_cols(&a.0);
    let out =
        a.1.iter()
            .enumerate()
            .map(|(i, x)| x + b.1[if b.1.len() == a.1.len() { i } else { i % c }])
            .collect();
    (a.0.clone(), out)
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    (a.0.clone(), a.1.iter().map(|&x| f(x)).collect())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let (r, c) = rows_cols(&a.0);
    let mut out = a.1.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - m).exp() / s);
    }
    (a.0.clone(), out)
}

pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let (r, c) = rows_cols(&x.0);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x.1[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g.1[j] + b.1[j];
        }
    }
    (x.0.clone(), out)
}

pub fn l2_normalize_rows(x: &Mat) -> Mat {
    let (r, c) = rows_cols(&x.0);
    let mut out = x.1.clone();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    (x.0.clone(), out)
}

pub fn mean_rows(x: &Mat, segments: &[usize]) -> Mat {
    let (_, c) = rows_cols(&x.0);
    let mut out = Vec::new();
    let mut off = 0;
    for &len in segments {
        for j in 0..c {
            out.push((off..off + len).map(|i| x.1[i * c + j]).sum::<f64>() / len as f64);
        }
        off += len;
    }
    (vec![segments.len(), c], out)
}

pub fn gather_rows(x: &Mat, idx: &[usize]) -> Mat {
    let (_, c) = rows_cols(&x.0);
    let out = idx
        .iter()
        .flat_map(|&i| x.1[i * c..(i + 1) * c].to_vec())
        .collect();
    (vec![idx.len(), c], out)
}

pub fn concat_rows(parts: &[Mat]) -> Mat {
    let c = rows_cols(&parts[0].0).1;
    let data: Vec<f64> = parts.iter().flat_map(|p| p.1.clone()).collect();
    (vec![data.len() / c, c], data)
}

pub fn attention(q: &Mat, k: &Mat, v: &Mat, segments: &[usize], heads: usize, causal: bool) -> Mat {
    let (_, d) = rows_cols(&q.0);
    let dh = d / heads;
    let mut out = vec![0.0; q.1.len()];
    let mut off = 0;
    for &len in segments {
        for h in 0..heads {
            for i in 0..len {
                let lim = if causal { i + 1 } else { len };
                let scores: Vec<f64> = (0..lim)
                    .map(|j| {
                        (0..dh)
                            .map(|t| {
                                q.1[(off + i) * d + h * dh + t] * k.1[(off + j) * d + h * dh + t]
                            })
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - m).exp() / z;
                    for t in 0..dh {
                        out[(off + i) * d + h * dh + t] += p * v.1[(off + j) * d + h * dh + t];
                    }
                }
            }
        }
        off += len;
    }
    (q.0.clone(), out)
}

pub fn cross_entropy(logits: &Mat, targets: &[usize], weights: &[f64], denom: f64) -> f64 {
    let (r, c) = rows_cols(&logits.0);
    let mut loss = 0.0;
    for i in 0..r {
        let row = &logits.1[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += weights[i] * (lse - row[targets[i]]);
    }
    loss / denom
}

// ---------------------------------------------------------------------------

pub fn random_mat(rng: &mut Rng, shape: &[usize], scale: f32) -> Mat {
    let n = shape.iter().product();
    (
        shape.to_vec(),
        (0..n).map(|_| f64::from(rng.normal() * scale)).collect(),
    )
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::new(&m.0, m.1.iter().map(|&x| x as f32).collect()).unwrap()
}

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct CheckResult {
    pub op: &'static str,
    pub shape_desc: String,
    pub worst_rel_err: f64,
    pub forward_err: f64,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Checks `build` (tape, f32) against `reference` (f64) on `inputs`.
///
/// The scalar objective is `Σ r_i · y_i` for a fixed random `r`, so every output
/// element contributes. Input gradients are compared to central differences of
/// the f64 reference with step `h = 1e-3`.
pub fn check<B, R>(
    op: &'static str,
    rng: &mut Rng,
    inputs: &[Mat],
    build: B,
    reference: R,
) -> CheckResult
where
    B: Fn(&mut Graph, &[NodeId]) -> NodeId,
    R: Fn(&[Mat]) -> Mat,
{
    let out_ref = reference(inputs);
    let weights: Vec<f64> = (0..out_ref.1.len())
        .map(|_| f64::from(rng.normal()))
        .collect();
    let objective = |xs: &[Mat]| -> f64 {
        reference(xs)
            .1
            .iter()
            .zip(&weights)
            .map(|(y, r)| y * r)
            .sum()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| g.input(to_tensor(m))).collect();
    let y = build(&mut g, &ids);
    let forward: Vec<f64> = g.value(y).data().iter().map(|&v| f64::from(v)).collect();
    let n = forward.len();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let r = g.constant(Tensor::new(&[n, 1], weights.iter().map(|&w| w as f32).collect()).unwrap());
    let loss = g.matmul(flat, r).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .of(ids[k])
            .unwrap()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let mut numeric = vec![0.0; input.1.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].1[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].1[i] -= h;
            *slot = (objective(&plus) - objective(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    CheckResult {
        op,
        shape_desc: inputs
            .iter()
            .map(|m| format!("{:?}", m.0))
            .collect::<Vec<_>>()
            .join(","),
        worst_rel_err: worst,
        forward_err: rel_err(&forward, &out_ref.1),
    }
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Runs every op kind on `trials` random shapes; returns all results.
pub fn run_all(trials: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = Rng::new(seed, SeedStream::Custom(77));
    let mut out = Vec::new();
    for _ in 0..trials {
        let (m, k, n) = (
            dim(&mut rng, 1, 5),
            dim(&mut rng, 1, 6),
            dim(&mut rng, 1, 5),
        );
        let a = random_mat(&mut rng, &[m, k], 1.0);
        let b = random_mat(&mut rng, &[k, n], 1.0);
        out.push(check(
            "matmul",
            &mut rng,
            &[a.clone(), b],
            |g, x| g.matmul(x[0], x[1]).unwrap(),
            |x| matmul(&x[0], &x[1]),
        ));

        let bt = random_mat(&mut rng, &[n, k], 1.0);
        out.push(check(
            "matmul_nt",
            &mut rng,
            &[a.clone(), bt],
            |g, x| g.matmul_nt(x[0], x[1]).unwrap(),
            |x| matmul(&x[0], &transpose(&x[1])),
        ));

        let a2 = random_mat(&mut rng, &[m, k], 1.0);
        out.push(check(
            "add",
            &mut rng,
            &[a.clone(), a2],
            |g, x| g.add(x[0], x[1]).unwrap(),
            |x| add(&x[0], &x[1]),
        ));
        let bias = random_mat(&mut rng, &[k], 1.0);
        out.push(check(
            "add_broadcast",
            &mut rng,
            &[a.clone(), bias],
            |g, x| g.add(x[0], x[1]).unwrap(),
            |x| add(&x[0], &x[1]),
        ));

        let s = random_mat(&mut rng, &[], 1.0);
        out.push(check(
            "mul_scalar",
            &mut rng,
            &[a.clone(), s],
            |g, x| g.mul_scalar(x[0], x[1]).unwrap(),
            |x| map(&x[0], |v| v * x[1].1[0]),
        ));
        out.push(check(
            "scale",
            &mut rng,
            &[a.clone()],
            |g, x| g.scale(x[0], -1.7),
            |x| map(&x[0], |v| -1.7 * v),
        ));
        out.push(check(
            "exp",
            &mut rng,
            &[a.clone()],
            |g, x| g.exp(x[0]),
            |x| map(&x[0], f64::exp),
        ));
        out.push(check(
            "gelu",
            &mut rng,
            &[a.clone()],
            |g, x| g.gelu(x[0]),
            |x| map(&x[0], gelu),
        ));
        out.push(check(
            "softmax_row",
            &mut rng,
            &[a.clone()],
            |g, x| g.softmax_row(x[0]),
            |x| softmax_rows(&x[0]),
        ));

        let wide = random_mat(&mut rng, &[m, k + 1], 1.0);
        let gamma = random_mat(&mut rng, &[k + 1], 1.0);
        let beta = random_mat(&mut rng, &[k + 1], 1.0);
        out.push(check(
            "layer_norm",
            &mut rng,
            &[wide, gamma, beta],
            |g, x| g.layer_norm(x[0], x[1], x[2]).unwrap(),
            |x| layer_norm(&x[0], &x[1], &x[2]),
        ));

        // a single column makes x/|x| a sign function whose gradient is pure f32 noise
        let wide = random_mat(&mut rng, &[m, k + 1], 1.0);
        out.push(check(
            "l2_normalize_rows",
            &mut rng,
            &[wide],
            |g, x| g.l2_normalize_rows(x[0]),
            |x| l2_normalize_rows(&x[0]),
        ));
        out.push(check(
            "transpose",
            &mut rng,
            &[a.clone()],
            |g, x| g.transpose(x[0]).unwrap(),
            |x| transpose(&x[0]),
        ));
        out.push(check(
            "reshape",
            &mut rng,
            &[a.clone()],
            |g, x| g.reshape(x[0], &[k, m]).unwrap(),
            |x| (vec![k, m], x[0].1.clone()),
        ));
        out.push(check(
            "sum",
            &mut rng,
            &[a.clone()],
            |g, x| g.sum(x[0]),
            |x| (vec![], vec![x[0].1.iter().sum()]),
        ));

        let vocab_rows = dim(&mut rng, 2, 7);
        let table = random_mat(&mut rng, &[vocab_rows, k], 1.0);
        let ids: Vec<usize> = (0..dim(&mut rng, 1, 6))
            .map(|_| rng.below(vocab_rows))
            .collect();
        let ids2 = ids.clone();
        out.push(check(
            "embedding_lookup",
            &mut rng,
            &[table],
            move |g, x| g.embedding(x[0], &ids).unwrap(),
            move |x| gather_rows(&x[0], &ids2),
        ));

        let idx: Vec<usize> = (0..dim(&mut rng, 1, 6)).map(|_| rng.below(m)).collect();
        let idx2 = idx.clone();
        out.push(check(
            "gather_rows",
            &mut rng,
            &[a.clone()],
            move |g, x| g.gather_rows(x[0], &idx).unwrap(),
            move |x| gather_rows(&x[0], &idx2),
        ));

        let extra_rows = dim(&mut rng, 1, 4);
        let other = random_mat(&mut rng, &[extra_rows, k], 1.0);
        out.push(check(
            "concat_rows",
            &mut rng,
            &[a.clone(), other],
            |g, x| g.concat_rows(&[x[0], x[1]]).unwrap(),
            |x| concat_rows(x),
        ));

        let segs = random_segments(&mut rng, 1, 3, 1, 4);
        let total: usize = segs.iter().sum();
        let seq = random_mat(&mut rng, &[total, k], 1.0);
        let s2 = segs.clone();
        out.push(check(
            "mean_rows",
            &mut rng,
            &[seq],
            move |g, x| g.mean_rows(x[0], &segs).unwrap(),
            move |x| mean_rows(&x[0], &s2),
        ));

        let heads = dim(&mut rng, 1, 3);
        let d = heads * dim(&mut rng, 1, 3);
        let segs = random_segments(&mut rng, 1, 3, 1, 5);
        let total: usize = segs.iter().sum();
        let causal = rng.below(2) == 0;
        let q = random_mat(&mut rng, &[total, d], 1.0);
        let kk = random_mat(&mut rng, &[total, d], 1.0);
        let v = random_mat(&mut rng, &[total, d], 1.0);
        let s2 = segs.clone();
        out.push(check(
            if causal {
                "attention_causal"
            } else {
                "attention_full"
            },
            &mut rng,
            &[q, kk, v],
            move |g, x| g.attention(x[0], x[1], x[2], &segs, heads, causal).unwrap(),
            move |x| attention(&x[0], &x[1], &x[2], &s2, heads, causal),
        ));

        let classes = dim(&mut rng, 2, 8);
        let t = dim(&mut rng, 1, 5);
        let logits = random_mat(&mut rng, &[t, classes], 2.0);
        let targets: Vec<usize> = (0..t).map(|_| rng.below(classes)).collect();
        let mut mask: Vec<f32> = (0..t).map(|_| (rng.below(3) > 0) as u8 as f32).collect();
        mask[0] = 1.0;
        let (t2, m2) = (targets.clone(), mask.clone());
        let denom: f64 = mask.iter().map(|&x| f64::from(x)).sum();
        out.push(check(
            "cross_entropy",
            &mut rng,
            &[logits],
            move |g, x| g.cross_entropy(x[0], &targets, &mask).unwrap(),
            move |x| {
                let w: Vec<f64> = m2.iter().map(|&v| f64::from(v)).collect();
                (vec![], vec![cross_entropy(&x[0], &t2, &w, denom)])
            },
        ));
    }
    out
}

fn random_segments(
    rng: &mut Rng,
    min_n: usize,
    max_n: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<usize> {
    (0..dim(rng, min_n, max_n))
        .map(|_| dim(rng, min_len, max_len))
        .collect()
}
