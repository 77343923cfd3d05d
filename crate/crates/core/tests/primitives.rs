use maskedclip::gradcheck::{grad_check, GradCheckOptions};
use maskedclip::{Bound, Graph, ParamSet, Result, Rng, Tensor, Var};

fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    t(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect())
}

/// Contract `out` against a fixed random weighting so no primitive is
/// checked through a trivially zero gradient.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = t(shape[0], shape[1], (0..shape[0] * shape[1]).map(|_| rng.next_normal()).collect());
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check(
    params: ParamSet<f64>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> f64 {
    let mut params = params;
    let report = grad_check(
        |g, b| {
            let out = f(g, b)?;
            project(g, out, seed)
        },
        &mut params,
        &GradCheckOptions::default(),
        &mut Rng::new(seed),
    )
    .unwrap();
    report.max_rel_error
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

fn shape(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(5) as usize, 1 + rng.below(6) as usize)
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::new();
    let x = g.constant(t(1, 2, vec![3.0, 4.0]));
    let y = g.l2_normalize(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
}

#[test]
fn softmax_of_equal_logits() {
    let mut g = Graph::new();
    let x = g.constant(t(1, 2, vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_hand_example() {
    let mut g = Graph::new();
    let x = g.constant(t(1, 2, vec![1.0, 3.0]));
    let gamma = g.constant(t(1, 2, vec![1.0, 1.0]));
    let beta = g.constant(t(1, 2, vec![0.0, 0.0]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    let v = g.value(y).data();
    // mean 2, population std 1
    assert!((v[0] + 1.0).abs() < 1e-7 && (v[1] - 1.0).abs() < 1e-7, "{v:?}");
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(vec![3, 2]));
    let err = g.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(t(1, 2, vec![-1.0, 2.0]));
    assert!(g.log(x).is_err());
    let big = g.constant(t(1, 1, vec![1e6]));
    assert!(g.exp(big).is_err());
}

#[test]
fn lineage_follows_inputs() {
    let mut g: Graph<f64> = Graph::new();
    let c = g.constant(t(1, 2, vec![1.0, 2.0]));
    let p = g.param(std::sync::Arc::new(t(1, 2, vec![0.5, 0.5])));
    let cc = g.add(c, c).unwrap();
    let cp = g.add(c, p).unwrap();
    assert!(!g.tracks_gradient(cc));
    assert!(g.tracks_gradient(cp));
    let s = g.sum(cp).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn softmax_rows_sum_to_one_and_l2_rows_have_unit_norm() {
    let mut rng = Rng::new(9);
    for _ in 0..50 {
        let (r, c) = shape(&mut rng);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, r, c));
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let n = g.l2_normalize(x).unwrap();
        for (row, src) in g.value(n).data().chunks(c).zip(g.value(x).data().chunks(c)) {
            if src.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-6 {
                assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn identical_seeds_give_bitwise_identical_outputs() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut g = Graph::<f32>::new();
        let a = g.constant(random(&mut rng, 8, 16).cast::<f32>());
        let b = g.constant(random(&mut rng, 16, 12).cast::<f32>());
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m).unwrap();
        g.value(s).data().to_vec()
    };
    let (x, y) = (run(), run());
    assert_eq!(
        x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn gradcheck_matmul_and_transpose() {
    let mut rng = Rng::new(1);
    for seed in 0..TRIALS {
        let (m, k) = shape(&mut rng);
        let n = 1 + rng.below(4) as usize;
        let p = params(vec![("a", random(&mut rng, m, k)), ("b", random(&mut rng, k, n))]);
        let err = check(p, seed, |g, b| {
            let (a, bb) = (b.get("a")?, b.get("b")?);
            let prod = g.matmul(a, bb)?;
            g.transpose(prod)
        });
        assert!(err <= TOL, "matmul seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_elementwise() {
    let mut rng = Rng::new(2);
    for seed in 0..TRIALS {
        let (r, c) = shape(&mut rng);
        let p = params(vec![
            ("x", random(&mut rng, r, c)),
            ("y", random(&mut rng, r, c)),
            ("bias", random(&mut rng, 1, c)),
            ("s", random(&mut rng, 1, 1)),
        ]);
        let err = check(p, seed, |g, b| {
            let (x, y) = (b.get("x")?, b.get("y")?);
            let sum = g.add(x, y)?;
            let diff = g.sub(sum, y)?;
            let prod = g.mul(diff, y)?;
            let scaled = g.scale(prod, 0.7)?;
            let biased = g.add_row(scaled, b.get("bias")?)?;
            g.scale_by(biased, b.get("s")?)
        });
        assert!(err <= TOL, "elementwise seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_gelu_layernorm_softmax() {
    let mut rng = Rng::new(3);
    for seed in 0..TRIALS {
        let (r, c) = shape(&mut rng);
        let c = c.max(2);
        let p = params(vec![
            ("x", random(&mut rng, r, c)),
            ("gamma", random(&mut rng, 1, c)),
            ("beta", random(&mut rng, 1, c)),
        ]);
        let err = check(p, seed, |g, b| {
            let x = b.get("x")?;
            let h = g.gelu(x)?;
            let n = g.layer_norm(h, b.get("gamma")?, b.get("beta")?)?;
            let s = g.softmax(n)?;
            let ls = g.log_softmax(n)?;
            g.add(s, ls)
        });
        assert!(err <= TOL, "gelu/ln/softmax seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_reductions_and_normalization() {
    let mut rng = Rng::new(4);
    for seed in 0..TRIALS {
        let (r, c) = shape(&mut rng);
        let p = params(vec![("x", random(&mut rng, r * 2, c))]);
        let err = check(p, seed, |g, b| {
            let x = b.get("x")?;
            let n = g.l2_normalize(x)?;
            let m0 = g.mean_axis(n, 0)?;
            let m1 = g.mean_axis(x, 1)?;
            let m1t = g.transpose(m1)?;
            let seg = g.segment_mean(x, 2)?;
            let pooled = g.row_pool(seg, vec![vec![(0, 0.3)], vec![(0, 1.0), (r - 1, -2.0)]])?;
            let a = g.sum(m0)?;
            let bsum = g.sum(m1t)?;
            let psum = g.sum(pooled)?;
            let ab = g.add(a, bsum)?;
            g.add(ab, psum)
        });
        assert!(err <= TOL, "reductions seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_gather_concat_log_exp() {
    let mut rng = Rng::new(5);
    for seed in 0..TRIALS {
        let (r, c) = shape(&mut rng);
        let pos = t(r, c, (0..r * c).map(|_| 0.5 + rng.next_uniform()).collect());
        let p = params(vec![("x", random(&mut rng, r, c)), ("pos", pos), ("tok", random(&mut rng, 1, c))]);
        let idx: Vec<usize> = (0..r + 2).map(|_| rng.below(r as u64 + 1) as usize).collect();
        let err = check(p, seed, move |g, b| {
            let x = b.get("x")?;
            let cat = g.concat_rows(&[x, b.get("tok")?])?;
            let gathered = g.gather_rows(cat, &idx)?;
            let e = g.exp(gathered)?;
            let l = g.log(b.get("pos")?)?;
            let ls = g.sum(l)?;
            let es = g.sum(e)?;
            let total = g.add(ls, es)?;
            let shift = g.scale(total, 0.01)?;
            let sc = g.scale_by(gathered, shift)?;
            g.add(sc, e)
        });
        assert!(err <= TOL, "gather/concat seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_attention() {
    let mut rng = Rng::new(6);
    for seed in 0..TRIALS {
        let seq = 1 + rng.below(4) as usize;
        let batch = 1 + rng.below(3) as usize;
        let heads = 1 + rng.below(2) as usize;
        let d = heads * (1 + rng.below(3) as usize);
        let p = params(vec![("qkv", random(&mut rng, batch * seq, 3 * d))]);
        let err = check(p, seed, move |g, b| g.attention(b.get("qkv")?, seq, heads));
        assert!(err <= TOL, "attention seed {seed}: {err}");
    }
}

#[test]
fn attention_matches_naive_reference() {
    let mut rng = Rng::new(12);
    let (seq, heads, d) = (3, 2, 4);
    let qkv = random(&mut rng, 2 * seq, 3 * d);
    let mut g = Graph::new();
    let v = g.constant(qkv.clone());
    let out = g.attention(v, seq, heads).unwrap();
    let got = g.value(out).clone();
    let dh = d / heads;
    for b in 0..2 {
        for h in 0..heads {
            for i in 0..seq {
                let q = &qkv.row(b * seq + i)[h * dh..(h + 1) * dh];
                let scores: Vec<f64> = (0..seq)
                    .map(|j| {
                        let k = &qkv.row(b * seq + j)[d + h * dh..d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for e in 0..dh {
                    let expect: f64 = (0..seq)
                        .map(|j| (scores[j] - max).exp() / z * qkv.row(b * seq + j)[2 * d + h * dh + e])
                        .sum();
                    let actual = got.row(b * seq + i)[h * dh + e];
                    assert!((expect - actual).abs() < 1e-12);
                }
            }
        }
    }
}
