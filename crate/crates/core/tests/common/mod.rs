#![allow(dead_code)]

use embnum::dataset::{generate_synthetic, Dataset, SyntheticSpec};
use embnum::embnet::{ArchConfig, Model};
use embnum::nn::{BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
/// Entries where both gradients are below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub kinks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs());
        let err = if scale < FD_FLOOR {
            0.0
        } else {
            (analytic - numeric).abs() / scale
        };
        self.worst = self.worst.max(err);
        if err >= FD_TOL {
            self.failures
                .push(format!("{what}: analytic {analytic:e} numeric {numeric:e} rel {err:e}"));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

fn coordinates(len: usize, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Central finite differences on the leaves of a graph-building closure.
/// Coordinates whose `+h` and `-h` evaluations take a different
/// piecewise-linear branch than the base point are excluded.
pub fn check_leaves(
    leaves: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    per_tensor: usize,
    seed: u64,
) -> GradReport {
    let eval = |values: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(leaves);
    let base_sig = g.kink_signature();
    let grads = g.backward(loss).expect("scalar loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (t, (leaf, var)) in leaves.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(leaf.shape()));
        for c in coordinates(leaf.len(), per_tensor, &mut rng) {
            let probe = |delta: f64| {
                let mut values = leaves.to_vec();
                values[t].data_mut()[c] += delta;
                let (g, _, l) = eval(&values);
                (g.value(l).item(), g.kink_signature())
            };
            let (up, sig_up) = probe(FD_STEP);
            let (down, sig_down) = probe(-FD_STEP);
            if sig_up != base_sig || sig_down != base_sig {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(format!("leaf {t}[{c}]"), analytic.data()[c], numeric);
        }
    }
    report
}

/// Finite differences on every trainable array of a model (train-mode batch
/// norm) under `head(graph, output)`.
pub fn check_model(
    model: &Model<f64>,
    input: &Tensor<f64>,
    head: impl Fn(&mut Graph<f64>, Var) -> Var,
    per_tensor: usize,
    seed: u64,
) -> GradReport {
    let eval = |m: &Model<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let pass = m.forward(&mut g, x, BnMode::Train).expect("forward");
        let loss = head(&mut g, pass.output);
        (g, pass, loss)
    };
    let (g, pass, loss) = eval(model);
    let base_sig = g.kink_signature();
    let grads = g.backward(loss).expect("scalar loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (layer, key, var) in &pass.params {
        let analytic = grads.param(*var, &g, key);
        for c in coordinates(analytic.len(), per_tensor, &mut rng) {
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.param_mut(*layer, key).data_mut()[c] += delta;
                let (g, _, l) = eval(&m);
                (g.value(l).item(), g.kink_signature())
            };
            let (up, sig_up) = probe(FD_STEP);
            let (down, sig_down) = probe(-FD_STEP);
            if sig_up != base_sig || sig_down != base_sig {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let name = format!("{}.{key}[{c}]", model.layers[*layer].name);
            report.record(name, analytic.data()[c], numeric);
        }
    }
    report
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output coordinate
/// receives a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(g.value(out).shape(), &mut rng);
    let p = g.mul_const(out, &w).unwrap();
    g.sum(p)
}

// brute-force oracles

/// `x[i-1] = min{v : F(v) >= i/h}`: counts `#{w <= v}` by a full scan for
/// every value, then takes the smallest qualifying value per grid point.
pub fn sampling_oracle(values: &[f64], h: usize) -> Vec<f64> {
    let n = values.len();
    let counts: Vec<usize> = values
        .iter()
        .map(|&v| values.iter().filter(|&&w| w <= v).count())
        .collect();
    (1..=h)
        .map(|i| {
            values
                .iter()
                .zip(&counts)
                .filter(|&(_, &c)| (c as u128) * (h as u128) >= (i as u128) * (n as u128))
                .map(|(&v, _)| v)
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn ecdf(v: &[f64], x: f64) -> f64 {
    v.iter().filter(|&&w| w <= x).count() as f64 / v.len() as f64
}

/// `sup |F_a - F_b|` evaluated at every observed value.
pub fn ks_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .chain(b)
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

/// `P(b > a) + P(b == a) / 2` over all n*m pairs.
pub fn mw_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if y > x {
                u += 1.0;
            } else if y == x {
                u += 0.5;
            }
        }
    }
    u / (a.len() * b.len()) as f64
}

pub fn welch_oracle(a: &[f64], b: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var, n)
    };
    let (ma, va, na) = stats(a);
    let (mb, vb, nb) = stats(b);
    (ma - mb) / (va / na + vb / nb).sqrt()
}

pub fn jaccard_oracle(a: &[f64], b: &[f64]) -> f64 {
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let union = hi(a).max(hi(b)) - lo(a).min(lo(b));
    if union == 0.0 {
        return 1.0;
    }
    (hi(a).min(hi(b)) - lo(a).max(lo(b))).max(0.0) / union
}

/// Random attribute: length in `len`, magnitudes spread log-uniformly over
/// `1e-6..1e6`, with a share of repeated values.
pub fn random_attribute(rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>) -> Vec<f64> {
    let n = rng.random_range(len);
    let mut v: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        if !v.is_empty() && rng.random_bool(0.2) {
            let j = rng.random_range(0..v.len());
            v.push(v[j]);
            continue;
        }
        let mag = 10f64.powf(rng.random_range(-6.0..6.0));
        let sign = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
        v.push(sign * mag);
    }
    v
}

// fixtures

pub const DESK_LABELS: usize = 10;
pub const DESK_EVAL_SOURCES: usize = 6;
pub const DESK_TRAIN_SOURCES: usize = 40;
pub const DESK_EVAL_SEED: u64 = 42;
pub const DESK_TRAIN_SEED: u64 = 1042;

/// The 10-label x 6-source benchmark fixture.
pub fn desk_eval_fixture() -> Dataset {
    generate_synthetic(&SyntheticSpec::with_defaults(DESK_LABELS, DESK_EVAL_SOURCES, DESK_EVAL_SEED)).unwrap()
}

/// Training data over the same label families, drawn from other sources.
pub fn desk_train_fixture() -> Dataset {
    generate_synthetic(&SyntheticSpec::with_defaults(DESK_LABELS, DESK_TRAIN_SOURCES, DESK_TRAIN_SEED)).unwrap()
}

pub fn small_arch(h: usize, k: usize) -> ArchConfig {
    ArchConfig {
        h,
        k,
        width_multiplier: embnum::embnet::Ratio::new(1, 16),
        ..ArchConfig::default()
    }
}

// gradient-check configurations

use embnum::embnet::{build_model, EmbeddingVector};
use embnum::metric::mine_batch_hard;
use embnum::nn::Conv1dSpec;

pub const GRAD_KINDS: usize = 10;

/// Hinge triplet head with fixed indices: `sum(relu(alpha + |a-p| - |a-n|))`.
pub fn fixed_triplet_head(g: &mut Graph<f64>, out: Var, anchors: &[usize], pos: &[usize], neg: &[usize]) -> Var {
    let a = g.gather_rows(out, anchors).unwrap();
    let p = g.gather_rows(out, pos).unwrap();
    let n = g.gather_rows(out, neg).unwrap();
    let dp = g.sub(a, p).unwrap();
    let dn = g.sub(a, n).unwrap();
    let dp = g.row_norm(dp).unwrap();
    let dn = g.row_norm(dn).unwrap();
    let m = g.sub(dp, dn).unwrap();
    // large margin keeps every hinge active
    let m = g.add_scalar(m, 10.0);
    let h = g.relu(m);
    let s = g.sum(h);
    g.scale(s, 1.0 / anchors.len() as f64)
}

/// Runs gradient-check configuration `i`; kinds cycle through every layer
/// type, a residual block and the full desk-width network.
pub fn gradient_case(i: usize) -> (String, GradReport) {
    let seed = 7000 + i as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = i % GRAD_KINDS;
    match kind {
        0 | 1 => {
            let with_bias = kind == 1;
            let (b, cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
            let k = rng.random_range(1..=7);
            let stride = rng.random_range(1..=3);
            let padding = rng.random_range(0..=3);
            let len = rng.random_range(k.max(2)..=k + 8);
            let spec = Conv1dSpec { stride, padding };
            let mut leaves = vec![random_tensor(&[b, cin, len], &mut rng), random_tensor(&[cout, cin, k], &mut rng)];
            if with_bias {
                leaves.push(random_tensor(&[cout], &mut rng));
            }
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.conv1d(v[0], v[1], v.get(2).copied(), spec).unwrap();
                    weighted_sum(g, y, seed)
                },
                24,
                seed,
            );
            (format!("conv1d b{b} {cin}->{cout} k{k} s{stride} p{padding} bias={with_bias}"), r)
        }
        2 => {
            let shape = [rng.random_range(2..=4), rng.random_range(1..=3), rng.random_range(1..=5)];
            let leaves = vec![
                random_tensor(&shape, &mut rng),
                random_tensor(&[shape[1]], &mut rng),
                random_tensor(&[shape[1]], &mut rng),
            ];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
                    weighted_sum(g, y, seed)
                },
                24,
                seed,
            );
            (format!("batch_norm train {shape:?}"), r)
        }
        3 => {
            let shape = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=5)];
            let c = shape[1];
            let rm = random_tensor(&[c], &mut rng);
            let rv = Tensor::new(vec![c], (0..c).map(|_| rng.random_range(0.2..2.0)).collect()).unwrap();
            let leaves = vec![
                random_tensor(&shape, &mut rng),
                random_tensor(&[c], &mut rng),
                random_tensor(&[c], &mut rng),
            ];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5).unwrap();
                    weighted_sum(g, y, seed)
                },
                24,
                seed,
            );
            (format!("batch_norm eval {shape:?}"), r)
        }
        4 => {
            let shape = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=9)];
            let leaves = vec![random_tensor(&shape, &mut rng)];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.relu(v[0]);
                    weighted_sum(g, y, seed)
                },
                32,
                seed,
            );
            (format!("relu {shape:?}"), r)
        }
        5 => {
            let k = rng.random_range(1..=4);
            let s = rng.random_range(1..=3);
            let p = rng.random_range(0..=k / 2);
            let shape = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(k..=k + 8)];
            let leaves = vec![random_tensor(&shape, &mut rng)];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.max_pool1d(v[0], k, s, p).unwrap();
                    weighted_sum(g, y, seed)
                },
                32,
                seed,
            );
            (format!("max_pool1d {shape:?} k{k} s{s} p{p}"), r)
        }
        6 => {
            let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=9)];
            let leaves = vec![random_tensor(&shape, &mut rng)];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.global_avg_pool1d(v[0]).unwrap();
                    weighted_sum(g, y, seed)
                },
                32,
                seed,
            );
            (format!("global_avg_pool1d {shape:?}"), r)
        }
        7 => {
            let (b, fin, fout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
            let leaves = vec![
                random_tensor(&[b, fin], &mut rng),
                random_tensor(&[fout, fin], &mut rng),
                random_tensor(&[fout], &mut rng),
            ];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.linear(v[0], v[1], v[2]).unwrap();
                    weighted_sum(g, y, seed)
                },
                32,
                seed,
            );
            (format!("linear b{b} {fin}->{fout}"), r)
        }
        8 => {
            // conv-bn-relu-conv-bn + identity, relu, pooled, fixed triplet head
            let (b, c, len) = (4, rng.random_range(1..=3), rng.random_range(3..=8));
            let unit = Conv1dSpec { stride: 1, padding: 1 };
            let leaves = vec![
                random_tensor(&[b, c, len], &mut rng),
                random_tensor(&[c, c, 3], &mut rng),
                random_tensor(&[c], &mut rng),
                random_tensor(&[c], &mut rng),
                random_tensor(&[c, c, 3], &mut rng),
                random_tensor(&[c], &mut rng),
                random_tensor(&[c], &mut rng),
            ];
            let r = check_leaves(
                &leaves,
                |g, v| {
                    let y = g.conv1d(v[0], v[1], None, unit).unwrap();
                    let (y, _) = g.batch_norm_train(y, v[2], v[3], 1e-5).unwrap();
                    let y = g.relu(y);
                    let y = g.conv1d(y, v[4], None, unit).unwrap();
                    let (y, _) = g.batch_norm_train(y, v[5], v[6], 1e-5).unwrap();
                    let y = g.add(y, v[0]).unwrap();
                    let y = g.relu(y);
                    let e = g.global_avg_pool1d(y).unwrap();
                    fixed_triplet_head(g, e, &[0, 2], &[1, 3], &[2, 0])
                },
                16,
                seed,
            );
            (format!("residual block b{b} c{c} len{len} + triplet head"), r)
        }
        _ => {
            let arch = ArchConfig::desk();
            let model: Model<f64> = build_model(&arch, seed).unwrap();
            let b = 6;
            let mut data = Vec::with_capacity(b * arch.h);
            for _ in 0..b {
                let mut row: Vec<f64> = (0..arch.h).map(|_| rng.random_range(-3.0..3.0)).collect();
                row.sort_by(f64::total_cmp);
                data.extend(row);
            }
            let input = Tensor::new(vec![b, 1, arch.h], data).unwrap();
            let mut g = Graph::new();
            let x = g.leaf(input.clone());
            let out = model.forward(&mut g, x, BnMode::Train).unwrap().output;
            let emb: Vec<EmbeddingVector<f64>> =
                g.value(out).rows().map(|r| EmbeddingVector::new(r.to_vec())).collect();
            let labels: Vec<String> = (0..b).map(|j| format!("l{}", j % 3)).collect();
            let t = mine_batch_hard(&emb, &labels).unwrap();
            let r = check_model(
                &model,
                &input,
                |g, out| {
                    let ws = weighted_sum(g, out, seed);
                    let th = fixed_triplet_head(g, out, &t.anchors, &t.positives, &t.negatives);
                    g.add(ws, th).unwrap()
                },
                2,
                seed,
            );
            (format!("desk network b{b} h{} k{}", arch.h, arch.k), r)
        }
    }
}
