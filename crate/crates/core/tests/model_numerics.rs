//! Forward pass against a straight-line reference, loss values, and
//! reverse-mode gradients against central finite differences.

use poselab::model::transformer::{self, loss_grad, token_nll, Inputs, RMS_EPS};
use poselab::model::{loss_and_grad, loss_next_token, ModelConfig, ParameterSet, Transformer};
use poselab::position_plan::{build_pose_plan, ExtensionConfig};
use poselab::rope::{InterpolationKind, InterpolationStrategy};
use poselab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor<'a>(p: &'a ParameterSet, name: &str) -> (&'a [f64], usize, usize) {
    let e = p.layout.entries.iter().find(|e| e.name == name).expect(name);
    (&p.weights.data[e.range()], e.rows, e.cols)
}

/// Row vector times row-major matrix.
fn vecmat(x: &[f64], w: (&[f64], usize, usize)) -> Vec<f64> {
    let (data, rows, cols) = w;
    assert_eq!(x.len(), rows);
    (0..cols).map(|c| (0..rows).map(|r| x[r] * data[r * cols + c]).sum()).collect()
}

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

fn gelu_ref(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    x * 0.5 * (1.0 + inner.tanh())
}

/// Plain loops over one sequence; no code shared with the library forward.
fn reference_logits(p: &ParameterSet, tokens: &[u32], positions: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (d, hd, nh) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let rope = cfg.rope().unwrap();
    let (emb, _, _) = tensor(p, "tok_embed");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    let rotate = |v: &mut [f64], m: usize| {
        for h in 0..nh {
            for j in 0..hd / 2 {
                let ang = m as f64 * rope.theta[j];
                let (a, b) = (v[h * hd + 2 * j], v[h * hd + 2 * j + 1]);
                v[h * hd + 2 * j] = a * ang.cos() - b * ang.sin();
                v[h * hd + 2 * j + 1] = b * ang.cos() + a * ang.sin();
            }
        }
    };
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("layers.{l}.{s}");
        let g1 = tensor(p, &name("attn_norm")).0;
        let hs: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, g1)).collect();
        let mut qs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, tensor(p, &name("wq")))).collect();
        let mut ks: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, tensor(p, &name("wk")))).collect();
        let vs: Vec<Vec<f64>> = hs.iter().map(|h| vecmat(h, tensor(p, &name("wv")))).collect();
        for (i, &m) in positions.iter().enumerate() {
            rotate(&mut qs[i], m);
            rotate(&mut ks[i], m);
        }
        let scale = rope.attn_scale / (hd as f64).sqrt();
        for i in 0..xs.len() {
            let mut concat = vec![0.0; d];
            for h in 0..nh {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| scale * qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - mx).exp() / z;
                    for c in r.clone() {
                        concat[c] += w * vs[j][c];
                    }
                }
            }
            let out = vecmat(&concat, tensor(p, &name("wo")));
            xs[i].iter_mut().zip(out).for_each(|(x, o)| *x += o);
        }
        let g2 = tensor(p, &name("ffn_norm")).0;
        for x in xs.iter_mut() {
            let up: Vec<f64> = vecmat(&rms(x, g2), tensor(p, &name("w_up"))).into_iter().map(gelu_ref).collect();
            let down = vecmat(&up, tensor(p, &name("w_down")));
            x.iter_mut().zip(down).for_each(|(x, o)| *x += o);
        }
    }
    let gf = tensor(p, "final_norm").0;
    xs.iter().map(|x| vecmat(&rms(x, gf), tensor(p, "unembed"))).collect()
}

fn config(n_layers: usize, d_model: usize, n_heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers,
        d_model,
        n_heads,
        train_window: 8,
        target_window: 32,
        // larger weights than the training init so every term matters
        init_std: 0.3,
        ..Default::default()
    }
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize, target: usize) -> (Vec<u32>, Vec<usize>) {
    let tokens = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    let ext = ExtensionConfig::new(len, target, 2).unwrap();
    let plan = build_pose_plan(&ext, len, rng).unwrap();
    (tokens, plan.position_index)
}

#[test]
fn forward_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cfg = config(1, 8, 2, 11);
    cfg.interpolation = InterpolationStrategy::new(InterpolationKind::Yarn, 4.0);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let (tokens, positions) = random_sequence(&mut rng, 8, 11, 32);
    let rope = cfg.rope().unwrap();
    let got = transformer::logits(&p, &rope, &Inputs { tokens: &tokens, positions: &positions, batch: 1, seq_len: 8 }).unwrap();
    let want = reference_logits(&p, &tokens, &positions);
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            assert!((got[[i, j]] - w).abs() <= 1e-10, "logit [{i},{j}]: {} vs {w}", got[[i, j]]);
        }
    }
}

#[test]
fn single_token_logits_ignore_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = config(2, 16, 2, 13);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let rope = cfg.rope().unwrap();
    let at = |pos: usize| transformer::logits(&p, &rope, &Inputs { tokens: &[5], positions: &[pos], batch: 1, seq_len: 1 }).unwrap();
    let a = at(0);
    for pos in [1, 17, 1000, 123_456] {
        let b = at(pos);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn network_is_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = config(2, 16, 2, 13);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let rope = cfg.rope().unwrap();
    let (tokens, positions) = random_sequence(&mut rng, 12, 13, 40);
    let run = |pos: &[usize]| transformer::logits(&p, &rope, &Inputs { tokens: &tokens, positions: pos, batch: 1, seq_len: 12 }).unwrap();
    let base = run(&positions);
    for s in [1usize, 3, 97, 4096] {
        let shifted: Vec<usize> = positions.iter().map(|x| x + s).collect();
        let out = run(&shifted);
        for (x, y) in base.iter().zip(out.iter()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "shift {s}: {x} vs {y}");
        }
    }
}

#[test]
fn loss_values() {
    let zeros = ndarray::Array2::<f64>::zeros((4, 11));
    let l = loss_next_token(&zeros.view(), &[0, 3, 7, 10]).unwrap();
    assert!((l - 11f64.ln()).abs() < 1e-15);
    assert!((l - 2.3979).abs() < 1e-4);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let mut logits = ndarray::Array2::<f64>::zeros((1, 11));
        logits[[0, 4]] = margin;
        let l = loss_next_token(&logits.view(), &[4]).unwrap();
        assert!(l >= 0.0 && l < prev);
        prev = l;
    }
    assert!(prev < 1e-20);

    // frozen 50-digit evaluation of the same three rows
    let logits = ndarray::arr2(&[
        [1.25, -0.5, 3.75, 0.125, -2.0],
        [10.5, 10.25, -3.0, 0.0, 9.875],
        [-0.75, -0.25, -1.5, -30.0, 2.5],
    ]);
    let l = loss_next_token(&logits.view(), &[2, 4, 0]).unwrap();
    assert!((l - 1.649_028_768_948_058_7).abs() <= 1e-10);
    assert_eq!(token_nll(&logits.view(), &[2, 4, 0]).unwrap().len(), 3);
}

fn batch(rng: &mut ChaCha8Rng, b: usize, len: usize, vocab: usize) -> (Vec<u32>, Vec<usize>, Vec<u32>) {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    for _ in 0..b {
        let (t, p) = random_sequence(rng, len, vocab, 40);
        tokens.extend(t);
        positions.extend(p);
    }
    let targets = (0..b * len).map(|_| rng.random_range(0..vocab as u32)).collect();
    (tokens, positions, targets)
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cfg = config(2, 32, 4, 17);
    cfg.init_std = 0.2;
    let mut p = ParameterSet::init(&cfg, &mut rng).unwrap();
    // perturb norm gains away from one
    for e in p.layout.entries.clone() {
        if e.name.ends_with("norm") {
            for w in &mut p.weights.data[e.range()] {
                *w = rng.random_range(0.5..1.5);
            }
        }
    }
    let rope = cfg.rope().unwrap();
    let (tokens, positions, targets) = batch(&mut rng, 2, 10, 17);
    let inputs = Inputs { tokens: &tokens, positions: &positions, batch: 2, seq_len: 10 };
    let (_, grads) = loss_and_grad(&p, &rope, &inputs, &targets, 1.0).unwrap();

    let eps = 1e-4;
    let loss_at = |p: &ParameterSet| {
        let logits = transformer::logits(p, &rope, &inputs).unwrap();
        loss_next_token(&logits.view(), &targets).unwrap()
    };
    let mut worst: f64 = 0.0;
    let mut probe = p.clone();
    // at least one coordinate from every tensor, the rest uniform over all parameters
    let mut coords: Vec<usize> = p.layout.entries.iter().map(|e| e.offset + rng.random_range(0..e.len())).collect();
    while coords.len() < 240 {
        coords.push(rng.random_range(0..p.num_params()));
    }
    let mut checked = 0;
    for &i in &coords {
        let orig = probe.weights.data[i];
        probe.weights.data[i] = orig + eps;
        let up = loss_at(&probe);
        probe.weights.data[i] = orig - eps;
        let down = loss_at(&probe);
        probe.weights.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.data[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(checked >= 200);
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn absent_token_rows_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(1, 16, 2, 20);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let rope = cfg.rope().unwrap();
    let tokens = vec![1u32, 2, 3, 2, 1, 3];
    let positions: Vec<usize> = (0..6).collect();
    let targets = vec![2u32, 3, 2, 1, 3, 1];
    let inputs = Inputs { tokens: &tokens, positions: &positions, batch: 1, seq_len: 6 };
    let (_, g) = loss_and_grad(&p, &rope, &inputs, &targets, 1.0).unwrap();
    let e = &p.layout.entries[p.layout.embed];
    let emb = g.matrix(e);
    for t in 0..20 {
        let zero = emb.row(t).iter().all(|&v| v == 0.0);
        assert_eq!(zero, !(1..=3).contains(&t), "row {t}");
    }
}

#[test]
fn loss_scale_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = config(2, 16, 2, 13);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let rope = cfg.rope().unwrap();
    let (tokens, positions, targets) = batch(&mut rng, 2, 6, 13);
    let inputs = Inputs { tokens: &tokens, positions: &positions, batch: 2, seq_len: 6 };
    let (_, g1) = loss_and_grad(&p, &rope, &inputs, &targets, 1.0).unwrap();
    let (_, g2) = loss_and_grad(&p, &rope, &inputs, &targets, 2.0).unwrap();
    for (a, b) in g1.data.iter().zip(&g2.data) {
        assert_eq!(2.0 * a, *b);
    }
    let cache = transformer::forward(&p, &rope, &inputs).unwrap();
    let d = loss_grad(cache.logits(), &targets, 1.0);
    assert_eq!(transformer::backward(&p, &cache, &d).unwrap(), g1);
}

#[test]
fn backward_without_forward_is_usage_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = config(1, 8, 2, 11);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let mut model = Transformer::new(&p).unwrap();
    assert!(matches!(model.backward(&[1], 1.0), Err(Error::Usage(_))));
    model.forward(&Inputs { tokens: &[1, 2], positions: &[0, 1], batch: 1, seq_len: 2 }).unwrap();
    assert!(model.backward(&[2, 3], 1.0).is_ok());
    assert!(matches!(model.backward(&[2, 3], 1.0), Err(Error::Usage(_))));
}

#[test]
fn non_increasing_positions_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = config(1, 8, 2, 11);
    let p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let rope = cfg.rope().unwrap();
    let r = transformer::logits(&p, &rope, &Inputs { tokens: &[1, 2], positions: &[3, 3], batch: 1, seq_len: 2 });
    assert!(r.is_err());
}

#[test]
fn huge_weights_report_overflow_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = config(2, 8, 2, 11);
    let mut p = ParameterSet::init(&cfg, &mut rng).unwrap();
    let e = p.layout.entries.iter().find(|e| e.name == "layers.0.w_down").unwrap().clone();
    p.weights.data[e.range()].iter_mut().for_each(|w| *w = 1e308);
    let rope = cfg.rope().unwrap();
    let r = transformer::logits(&p, &rope, &Inputs { tokens: &[1, 2], positions: &[0, 1], batch: 1, seq_len: 2 });
    assert!(matches!(r, Err(Error::NumericOverflow { layer: 0, .. })), "{r:?}");
}
