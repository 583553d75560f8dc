use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::autodiff::{grad_check_many, GradCheckOptions, Graph, Tensor, Var};
use splatseg::ccl::{
    cosine_graph, cross_entropy_graph, decode, loss_2d_to_text, loss_3d_to_text, loss_cosine, total_loss, CclError,
    ClassSubset, Decoder, DecoderParams, LossConfig, Reduction,
};
use splatseg::scene::{DenseTargetMap, LabelVocabulary, IGNORE_LABEL, SEMANTIC_DIM};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn names(m: usize) -> Vec<String> {
    (0..m).map(|i| format!("class{i}")).collect()
}

fn random_vocab(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> LabelVocabulary {
    LabelVocabulary::new(names(m), random(rng, m, dim)).unwrap()
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|o| (0..x.len()).map(|i| x[i] * w.get2(i, o)).sum()).collect()
}

fn decode_by_hand(p: &DecoderParams, which: &str, x: &[f64]) -> Vec<f64> {
    let get = |n: &str| p.get(&format!("{which}.{n}")).unwrap();
    let h: Vec<f64> = matvec(x, get("w1"))
        .iter()
        .zip(get("b1").data())
        .map(|(a, b)| (a + b).max(0.0))
        .collect();
    matvec(&h, get("w2")).iter().zip(get("b2").data()).map(|(a, b)| a + b).collect()
}

/// Numerically stable `log Σ exp(z) − z[t]`.
fn scalar_ce(z: &[f64], t: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[t]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn zero_decoder_outputs_zero() {
    let p = DecoderParams::filled(512, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = decode(&p, Decoder::Phi, &random(&mut rng, 3, 16)).unwrap();
    assert_eq!(out.shape(), &[3, 512]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decode_matches_hand_composition_and_is_row_independent() {
    let mut p = DecoderParams::init(64, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let x = random(&mut rng, 5, 16);
    for (which, name) in [(Decoder::Phi, "phi"), (Decoder::Psi, "psi")] {
        let batch = decode(&p, which, &x).unwrap();
        for i in 0..5 {
            let alone = decode(&p, which, &Tensor::from_rows(&[x.row(i)]).unwrap()).unwrap();
            assert_eq!(alone.row(0), batch.row(i));
            let hand = decode_by_hand(&p, name, x.row(i));
            for (a, b) in batch.row(i).iter().zip(&hand) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
    assert_ne!(decode(&p, Decoder::Phi, &x).unwrap(), decode(&p, Decoder::Psi, &x).unwrap());
    assert!(matches!(
        decode(&p, Decoder::Phi, &random(&mut rng, 2, 15)),
        Err(CclError::ShapeMismatch(_))
    ));
}

#[test]
fn uniform_logits_give_log_m() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = random_vocab(&mut rng, 20, 512);
    let p = DecoderParams::filled(512, 0.0);
    let s = random(&mut rng, 7, 16);
    let labels: Vec<u16> = (0..7).map(|i| (i * 3) as u16).collect();
    let l = loss_3d_to_text(&s, &labels, &vocab, &p, &LossConfig::default()).unwrap();
    assert!((l - 20f64.ln()).abs() < 1e-9);
    let l2 = loss_2d_to_text(&random(&mut rng, 1, 16), &[4], &vocab, &p, &LossConfig::default()).unwrap();
    assert!((l2 - 20f64.ln()).abs() < 1e-9);
}

#[test]
fn growing_true_class_margin_drives_loss_to_zero() {
    let vocab = LabelVocabulary::orthonormal(&["a", "b", "c"], 8).unwrap();
    let mut p = DecoderParams::filled(8, 0.0);
    // φ(s) = k·e_a via the output bias only.
    let mut prev = f64::INFINITY;
    for k in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let b2 = p.get_mut("phi.b2").unwrap();
        b2.data_mut().copy_from_slice(&vocab.embeddings().row(0).iter().map(|v| v * k).collect::<Vec<_>>());
        let l = loss_3d_to_text(&Tensor::zeros(&[1, 16]), &[0], &vocab, &p, &LossConfig::default()).unwrap();
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn cross_entropy_matches_scalar_log_sum_exp() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let vocab = random_vocab(&mut rng, 6, 32);
        let p = DecoderParams::init(32, seed);
        let s = random(&mut rng, 5, 16);
        let labels = vec![0u16, 5, IGNORE_LABEL, 2, 2];
        let cfg = LossConfig {
            temperature: 0.7,
            ..LossConfig::default()
        };
        let got = loss_3d_to_text(&s, &labels, &vocab, &p, &cfg).unwrap();
        let mut expect = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let y = decode_by_hand(&p, "phi", s.row(i));
            let z: Vec<f64> = (0..6).map(|k| dot(vocab.embeddings().row(k), &y) / 0.7).collect();
            expect += scalar_ce(&z, l as usize);
        }
        assert!((got - expect / 4.0).abs() < 1e-12);
        let summed = loss_3d_to_text(&s, &labels, &vocab, &p, &LossConfig { reduction: Reduction::Sum, ..cfg }).unwrap();
        assert!((summed - expect).abs() < 1e-11);
    }
}

#[test]
fn unseen_classes_leave_the_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut vocab = random_vocab(&mut rng, 5, 16);
    assert!(vocab.set_unseen(&["class4"]).is_empty());
    let p = DecoderParams::init(16, 2);
    let s = random(&mut rng, 4, 16);
    let labels = vec![0u16, 4, 1, 3];
    let got = loss_3d_to_text(&s, &labels, &vocab, &p, &LossConfig::default()).unwrap();
    let mut expect = 0.0;
    for i in [0usize, 2, 3] {
        let y = decode_by_hand(&p, "phi", s.row(i));
        let z: Vec<f64> = (0..4).map(|k| dot(vocab.embeddings().row(k), &y)).collect();
        expect += scalar_ce(&z, labels[i] as usize);
    }
    assert!((got - expect / 3.0).abs() < 1e-12);
    assert!(matches!(
        loss_3d_to_text(&s.clone(), &[4, 4, IGNORE_LABEL, 4], &vocab, &p, &LossConfig::default()),
        Err(CclError::NoValidTargets)
    ));
    assert!(matches!(
        loss_3d_to_text(&s, &[9, 0, 0, 0], &vocab, &p, &LossConfig::default()),
        Err(CclError::LabelOutOfRange { label: 9, .. })
    ));
    assert_eq!(ClassSubset::training(&vocab).classes, vec![0, 1, 2, 3]);
}

#[test]
fn pixel_term_equals_gaussian_term_on_flattened_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let vocab = random_vocab(&mut rng, 4, 24);
    let p = DecoderParams::init(24, 3);
    let map = random(&mut rng, 16, 16);
    let labels: Vec<u16> = (0..16).map(|i| if i % 5 == 0 { IGNORE_LABEL } else { (i % 4) as u16 }).collect();
    let cfg = LossConfig::default();
    let a = loss_2d_to_text(&map, &labels, &vocab, &p, &cfg).unwrap();
    let b = loss_3d_to_text(&map, &labels, &vocab, &p, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(matches!(
        loss_2d_to_text(&map, &[IGNORE_LABEL; 16], &vocab, &p, &cfg),
        Err(CclError::NoValidTargets)
    ));
}

fn dense(rng: &mut ChaCha8Rng, pixels: usize, dim: usize, side: (u32, u32)) -> DenseTargetMap {
    DenseTargetMap::new(side.0, side.1, dim as u32, (0..pixels * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn cosine_extremes() {
    // ψ(M) = b2 for every pixel when the weights are zero.
    let mut p = DecoderParams::filled(8, 0.0);
    let dir = [0.3, -0.2, 0.5, 0.1, 0.0, 0.7, -0.4, 0.2];
    p.get_mut("psi.b2").unwrap().data_mut().copy_from_slice(&dir);
    let m = Tensor::zeros(&[4, SEMANTIC_DIM]);
    let parallel = DenseTargetMap::new(2, 2, 8, (0..4).flat_map(|_| dir.map(|v| (v * 2.0) as f32)).collect()).unwrap();
    let l = loss_cosine(&m, &parallel, &p, &LossConfig::default()).unwrap();
    assert!((l + 1.0).abs() < 1e-6);
    let orth = [0.7, 0.0, 0.0, 0.0, 0.0, -0.3, 0.0, 0.0];
    assert!(dot(&orth, &dir).abs() < 1e-12);
    let target = DenseTargetMap::new(2, 2, 8, (0..4).flat_map(|_| orth.map(|v| v as f32)).collect()).unwrap();
    let l = loss_cosine(&m, &target, &p, &LossConfig::default()).unwrap();
    assert!(l.abs() < 1e-6);
}

#[test]
fn cosine_matches_scalar_average_and_skips_degenerate_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let p = DecoderParams::init(32, 4);
    let m = random(&mut rng, 9, 16);
    let mut t = dense(&mut rng, 9, 32, (3, 3));
    t.data[4 * 32..5 * 32].fill(0.0);
    let got = loss_cosine(&m, &t, &p, &LossConfig::default()).unwrap();
    let mut total = 0.0;
    for px in (0..9).filter(|&px| px != 4) {
        let y = decode_by_hand(&p, "psi", m.row(px));
        let s: Vec<f64> = t.pixel(px).iter().map(|&v| v as f64).collect();
        total += dot(&s, &y) / (dot(&s, &s).sqrt() * dot(&y, &y).sqrt());
    }
    assert!((got + total / 8.0).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&got));
    let wrong = dense(&mut rng, 9, 16, (3, 3));
    assert!(matches!(
        loss_cosine(&m, &wrong, &p, &LossConfig::default()),
        Err(CclError::DimensionMismatch(_))
    ));
}

#[test]
fn total_is_the_plain_sum() {
    let z = total_loss(0.0, 0.0, 0.0, (0, 0, 0)).unwrap();
    assert_eq!(z.total, 0.0);
    let b = total_loss(1.25, 0.5, -0.75, (3, 4, 5)).unwrap();
    assert_eq!(b.total, 1.25 + 0.5 + -0.75);
    assert_eq!((b.gaussians, b.pixels, b.cosine_pixels), (3, 4, 5));
    assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, (0, 0, 0)), Err(CclError::NonFinite(_))));
}

struct Fixture {
    vocab: LabelVocabulary,
    params: DecoderParams,
    feats: Tensor,
    labels: Vec<u16>,
    target: DenseTargetMap,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = random_vocab(&mut rng, 5, 24);
    Fixture {
        params: DecoderParams::init(24, seed),
        feats: random(&mut rng, 6, 16),
        labels: vec![0, 1, IGNORE_LABEL, 4, 2, 2],
        target: dense(&mut rng, 6, 24, (2, 3)),
        vocab,
    }
}

/// Loss with the selected terms, differentiated w.r.t. decoder weights and features.
fn terms(fx: &Fixture, which: [bool; 3]) -> impl Fn(&mut Graph, &[Var]) -> Result<Var, CclError> + Sync + '_ {
    move |g: &mut Graph, v: &[Var]| {
        let d = splatseg::ccl::DecoderVars(v[..8].to_vec());
        let x = v[8];
        let cfg = LossConfig::default();
        let subset = ClassSubset::training(&fx.vocab);
        let mut parts = Vec::new();
        if which[0] {
            parts.push(cross_entropy_graph(g, &d, x, &fx.labels, &fx.vocab, &subset, &cfg)?.0);
        }
        if which[1] {
            let y = g.scale(x, 0.5);
            parts.push(cross_entropy_graph(g, &d, y, &fx.labels, &fx.vocab, &subset, &cfg)?.0);
        }
        if which[2] {
            parts.push(cosine_graph(g, &d, x, &fx.target, &cfg)?.0);
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    }
}

fn inputs(fx: &Fixture) -> Vec<Tensor> {
    let mut v: Vec<Tensor> = fx.params.iter().map(|(_, t)| t.clone()).collect();
    v.push(fx.feats.clone());
    v
}

fn gradients(fx: &Fixture, which: [bool; 3]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs(fx).into_iter().map(|t| g.param(t)).collect();
    let loss = terms(fx, which)(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()))).collect()
}

#[test]
fn total_gradient_is_the_sum_of_term_gradients() {
    let fx = fixture(50);
    let all = gradients(&fx, [true, true, true]);
    let parts: Vec<Vec<Tensor>> = [[true, false, false], [false, true, false], [false, false, true]]
        .iter()
        .map(|w| gradients(&fx, *w))
        .collect();
    for (k, t) in all.iter().enumerate() {
        for (j, v) in t.data().iter().enumerate() {
            let s: f64 = parts.iter().map(|p| p[k].data()[j]).sum();
            assert!((v - s).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_gradients_pass_grad_check() {
    for seed in 0..4 {
        let fx = fixture(60 + seed);
        let opts = GradCheckOptions {
            max_coords: Some(60),
            seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check_many(&terms(&fx, [true, true, true]), &inputs(&fx), &opts).unwrap();
        assert!(report.pass, "seed {seed}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cross_entropy_is_invariant_to_joint_class_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 6;
        let vocab = random_vocab(&mut rng, m, 16);
        let p = DecoderParams::init(16, seed);
        let s = random(&mut rng, 8, 16);
        let labels: Vec<u16> = (0..8).map(|_| rng.gen_range(0..m as u16)).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // Class k moves to row perm[k].
        let mut rows = vec![vec![0.0; 16]; m];
        let mut pnames = vec![String::new(); m];
        for k in 0..m {
            rows[perm[k]] = vocab.embeddings().row(k).to_vec();
            pnames[perm[k]] = vocab.names()[k].clone();
        }
        let permuted = LabelVocabulary::new(pnames, Tensor::from_rows(&rows).unwrap()).unwrap();
        let plabels: Vec<u16> = labels.iter().map(|&l| perm[l as usize] as u16).collect();
        let a = loss_3d_to_text(&s, &labels, &vocab, &p, &LossConfig::default()).unwrap();
        let b = loss_3d_to_text(&s, &plabels, &permuted, &p, &LossConfig::default()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_rescaling_of_targets(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = DecoderParams::init(20, seed);
        let m = random(&mut rng, 6, 16);
        let t = dense(&mut rng, 6, 20, (2, 3));
        let scaled = DenseTargetMap::new(2, 3, 20, t.data.iter().map(|v| v * 7.3).collect()).unwrap();
        let a = loss_cosine(&m, &t, &p, &LossConfig::default()).unwrap();
        let b = loss_cosine(&m, &scaled, &p, &LossConfig::default()).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}
