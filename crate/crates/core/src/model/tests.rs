use super::*;
use crate::geometry::Quat;
use crate::rng::stream;
use crate::tensor::grad_check;
use proptest::prelude::*;
use rand::Rng as _;

pub(crate) fn tiny() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        latent_dim: 4,
        stage_channels: vec![4, 6],
        merge_channels: 4,
        pyramid_levels: 2,
        pool_size: 2,
        lstm_hidden: 5,
        window: 3,
        pose_mlp: vec![6],
        decoder_channels: vec![4, 3],
        pose_decoder: vec![6],
        ..ModelConfig::default()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "test");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn poses(n: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "poses");
    let mut rows = Vec::new();
    for _ in 0..n {
        let q = Quat::from_axis_angle([rng.random(), rng.random(), 1.0], rng.random_range(0.0..0.5));
        rows.push(vec![rng.random(), rng.random(), rng.random::<f64>() * 0.1, q.w, q.x, q.y, q.z]);
    }
    Tensor::from_rows(&rows).unwrap()
}

fn batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let [c, h, w] = cfg.image_shape();
    Batch {
        images: random(&[4, c, h, w], seed),
        poses: poses(4, seed),
        window: vec![vec![0, 2], vec![0, 3], vec![1, 3]],
        target_images: random(&[2, c, h, w], seed + 1),
        target_poses: poses(2, seed + 1),
    }
}

#[test]
fn encode_shapes_and_purity() {
    let cfg = ModelConfig {
        latent_dim: 16,
        ..tiny()
    };
    let params = init_parameters(&cfg, 1).unwrap();
    let img = random(&[1, 3, 16, 16], 3);
    let images = Tensor::stack(&[&img.reshape(&[3, 16, 16]).unwrap(), &img.reshape(&[3, 16, 16]).unwrap()]).unwrap();
    let p = poses(1, 4);
    let ps = Tensor::stack(&[&p.reshape(&[7]).unwrap(), &p.reshape(&[7]).unwrap()]).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let im = tape.constant(images);
    let pv = tape.constant(ps);
    let lat = encode(&mut tape, &b, &cfg, im, pv).unwrap();
    let mu = tape.value(lat.mu);
    let ls = tape.value(lat.log_sigma.unwrap());
    assert_eq!(mu.shape(), [2, 16]);
    assert_eq!(ls.shape(), [2, 16]);
    assert_eq!(mu.row(0), mu.row(1));
    assert_eq!(ls.row(0), ls.row(1));
}

#[test]
fn encode_rejects_wrong_image_shape() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 1).unwrap();
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let im = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let pv = tape.constant(poses(1, 0));
    assert!(matches!(encode(&mut tape, &b, &cfg, im, pv), Err(Error::Config(_))));
}

#[test]
fn encoder_pixel_gradient_matches_finite_differences() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 2).unwrap();
    let ps = poses(1, 5);
    let img = random(&[1, 3, 16, 16], 6);
    let worst = grad_check(
        |tape, x| {
            let b = params.bind_constant(tape);
            let pv = tape.constant(ps.clone());
            let lat = encode(tape, &b, &cfg, x, pv)?;
            Ok(tape.mean(lat.mu))
        },
        &img,
        1e-6,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_variance_limit_returns_mean() {
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap());
    let ls = tape.constant(Tensor::full(&[1, 3], -30.0));
    let lat = LatentVars {
        mu,
        log_sigma: Some(ls),
    };
    let eps = sample_eps(1, 3, &mut stream(0, "sampling"));
    let z = reparameterize(&mut tape, &lat, &eps).unwrap();
    for (a, b) in tape.value(z).data().iter().zip([0.3, -1.2, 4.0]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn reparameterization_statistics() {
    let n = 100_000;
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::full(&[n, 1], 1.0));
    let ls = tape.constant(Tensor::full(&[n, 1], 2f64.ln()));
    let lat = LatentVars {
        mu,
        log_sigma: Some(ls),
    };
    let eps = sample_eps(n, 1, &mut stream(11, "sampling"));
    let z = reparameterize(&mut tape, &lat, &eps).unwrap();
    let d = tape.value(z).data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 1.0).abs() < 0.03, "mean {mean}");
    assert!((var - 4.0).abs() < 0.15, "variance {var}");
    let again = sample_eps(n, 1, &mut stream(11, "sampling"));
    assert_eq!(eps, again);
}

#[test]
fn reparameterization_gradient_skips_eps() {
    let mut tape = Tape::new();
    let mu = tape.param(Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap());
    let ls = tape.param(Tensor::from_rows(&[vec![0.1, -0.2]]).unwrap());
    let eps = Tensor::from_rows(&[vec![0.7, -1.3]]).unwrap();
    let lat = LatentVars {
        mu,
        log_sigma: Some(ls),
    };
    let z = reparameterize(&mut tape, &lat, &eps).unwrap();
    let s = tape.sum(z);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(mu).unwrap().data(), [1.0, 1.0]);
    let gl = g.wrt(ls).unwrap();
    assert!((gl.data()[0] - 0.1f64.exp() * 0.7).abs() < 1e-12);
    assert!((gl.data()[1] + (-0.2f64).exp() * 1.3).abs() < 1e-12);
}

fn tied(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut params = init_parameters(cfg, seed).unwrap();
    for part in ["wx", "wh", "b"] {
        let f = params.get(&format!("lstm.fwd.{part}")).unwrap().clone();
        *params.get_mut(&format!("lstm.bwd.{part}")).unwrap() = f;
    }
    params
}

fn run_window(params: &ParamStore, cfg: &ModelConfig, window: &[Tensor]) -> (Tensor, Tensor, Tensor) {
    let mut tape = Tape::new();
    let b = params.bind_constant(&mut tape);
    let vars: Vec<Var> = window.iter().map(|w| tape.constant(w.clone())).collect();
    let (hf, hb) = recurrent_states(&mut tape, &b, cfg, &vars).unwrap();
    let z = predict_latent(&mut tape, &b, cfg, &vars).unwrap();
    (tape.value(hf).clone(), tape.value(hb.unwrap()).clone(), tape.value(z).clone())
}

#[test]
fn window_of_one_gives_latent_shape() {
    let cfg = ModelConfig { window: 1, ..tiny() };
    let params = init_parameters(&cfg, 3).unwrap();
    let (_, _, z) = run_window(&params, &cfg, &[random(&[2, 4], 1)]);
    assert_eq!(z.shape(), [2, 4]);
}

#[test]
fn tied_directions_swap_under_reversal() {
    let cfg = tiny();
    let params = tied(&cfg, 4);
    let w: Vec<Tensor> = (0..3).map(|k| random(&[2, 4], 20 + k)).collect();
    let rev: Vec<Tensor> = w.iter().rev().cloned().collect();
    let (hf, hb, _) = run_window(&params, &cfg, &w);
    let (rf, rb, _) = run_window(&params, &cfg, &rev);
    assert_eq!(hf, rb);
    assert_eq!(hb, rf);

    let pal = vec![w[0].clone(), w[1].clone(), w[0].clone()];
    let pal_rev: Vec<Tensor> = pal.iter().rev().cloned().collect();
    assert_eq!(run_window(&params, &cfg, &pal).2, run_window(&params, &cfg, &pal_rev).2);
}

#[test]
fn predictor_gradient_through_both_directions() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 5).unwrap();
    let fixed: Vec<Tensor> = (0..2).map(|k| random(&[2, 4], 30 + k)).collect();
    let x = random(&[2, 4], 40);
    let worst = grad_check(
        |tape, x| {
            let b = params.bind_constant(tape);
            let f0 = tape.constant(fixed[0].clone());
            let f1 = tape.constant(fixed[1].clone());
            // x sits in the middle so both directions see it mid-sequence.
            let z = predict_latent(tape, &b, &cfg, &[f0, x, f1])?;
            let sq = tape.square(z);
            Ok(tape.sum(sq))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn decode_shapes_norms_and_determinism() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 6).unwrap();
    let policy = Policy::new(cfg.clone(), params).unwrap();
    let window: Vec<Tensor> = (0..3).map(|k| random(&[3, 4], 50 + k)).collect();
    let a = policy.predict(&window).unwrap();
    let b = policy.predict(&window).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for p in &a {
        assert_eq!(p.image.shape(), [3, 16, 16]);
        assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((p.pose.rotation.norm() - 1.0).abs() < 1e-6);
        assert!(p.pose.rotation.w >= 0.0);
    }
}

fn loss_of(cfg: &ModelConfig, t_pred: [f64; 3], t_tgt: [f64; 3], mu: f64, log_sigma: f64) -> BTreeMap<String, f64> {
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
    let pred = PredictionVars {
        image: img,
        translation: tape.constant(Tensor::from_rows(&[t_pred.to_vec()]).unwrap()),
        rotation: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap()),
    };
    let mut target = t_tgt.to_vec();
    target.extend([1.0, 0.0, 0.0, 0.0]);
    let tp = tape.constant(Tensor::from_rows(&[target]).unwrap());
    let mu = tape.constant(Tensor::full(&[1, 1], mu));
    let ls = tape.constant(Tensor::full(&[1, 1], log_sigma));
    let lat = LatentVars {
        mu,
        log_sigma: Some(ls),
    };
    let l = loss(&mut tape, cfg, &pred, img, tp, &lat).unwrap();
    l.values(&tape).unwrap()
}

#[test]
fn loss_examples() {
    let mut cfg = tiny();
    cfg.lambda = [1.0; 6];
    assert_eq!(loss_of(&cfg, [0.2, 0.3, 0.0], [0.2, 0.3, 0.0], 0.0, 0.0)["total"], 0.0);
    assert!((loss_of(&cfg, [0.0; 3], [0.0; 3], 1.0, 0.0)["total"] - 0.5).abs() < 1e-9);
    cfg.lambda = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let l = loss_of(&cfg, [1.0, 0.0, 0.0], [0.0; 3], 0.0, 0.0);
    assert!((l["mae_t"] - 1.0 / 3.0).abs() < 1e-12);
    assert!((l["mse_t"] - 1.0 / 3.0).abs() < 1e-12);
    assert!((l["total"] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn nan_in_loss_reports_divergence() {
    let cfg = tiny();
    let l = std::panic::catch_unwind(|| ()).map(|_| {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::full(&[1, 3, 2, 2], 0.5));
        let pred = PredictionVars {
            image: img,
            translation: tape.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0, 0.0]]).unwrap()),
            rotation: tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap()),
        };
        let tp = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap());
        let mu = tape.constant(Tensor::zeros(&[1, 1]));
        let lat = LatentVars { mu, log_sigma: None };
        let l = loss(&mut tape, &cfg, &pred, img, tp, &lat).unwrap();
        l.values(&tape)
    });
    match l.unwrap() {
        Err(Error::Divergence(map)) => {
            assert!(map["mae_t"].is_nan());
            assert_eq!(map["mae_r"], 0.0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn kl_vanishes_only_at_prior() {
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::zeros(&[3, 5]));
    let ls = tape.constant(Tensor::zeros(&[3, 5]));
    let kl = kl_divergence(&mut tape, mu, ls).unwrap();
    assert!(tape.value(kl).item().abs() < 1e-9);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in -5.0f64..5.0, ls in -10.0f64..4.0) {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full(&[1, 1], mu));
        let l = tape.constant(Tensor::full(&[1, 1], ls));
        let kl = kl_divergence(&mut tape, m, l).unwrap();
        prop_assert!(tape.value(kl).item() >= 0.0);
    }
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 7).unwrap();
    let b = batch(&cfg, 8);
    let eps = vec![sample_eps(4, 4, &mut stream(9, "sampling"))];
    let errs = directional_grad_check(&cfg, &params, &b, &eps, 1e-5, 10).unwrap();
    assert!(errs.contains_key("input.images"));
    assert_eq!(errs.len(), params.len() + 1);
    for (name, e) in errs {
        assert!(e < 1e-4, "{name}: relative error {e}");
    }
}

fn grads(cfg: &ModelConfig, params: &ParamStore, b: &Batch, eps: &[Tensor]) -> (f64, BTreeMap<String, Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let f = forward(&mut tape, &bound, cfg, b, eps).unwrap();
    let mut g = tape.backward(f.loss.total).unwrap();
    (tape.value(f.loss.total).item(), bound.collect_grads(&mut g))
}

#[test]
fn zero_image_weight_ignores_image_head() {
    let mut cfg = tiny();
    cfg.lambda[4] = 0.0;
    let params = init_parameters(&cfg, 12).unwrap();
    let b = batch(&cfg, 13);
    let eps = vec![sample_eps(4, 4, &mut stream(14, "sampling"))];
    let (l1, g) = grads(&cfg, &params, &b, &eps);
    for (name, v) in &g {
        if name.starts_with("dec.up") || name.starts_with("dec.seed") {
            assert!(v.iter().all(|x| *x == 0.0), "{name} has nonzero gradient");
        }
    }
    let mut other = b.clone();
    other.target_images = random(other.target_images.shape(), 99);
    assert_eq!(grads(&cfg, &params, &other, &eps).0, l1);
}

#[test]
fn scaling_weights_scales_loss_and_gradient() {
    let cfg = tiny();
    let mut scaled = cfg.clone();
    let c = 3.5;
    scaled.lambda = cfg.lambda.map(|l| l * c);
    let params = init_parameters(&cfg, 15).unwrap();
    let b = batch(&cfg, 16);
    let eps = vec![sample_eps(4, 4, &mut stream(17, "sampling"))];
    let (l1, g1) = grads(&cfg, &params, &b, &eps);
    let (l2, g2) = grads(&scaled, &params, &b, &eps);
    assert!((l2 - c * l1).abs() <= 1e-12 * l2.abs());
    for (name, a) in &g1 {
        for (x, y) in a.iter().zip(&g2[name]) {
            assert!((y - c * x).abs() <= 1e-9 * (1.0 + y.abs()), "{name}");
        }
    }
}

#[test]
fn deterministic_variants_build_and_run() {
    for (bi, var, fpn) in [(false, true, true), (true, false, true), (true, true, false)] {
        let cfg = ModelConfig {
            bidirectional: bi,
            variational: var,
            use_fpn: fpn,
            ..tiny()
        };
        let params = init_parameters(&cfg, 18).unwrap();
        assert_eq!(params.get("lstm.bwd.wx").is_some(), bi);
        assert_eq!(params.get("head.log_sigma.w").is_some(), var);
        assert_eq!(params.get("fpn.lateral1.w").is_some(), fpn);
        let b = batch(&cfg, 19);
        let eps = vec![sample_eps(4, 4, &mut stream(20, "sampling"))];
        let (l, _) = grads(&cfg, &params, &b, &eps);
        assert!(l.is_finite());
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny();
    let ck = PolicyCheckpoint::initial(cfg, crate::sim::SimConfig::default(), 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(PolicyCheckpoint::load(&path).unwrap(), ck);
    let mut with_run = ck.clone();
    with_run.provenance = Some("seed = 21\n".into());
    with_run.save(&path).unwrap();
    assert_eq!(PolicyCheckpoint::load(&path).unwrap(), with_run);

    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(PolicyCheckpoint::from_bytes(&bytes, &path), Err(Error::Format { .. })));

    let text = String::from_utf8_lossy(&ck.to_bytes()).into_owned();
    let tampered = text.replacen("\"latent_dim\":4", "\"latent_dim\":5", 1);
    assert!(PolicyCheckpoint::from_bytes(tampered.as_bytes(), &path).is_err());
}

#[test]
fn initialization_conventions() {
    let cfg = tiny();
    let a = init_parameters(&cfg, 22).unwrap();
    assert_eq!(a, init_parameters(&cfg, 22).unwrap());
    assert_ne!(a, init_parameters(&cfg, 23).unwrap());
    let b = a.get("lstm.fwd.b").unwrap().data();
    let h = cfg.lstm_hidden;
    assert!(b[..h].iter().all(|v| *v == 0.0));
    assert!(b[h..2 * h].iter().all(|v| *v == 1.0));
    assert!(b[2 * h..].iter().all(|v| *v == 0.0));
    assert!(a.get("head.mu.b").unwrap().data().iter().all(|v| *v == 0.0));
    let w = a.get("enc.stage0.down.w").unwrap();
    let bound = 2f64.sqrt() * (3.0 / 48.0f64).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn decode_quaternions_stay_unit_under_fuzz() {
    let cfg = tiny();
    let params = init_parameters(&cfg, 24).unwrap();
    let mut rng = stream(25, "fuzz");
    let mut tape = Tape::new();
    let b = params.bind_constant(&mut tape);
    let z: Vec<f64> = (0..200 * 4).map(|_| rng.random_range(-5.0..5.0)).collect();
    let zv = tape.constant(Tensor::new(vec![200, 4], z).unwrap());
    let pred = decode(&mut tape, &b, &cfg, zv).unwrap();
    for q in tape.value(pred.rotation).data().chunks(4) {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(q[0] >= 0.0);
    }
}
