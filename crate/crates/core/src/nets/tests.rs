use super::*;

fn tiny_ae() -> AutoencoderConfig {
    AutoencoderConfig {
        d: 2,
        m: 16,
        hidden: 4,
        latent_dim: 4,
        ..AutoencoderConfig::default()
    }
}

fn random_windows(n: usize, d: usize, m: usize, seed: u64) -> Vec<SeriesWindow> {
    use rand::Rng;
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let v = (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            SeriesWindow::new(d, m, v).unwrap()
        })
        .collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

#[test]
fn zero_head_encoder_outputs_standard_posterior() {
    let cfg = AutoencoderConfig {
        zero_head: true,
        ..tiny_ae()
    };
    let enc = Encoder::new(&cfg, DType::F64, &mut seeded(1)).unwrap();
    let p = enc.encode_windows(&random_windows(3, 2, 16, 2)).unwrap();
    for i in 0..3 {
        let (mu, lv) = p.row(i).unwrap();
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
    }
}

#[test]
fn encoder_is_deterministic_and_batch_consistent() {
    let enc = Encoder::new(&tiny_ae(), DType::F64, &mut seeded(3)).unwrap();
    let ws = random_windows(5, 2, 16, 4);
    let batch = enc.encode_windows(&ws).unwrap();
    let again = enc.encode_windows(&ws).unwrap();
    assert_eq!(max_abs_diff(&batch.mu, &again.mu), 0.0);
    for (i, w) in ws.iter().enumerate() {
        let single = enc.encode_windows(std::slice::from_ref(w)).unwrap();
        let (mu_b, lv_b) = batch.row(i).unwrap();
        let (mu_s, lv_s) = single.row(0).unwrap();
        for (a, b) in mu_b.iter().zip(&mu_s).chain(lv_b.iter().zip(&lv_s)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Encoder::new(&tiny_ae(), DType::F32, &mut seeded(9)).unwrap();
    let b = Encoder::new(&tiny_ae(), DType::F32, &mut seeded(9)).unwrap();
    for ((_, va), (_, vb)) in a.named_vars().iter().zip(b.named_vars().iter()) {
        assert_eq!(max_abs_diff(va.as_tensor(), vb.as_tensor()), 0.0);
    }
}

#[test]
fn encoder_rejects_wrong_shape() {
    let enc = Encoder::new(&tiny_ae(), DType::F64, &mut seeded(3)).unwrap();
    assert!(enc.encode_windows(&random_windows(1, 1, 16, 0)).is_err());
    assert!(enc.encode_windows(&random_windows(1, 2, 12, 0)).is_err());
}

#[test]
fn decoder_output_shape_for_odd_lengths() {
    for m in [2, 5, 16, 17, 33, 100] {
        let cfg = AutoencoderConfig { m, ..tiny_ae() };
        let dec = Decoder::new(&cfg, DType::F64, &mut seeded(5)).unwrap();
        let out = dec.decode_rows(&[vec![0.3; 4], vec![-0.1; 4]]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|w| w.shape() == (2, m)));
        let enc = Encoder::new(&cfg, DType::F64, &mut seeded(5)).unwrap();
        assert_eq!(enc.encode_windows(&out).unwrap().batch(), 2);
    }
}

#[test]
fn decoder_is_deterministic() {
    let dec = Decoder::new(&tiny_ae(), DType::F32, &mut seeded(6)).unwrap();
    let z = vec![vec![0.5, -0.2, 0.1, 1.0]];
    assert_eq!(dec.decode_rows(&z).unwrap(), dec.decode_rows(&z).unwrap());
}

#[test]
fn discriminator_batch_matches_single() {
    let cfg = DiscriminatorConfig {
        d: 2,
        hidden: 6,
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(&cfg, DType::F64, &mut seeded(7)).unwrap();
    let ws = random_windows(4, 2, 16, 8);
    let logits: Vec<f64> = disc
        .forward(&windows_to_tensor(&ws, DType::F64).unwrap())
        .unwrap()
        .to_vec1()
        .unwrap();
    for (w, l) in ws.iter().zip(&logits) {
        let single = disc.discriminate(w).unwrap();
        assert!((single - l).abs() < 1e-12);
        assert!(single.is_finite());
    }
}

#[test]
fn reparameterisation_formula_and_limits() {
    let dev = Device::Cpu;
    let mu = Tensor::new(&[[0.5f64, -1.0]], &dev).unwrap();
    let logvar = Tensor::new(&[[0.0f64, 2.0]], &dev).unwrap();
    let p = PosteriorParams { mu, logvar };
    let eps = Tensor::new(&[[1.5f64, -0.5]], &dev).unwrap();
    let z: Vec<Vec<f64>> = reparameterize_with(&p, &eps).unwrap().to_vec2().unwrap();
    assert!((z[0][0] - 2.0).abs() < 1e-15);
    assert!((z[0][1] - (-1.0 - 0.5 * 1f64.exp())).abs() < 1e-12);

    let collapsed = PosteriorParams {
        mu: Tensor::new(&[[0.25f64]], &dev).unwrap(),
        logvar: Tensor::new(&[[LOGVAR_MIN]], &dev).unwrap(),
    };
    let z = reparameterize(&collapsed, &mut seeded(0)).unwrap();
    let z: f64 = z.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    assert!((z - 0.25).abs() < 1e-5);
}

#[test]
fn reparameterisation_moments() {
    let n = 100_000;
    let l = 3;
    let p = PosteriorParams {
        mu: Tensor::zeros((n, l), DType::F64, &Device::Cpu).unwrap(),
        logvar: Tensor::zeros((n, l), DType::F64, &Device::Cpu).unwrap(),
    };
    let z: Vec<Vec<f64>> = reparameterize(&p, &mut seeded(42)).unwrap().to_vec2().unwrap();
    for j in 0..l {
        let mean = z.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}

fn tiny_vf(zero_head: bool) -> VectorFieldConfig {
    VectorFieldConfig {
        latent_dim: 4,
        depth: 2,
        hidden: 16,
        time_dim: 128,
        zero_head,
        ..VectorFieldConfig::default()
    }
}

#[test]
fn time_embedding_contract() {
    let vf = VectorField::new(&tiny_vf(true), DType::F64, &mut seeded(1)).unwrap();
    let e0 = vf.time_embed(0.0).unwrap();
    let e1 = vf.time_embed(1.0).unwrap();
    assert_eq!(e0.len(), 128);
    assert_eq!(e1.len(), 128);
    assert!(e0.iter().zip(&e1).any(|(a, b)| a != b));
    for k in 0..=20 {
        let t = k as f64 / 20.0 * (1.0 - 1e-6);
        let a = vf.time_embed(t).unwrap();
        let b = vf.time_embed(t + 1e-6).unwrap();
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "t={t} dist={dist}");
    }
    assert!(vf.time_embed(-0.01).is_err());
    assert!(vf.time_embed(1.01).is_err());
}

#[test]
fn zero_head_field_is_zero() {
    let vf = VectorField::new(&tiny_vf(true), DType::F64, &mut seeded(2)).unwrap();
    for t in [0.0, 0.3, 1.0] {
        let v = vf.velocity(&[1.0, -2.0, 0.5, 3.0], t).unwrap();
        assert_eq!(v, vec![0.0; 4]);
    }
    assert!(vf.velocity(&[0.0; 4], 1.5).is_err());
    assert!(vf.velocity(&[0.0; 3], 0.5).is_err());
}

#[test]
fn field_is_deterministic_and_lipschitz_at_init() {
    use rand::Rng;
    let vf = VectorField::new(&tiny_vf(false), DType::F64, &mut seeded(3)).unwrap();
    let mut rng = seeded(4);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let t = rng.random::<f64>();
        let a = vf.velocity(&z, t).unwrap();
        assert_eq!(a, vf.velocity(&z, t).unwrap());
        let zh: Vec<f64> = z.iter().zip(&h).map(|(a, b)| a + b).collect();
        let b = vf.velocity(&zh, t).unwrap();
        let num = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    assert!(worst.is_finite() && worst < 100.0, "Lipschitz ratio {worst}");
}

#[test]
fn deep_clone_is_independent() {
    let enc = Encoder::new(&tiny_ae(), DType::F32, &mut seeded(5)).unwrap();
    let copy = enc.deep_clone().unwrap();
    let (_, v) = &enc.named_vars()[0];
    v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    let (_, c) = &copy.named_vars()[0];
    assert!(max_abs_diff(c.as_tensor(), v.as_tensor()) > 0.0);
}
