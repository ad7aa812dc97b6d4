use loopx::data::{synth_corpus, CrfSpec, Scene, DEFAULT_EVS};
use loopx::eval::{evaluate, psnr, psnr_from_mse, ssim_metric, Psnr, PsnrMean};
use loopx::fusion::FusionParams;
use loopx::model::{ModelDims, ModelParams};
use loopx::{Error, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| {
        [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
    })
}

fn identity() -> ModelParams {
    ModelParams::init_identity(ModelDims::default()).unwrap()
}

#[test]
fn psnr_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random_image(&mut rng, 9, 7), random_image(&mut rng, 9, 7));
    let mut se = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        se += (*x as f64 - *y as f64).powi(2);
    }
    let expected = 10.0 * (se / (9 * 7 * 3) as f64).recip().log10();
    let got = psnr(&a, &b).unwrap().finite().unwrap();
    assert!((got - expected).abs() < 1e-6);
    assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
    assert!(matches!(psnr_from_mse(0.01), Psnr::Finite(v) if (v - 20.0).abs() < 1e-12));
    assert!(matches!(psnr(&a, &Image::zeros(9, 8)), Err(Error::DimensionMismatch(..))));
}

#[test]
fn psnr_decreases_with_growing_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = random_image(&mut rng, 16, 16).map(|v| 0.25 + 0.5 * v);
    let noise = random_image(&mut rng, 16, 16);
    let mut prev = f64::INFINITY;
    for k in 1..=10 {
        let s = 0.02 * k as f32;
        let data = base.data().iter().zip(noise.data()).map(|(b, n)| b + s * (n - 0.5)).collect();
        let pert = Image::new(16, 16, data).unwrap();
        let v = psnr(&base, &pert).unwrap().finite().unwrap();
        assert!(v < prev);
        prev = v;
    }
}

#[test]
fn ssim_metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_image(&mut rng, 16, 16), random_image(&mut rng, 16, 16));
    assert_eq!(ssim_metric(&a, &a).unwrap(), 1.0);
    assert!((ssim_metric(&a, &b).unwrap() - ssim_metric(&b, &a).unwrap()).abs() < 1e-9);
    let c = ssim_metric(&Image::zeros(16, 16), &Image::filled(16, 16, [1.0; 3])).unwrap();
    assert!((c - 9.999e-5).abs() < 1e-8);
}

#[test]
fn copies_of_ground_truth_score_perfectly() {
    let scene = &synth_corpus(1, 4, 64, 48, &DEFAULT_EVS, &CrfSpec::default()).unwrap()[0];
    let gt = scene.gt.clone().unwrap();
    let copies = Scene {
        id: "copies".into(),
        evs: vec![-1.0, 0.0, 1.0],
        images: vec![gt.clone(); 3],
        gt: Some(gt),
    };
    let report = evaluate(&identity(), &[copies], &FusionParams::default()).unwrap();
    let row = &report.scenes[0];
    assert!(row.sec.iter().all(|e| e.psnr == Psnr::Infinite));
    assert!(row.mef_psnr.at_least(40.0), "{}", row.mef_psnr);
    assert_eq!(report.sec_psnr, PsnrMean { mean: None, infinite: 3 });
}

#[test]
fn report_means_are_row_means_and_deterministic() {
    let corpus = synth_corpus(4, 10, 32, 32, &DEFAULT_EVS, &CrfSpec::default()).unwrap();
    let params = identity();
    let fusion = FusionParams::default();
    let report = evaluate(&params, &corpus, &fusion).unwrap();
    assert_eq!(report, evaluate(&params, &corpus, &fusion).unwrap());
    assert_eq!(report.to_csv(), evaluate(&params, &corpus, &fusion).unwrap().to_csv());

    let n = report.scenes.len() as f64;
    let mef: f64 = report.scenes.iter().map(|s| s.mef_psnr.finite().unwrap()).sum::<f64>() / n;
    let mef_ssim: f64 = report.scenes.iter().map(|s| s.mef_ssim).sum::<f64>() / n;
    let row_sec: Vec<f64> = report
        .scenes
        .iter()
        .map(|s| s.sec.iter().map(|e| e.psnr.finite().unwrap()).sum::<f64>() / s.sec.len() as f64)
        .collect();
    let sec = row_sec.iter().sum::<f64>() / n;
    assert!((report.mef_psnr.mean.unwrap() - mef).abs() < 1e-9);
    assert!((report.mef_ssim - mef_ssim).abs() < 1e-12);
    assert!((report.sec_psnr.mean.unwrap() - sec).abs() < 1e-9);
    assert_eq!(report.sec_psnr.infinite, 0);
}

#[test]
fn missing_ground_truth_is_an_error() {
    let mut scene = synth_corpus(1, 1, 16, 16, &[0.0], &CrfSpec::default()).unwrap().remove(0);
    scene.gt = None;
    assert!(matches!(
        evaluate(&identity(), &[scene], &FusionParams::default()),
        Err(Error::MissingGroundTruth(_))
    ));
}
