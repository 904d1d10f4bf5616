//! Manual probe: PSNR trajectory of the overfit configuration.

use fishsr::data::{generate_dataset, load_all};
use fishsr::networks::{build_model, ModelConfig};
use fishsr::train::{evaluate, train_fishfsrnet, train_parsingnet, TrainConfig};

#[test]
#[ignore]
fn overfit_trajectory() {
    let dir = std::env::temp_dir().join("fishsr-convergence");
    let _ = std::fs::remove_dir_all(&dir);
    let (manifest, _) = generate_dataset(1, 4, 4, &dir).unwrap();
    let data = load_all(&manifest).unwrap();

    let mut cfg = ModelConfig::desk(4);
    cfg.seed = 7;
    let (pnet, fish, mut store) = build_model::<f32>(&cfg).unwrap();

    let t0 = std::time::Instant::now();
    let tc = TrainConfig { batch_size: 4, max_steps: 500, ..Default::default() };
    let out = train_parsingnet(&tc, &cfg, &data, &pnet, &mut store).unwrap();
    let report = evaluate(&pnet, &fish, &store, &data).unwrap();
    println!(
        "[{:.0}s] parsing 500 steps: loss {:.4} -> {:.4}, accuracy {:.4}",
        t0.elapsed().as_secs_f64(),
        out.trace.rows[0].loss,
        out.trace.final_loss().unwrap(),
        report.mean_parsing_acc
    );

    for round in 0..8 {
        let tc = TrainConfig {
            batch_size: 4,
            max_steps: 250,
            seed: round as u64 + 1,
            lr: 3e-4,
            ..Default::default()
        };
        let out = train_fishfsrnet(&tc, &cfg, &data, &pnet, &fish, &mut store).unwrap();
        let report = evaluate(&pnet, &fish, &store, &data).unwrap();
        println!(
            "[{:.0}s] sr steps {}..{}: loss {:.5} -> {:.5}, train PSNR {:.2} dB, SSIM {:.4}",
            t0.elapsed().as_secs_f64(),
            round * 250,
            (round + 1) * 250,
            out.trace.rows[0].loss,
            out.trace.final_loss().unwrap(),
            report.mean_psnr,
            report.mean_ssim
        );
    }
}
