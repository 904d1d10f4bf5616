//! The five subcommands.

use std::path::{Path, PathBuf};

use fishsr::data::{self, DatasetManifest};
use fishsr::fio;
use fishsr::gradcheck;
use fishsr::networks::{build_model, ModelConfig};
use fishsr::tensor::{Shape, Tensor};
use fishsr::train::{self, TrainConfig, TrainStage};
use fishsr::Error;

use crate::args::{resolve, Resolved, Spec, UsageError};
use crate::{ExitCode, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};

fn usage_err(e: UsageError) -> (ExitCode, String) {
    (EXIT_USAGE, e.to_string())
}

fn lib_err(e: Error) -> (ExitCode, String) {
    let code = match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    };
    (code, e.to_string())
}

fn print_wrote(paths: &[PathBuf]) {
    println!("WROTE:");
    for p in paths {
        println!("{}", p.display());
    }
}

const SYNTH_SCHEMA: &[Spec] = &[
    Spec::value("seed", Some("0"), false),
    Spec::value("count", Some("4"), false),
    Spec::value("scale", Some("4"), false),
    Spec::value("out", None, true),
];

pub fn cmd_synth(args: &[String]) -> Result<ExitCode, (ExitCode, String)> {
    let r = resolve("synth", SYNTH_SCHEMA, args).map_err(usage_err)?;
    r.print();
    let seed = r.get_u64("seed").map_err(usage_err)?;
    let count = r.get_usize("count").map_err(usage_err)?;
    let scale = r.get_usize("scale").map_err(usage_err)?;
    let out = PathBuf::from(r.get("out"));
    let (manifest, written) =
        data::generate_dataset(seed, count, scale, &out).map_err(lib_err)?;
    println!("manifest: {}", manifest.root.join("manifest.txt").display());
    print_wrote(&written);
    Ok(EXIT_OK)
}

const TRAIN_SCHEMA: &[Spec] = &[
    Spec::value("stage", Some("both"), false),
    Spec::value("data", None, true),
    Spec::value("steps", Some("200"), false),
    Spec::value("seed", Some("0"), false),
    Spec::value("ckpt-dir", Some("ckpts"), false),
    Spec::value("batch", Some("8"), false),
    Spec::value("lr", Some("0.0001"), false),
    Spec::value("channels", Some("64"), false),
    Spec::value("ckpt-interval", Some(""), false),
    Spec::flag("joint"),
    Spec::flag("no-msrb"),
    Spec::flag("no-ca"),
    Spec::flag("no-sa"),
    Spec::flag("no-pmb"),
];

fn model_config_from(r: &Resolved, scale: usize) -> Result<ModelConfig, (ExitCode, String)> {
    let mut cfg = ModelConfig::new(scale);
    cfg.channels = r.get_usize("channels").map_err(usage_err)?;
    cfg.seed = r.get_u64("seed").map_err(usage_err)?;
    cfg.use_msrb = !r.get_bool("no-msrb").map_err(usage_err)?;
    cfg.use_ca = !r.get_bool("no-ca").map_err(usage_err)?;
    cfg.use_sa = !r.get_bool("no-sa").map_err(usage_err)?;
    cfg.use_pmb = !r.get_bool("no-pmb").map_err(usage_err)?;
    cfg.validate().map_err(lib_err)?;
    Ok(cfg)
}

fn train_config_from(r: &Resolved, ckpt_dir: &Path) -> Result<TrainConfig, (ExitCode, String)> {
    let interval = match r.get_opt("ckpt-interval") {
        Some(v) => Some(
            v.parse::<usize>()
                .map_err(|_| usage_err(UsageError(format!("--ckpt-interval: bad value {v:?}"))))?,
        ),
        None => None,
    };
    Ok(TrainConfig {
        batch_size: r.get_usize("batch").map_err(usage_err)?,
        max_steps: r.get_usize("steps").map_err(usage_err)?,
        lr: r.get_f64("lr").map_err(usage_err)?,
        seed: r.get_u64("seed").map_err(usage_err)?,
        ckpt_interval: interval,
        ckpt_dir: Some(ckpt_dir.to_path_buf()),
        joint: r.get_bool("joint").map_err(usage_err)?,
    })
}

pub fn cmd_train(args: &[String]) -> Result<ExitCode, (ExitCode, String)> {
    let r = resolve("train", TRAIN_SCHEMA, args).map_err(usage_err)?;
    r.print();
    let stage = r.get("stage").to_string();
    if !matches!(stage.as_str(), "parsing" | "sr" | "both") {
        return Err((EXIT_USAGE, format!("--stage must be parsing, sr or both, got {stage:?}")));
    }
    let ckpt_dir = PathBuf::from(r.get("ckpt-dir"));
    let manifest = data::load_manifest(Path::new(r.get("data"))).map_err(lib_err)?;
    let samples = data::load_all(&manifest).map_err(lib_err)?;
    let tc = train_config_from(&r, &ckpt_dir)?;
    let mut written = Vec::new();

    // stage `sr` resumes from the parsing checkpoint; other stages build
    // a fresh model from flags
    let (cfg, mut store, pnet, fish) = if stage == "sr" {
        let parsing_ckpt = train::final_checkpoint_path(&ckpt_dir, TrainStage::Parsing);
        if !parsing_ckpt.exists() {
            return Err((
                EXIT_USAGE,
                format!(
                    "stage sr needs a parsing checkpoint at {} (run --stage parsing or both first)",
                    parsing_ckpt.display()
                ),
            ));
        }
        let (cfg, params) = fio::read_checkpoint(&parsing_ckpt).map_err(lib_err)?;
        println!(
            "model from checkpoint: scale x{}, {} channels, msrb={} ca={} sa={} pmb={}",
            cfg.scale, cfg.channels, cfg.use_msrb, cfg.use_ca, cfg.use_sa, cfg.use_pmb
        );
        let (pnet, fish, mut store) = build_model::<f32>(&cfg).map_err(lib_err)?;
        fio::restore_store(&mut store, params, &parsing_ckpt).map_err(lib_err)?;
        (cfg, store, pnet, fish)
    } else {
        let cfg = model_config_from(&r, manifest.scale)?;
        let (pnet, fish, store) = build_model::<f32>(&cfg).map_err(lib_err)?;
        (cfg, store, pnet, fish)
    };
    if cfg.scale != manifest.scale {
        return Err((
            EXIT_USAGE,
            format!("checkpoint scale x{} does not match dataset x{}", cfg.scale, manifest.scale),
        ));
    }

    let mut trace = train::LossTrace::default();
    if stage == "parsing" || stage == "both" {
        let out =
            train::train_parsingnet(&tc, &cfg, &samples, &pnet, &mut store).map_err(lib_err)?;
        trace.rows.extend(out.trace.rows);
        written.extend(out.checkpoints);
    }
    if stage == "sr" || stage == "both" {
        let out = train::train_fishfsrnet(&tc, &cfg, &samples, &pnet, &fish, &mut store)
            .map_err(lib_err)?;
        trace.rows.extend(out.trace.rows);
        written.extend(out.checkpoints);
    }

    let csv_path = ckpt_dir.join("loss.csv");
    trace.write_csv(&csv_path).map_err(lib_err)?;
    written.push(csv_path);
    if let Some(loss) = trace.final_loss() {
        println!("final loss: {loss}");
    }
    print_wrote(&written);
    Ok(EXIT_OK)
}

const INFER_SCHEMA: &[Spec] = &[
    Spec::value("ckpt", None, true),
    Spec::value("input", None, true),
    Spec::value("out", None, true),
    Spec::value("parsing-map", Some(""), false),
    Spec::value("rotate-parsing", Some(""), false),
    Spec::flag("zero-parsing"),
];

fn load_lr_image(path: &Path) -> Result<Tensor<f32>, (ExitCode, String)> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => fio::read_ppm(path).map_err(lib_err)?,
        _ => fio::read_tensor::<f32>(path).map_err(lib_err)?,
    };
    if img.shape().c != 3 || img.shape().n != 1 {
        return Err((
            EXIT_USAGE,
            format!("input must be one RGB image, got shape {}", img.shape()),
        ));
    }
    Ok(img)
}

pub fn cmd_infer(args: &[String]) -> Result<ExitCode, (ExitCode, String)> {
    let r = resolve("infer", INFER_SCHEMA, args).map_err(usage_err)?;
    r.print();
    let (cfg, params) = fio::read_checkpoint(Path::new(r.get("ckpt"))).map_err(lib_err)?;
    let (pnet, fish, mut store) = build_model::<f32>(&cfg).map_err(lib_err)?;
    fio::restore_store(&mut store, params, Path::new(r.get("ckpt"))).map_err(lib_err)?;

    let lr = load_lr_image(Path::new(r.get("input")))?;
    let ls = lr.shape();

    let mut map = if r.get_bool("zero-parsing").map_err(usage_err)? {
        Tensor::zeros(Shape::new(1, 1, ls.h, ls.w))
    } else if let Some(path) = r.get_opt("parsing-map") {
        let m = fio::read_tensor::<f32>(Path::new(path)).map_err(lib_err)?;
        if m.shape() != Shape::new(1, 1, ls.h, ls.w) {
            return Err((
                EXIT_USAGE,
                format!(
                    "override parsing map is {} but the input needs (1,1,{},{})",
                    m.shape(),
                    ls.h,
                    ls.w
                ),
            ));
        }
        m
    } else {
        train::predict_map(&pnet, &store, &lr).map_err(lib_err)?
    };
    if let Some(deg) = r.get_opt("rotate-parsing") {
        let degrees: f64 = deg
            .parse()
            .map_err(|_| (EXIT_USAGE, format!("--rotate-parsing: bad angle {deg:?}")))?;
        map = data::rotate_map(&map, degrees);
    }

    let sr = train::infer_with_map(&fish, &store, &lr, &map).map_err(lib_err)?;
    let stem = PathBuf::from(r.get("out"));
    let stem = stem.with_extension("");
    let ften = stem.with_extension("ften");
    let ppm = stem.with_extension("ppm");
    fio::write_tensor(&ften, &sr).map_err(lib_err)?;
    fio::write_ppm(&ppm, &sr.clamp01()).map_err(lib_err)?;
    println!("output: {}x{} -> {}x{}", ls.w, ls.h, sr.shape().w, sr.shape().h);
    print_wrote(&[ften, ppm]);
    Ok(EXIT_OK)
}

const EVAL_SCHEMA: &[Spec] = &[
    Spec::value("ckpt", None, true),
    Spec::value("data", None, true),
    Spec::value("split", Some("train"), false),
    Spec::value("out", Some("metrics.csv"), false),
];

fn resolve_split_root(data: &Path, split: &str) -> PathBuf {
    let sub = data.join(split);
    if sub.join("manifest.txt").exists() {
        sub
    } else {
        data.to_path_buf()
    }
}

pub fn cmd_eval(args: &[String]) -> Result<ExitCode, (ExitCode, String)> {
    let r = resolve("eval", EVAL_SCHEMA, args).map_err(usage_err)?;
    r.print();
    let (cfg, params) = fio::read_checkpoint(Path::new(r.get("ckpt"))).map_err(lib_err)?;
    let (pnet, fish, mut store) = build_model::<f32>(&cfg).map_err(lib_err)?;
    fio::restore_store(&mut store, params, Path::new(r.get("ckpt"))).map_err(lib_err)?;

    let root = resolve_split_root(Path::new(r.get("data")), r.get("split"));
    let mut manifest: DatasetManifest = data::load_manifest(&root).map_err(lib_err)?;
    manifest.split = r.get("split").to_string();
    if manifest.scale != cfg.scale {
        return Err((
            EXIT_USAGE,
            format!("checkpoint scale x{} does not match dataset x{}", cfg.scale, manifest.scale),
        ));
    }
    let samples = data::load_all(&manifest).map_err(lib_err)?;
    let report = train::evaluate(&pnet, &fish, &store, &samples).map_err(lib_err)?;

    let out = PathBuf::from(r.get("out"));
    std::fs::write(&out, report.to_csv()).map_err(|e| lib_err(Error::io(&out, e)))?;
    println!(
        "mean psnr {} dB, ssim {}, parsing accuracy {}",
        report.mean_psnr, report.mean_ssim, report.mean_parsing_acc
    );
    if report.psnr_infinite_count > 0 {
        println!(
            "note: {} sample(s) with infinite psnr excluded from the mean",
            report.psnr_infinite_count
        );
    }
    print_wrote(&[out]);
    Ok(EXIT_OK)
}

const GRADCHECK_SCHEMA: &[Spec] =
    &[Spec::value("block", Some("all"), false), Spec::value("seed", Some("3"), false)];

pub fn cmd_gradcheck(args: &[String]) -> Result<ExitCode, (ExitCode, String)> {
    let r = resolve("gradcheck", GRADCHECK_SCHEMA, args).map_err(usage_err)?;
    r.print();
    let seed = r.get_u64("seed").map_err(usage_err)?;
    let block = r.get("block");
    let names = if block == "all" {
        gradcheck::suite_names()
    } else {
        vec![block.to_string()]
    };
    let mut failures = Vec::new();
    for name in &names {
        let entry = gradcheck::run_check(name, seed).map_err(lib_err)?;
        let verdict = if entry.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} max_rel_err {:.3e} (tolerance {:.0e}) {verdict}",
            entry.name, entry.max_rel_err, entry.tolerance
        );
        if !entry.passed() {
            failures.push(entry.name.clone());
        }
    }
    if failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err((EXIT_VERIFY, format!("gradient check failed for: {}", failures.join(", "))))
    }
}
