//! Synthetic face data with analytic parsing masks, the bicubic
//! degradation pipeline, and dataset generation/loading.
//!
//! A sample is a procedurally drawn "face": a smooth background gradient,
//! a skin ellipse with gentle shading, and three darker component
//! ellipses (two eyes, one mouth) cut out of it. The parsing ground truth
//! is exactly 1 on skin-minus-component pixels and 0 elsewhere, so mask
//! quality is never limited by an external segmenter.
//!
//! On disk a dataset is
//!
//! ```text
//! root/
//!   manifest.txt          # "scale=<s>" then one sample id per line
//!   hr/<id>.ften|.ppm     # 128x128 ground truth
//!   lr/<id>.ften|.ppm     # bicubic-downsampled input
//!   parsing/<id>.ften     # binary mask at LR resolution
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fio;
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Shape, Tensor};

/// HR side length used by generated datasets.
pub const HR_SIZE: usize = 128;

/// One dataset entry, fully resident.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub parsing_gt: Tensor<f32>,
}

/// Resolved dataset directory: root, scale, ordered ids.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scale: usize,
    pub ids: Vec<String>,
    pub split: String,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

/// Deterministic procedural face image plus its exact binary skin mask.
///
/// Geometry: the skin ellipse center is jittered up to 10% of the image
/// size around the middle and its semi-axes span 0.30..0.45 of the size;
/// eyes and mouth sit at fixed positions relative to the skin axes, which
/// keeps them inside the skin for every draw. All color fields are smooth
/// and clamped to [0, 1].
pub fn synth_face(seed: u64, size: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !matches!(size, 32 | 64 | 128) {
        return Err(Error::config(format!("unsupported synth size {size} (use 32, 64 or 128)")));
    }
    let mut rng = SplitMix64::new(seed);
    let s = size as f64;

    // background gradient between two colors along a random direction
    let bg_a = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let bg_b = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let (dir_x, dir_y) = (theta.cos(), theta.sin());

    // skin tone around a plausible base, with low-amplitude shading
    let tone =
        [rng.uniform(0.62, 0.88), rng.uniform(0.45, 0.70), rng.uniform(0.35, 0.60)];
    let shade_amp = rng.uniform(0.03, 0.08);
    let shade_fx = rng.uniform(0.5, 1.5);
    let shade_fy = rng.uniform(0.5, 1.5);
    let shade_phase = rng.uniform(0.0, std::f64::consts::TAU);

    let skin = Ellipse {
        cx: s * (0.5 + rng.uniform(-0.1, 0.1)),
        cy: s * (0.5 + rng.uniform(-0.1, 0.1)),
        ax: s * rng.uniform(0.30, 0.45),
        ay: s * rng.uniform(0.30, 0.45),
    };
    let eye_l = Ellipse {
        cx: skin.cx - 0.45 * skin.ax,
        cy: skin.cy - 0.35 * skin.ay,
        ax: 0.22 * skin.ax,
        ay: 0.14 * skin.ay,
    };
    let eye_r = Ellipse { cx: skin.cx + 0.45 * skin.ax, cy: eye_l.cy, ax: eye_l.ax, ay: eye_l.ay };
    let mouth = Ellipse {
        cx: skin.cx,
        cy: skin.cy + 0.45 * skin.ay,
        ax: 0.35 * skin.ax,
        ay: 0.12 * skin.ay,
    };
    let eye_tone = [rng.uniform(0.05, 0.20), rng.uniform(0.05, 0.18), rng.uniform(0.05, 0.18)];
    let mouth_tone = [rng.uniform(0.45, 0.65), rng.uniform(0.15, 0.30), rng.uniform(0.15, 0.30)];

    let mut img = Tensor::<f32>::zeros(Shape::new(1, 3, size, size));
    let mut mask = Tensor::<f32>::zeros(Shape::new(1, 1, size, size));
    for py in 0..size {
        for px in 0..size {
            // sample at pixel centers
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let t = ((x * dir_x + y * dir_y) / s + 1.0) / 2.0;
            let mut color = [
                bg_a[0] + (bg_b[0] - bg_a[0]) * t,
                bg_a[1] + (bg_b[1] - bg_a[1]) * t,
                bg_a[2] + (bg_b[2] - bg_a[2]) * t,
            ];
            let on_skin = skin.contains(x, y);
            let on_component =
                eye_l.contains(x, y) || eye_r.contains(x, y) || mouth.contains(x, y);
            if on_skin {
                let shade = 1.0
                    + shade_amp
                        * (std::f64::consts::TAU * (x * shade_fx + y * shade_fy) / s
                            + shade_phase)
                            .sin();
                color = [tone[0] * shade, tone[1] * shade, tone[2] * shade];
                if on_component {
                    color = if mouth.contains(x, y) { mouth_tone } else { eye_tone };
                }
            }
            for (c, v) in color.iter().enumerate() {
                img.set(0, c, py, px, v.clamp(0.0, 1.0) as f32);
            }
            if on_skin && !on_component {
                mask.set(0, 0, py, px, 1.0);
            }
        }
    }
    Ok((img, mask))
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic resampling with Catmull-Rom weights, edge-clamped
/// taps and center-aligned mapping `src = (dst + 0.5) * (in / out) - 0.5`.
/// Weights are computed and accumulated in double precision.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = img.shape();
    let resample_axis = |in_len: usize, out_len: usize| -> Vec<(isize, [f64; 4])> {
        (0..out_len)
            .map(|d| {
                let src = (d as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
                let base = src.floor() as isize - 1;
                let f = src - src.floor();
                let w = [
                    cubic_weight(f + 1.0),
                    cubic_weight(f),
                    cubic_weight(1.0 - f),
                    cubic_weight(2.0 - f),
                ];
                (base, w)
            })
            .collect()
    };
    let rows = resample_axis(s.h, out_h);
    let cols = resample_axis(s.w, out_w);

    // vertical pass then horizontal pass
    let mut mid = vec![0.0f64; s.n * s.c * out_h * s.w];
    for p in 0..s.n * s.c {
        let plane = &img.data()[p * s.h * s.w..(p + 1) * s.h * s.w];
        for (oy, (base, w)) in rows.iter().enumerate() {
            for x in 0..s.w {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let iy = (base + k as isize).clamp(0, s.h as isize - 1) as usize;
                    acc += wk * plane[iy * s.w + x].to_f64();
                }
                mid[(p * out_h + oy) * s.w + x] = acc;
            }
        }
    }
    let os = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(os);
    for p in 0..s.n * s.c {
        for oy in 0..out_h {
            let row = &mid[(p * out_h + oy) * s.w..(p * out_h + oy + 1) * s.w];
            for (ox, (base, w)) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let ix = (base + k as isize).clamp(0, s.w as isize - 1) as usize;
                    acc += wk * row[ix];
                }
                out.data_mut()[(p * out_h + oy) * out_w + ox] = T::from_f64(acc);
            }
        }
    }
    out
}

/// Block-average a binary mask over scale x scale cells and threshold at
/// 0.5 (ties round up), producing a binary mask at the low resolution.
pub fn parsing_downsample<T: Scalar>(mask: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.h % scale != 0 || s.w % scale != 0 {
        return Err(Error::contract(format!(
            "mask {}x{} not divisible by scale {scale}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / scale, s.w / scale);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let cell = (scale * scale) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0;
                    for ky in 0..scale {
                        for kx in 0..scale {
                            sum += mask.at(n, c, oy * scale + ky, ox * scale + kx).to_f64();
                        }
                    }
                    let v = if sum / cell >= 0.5 { T::ONE } else { T::ZERO };
                    out.set(n, c, oy, ox, v);
                }
            }
        }
    }
    Ok(out)
}

/// Rotate a single-channel map about its center by `degrees`
/// (counter-clockwise), nearest sampling, zero fill. Zero degrees is the
/// exact identity.
pub fn rotate_map<T: Scalar>(map: &Tensor<T>, degrees: f64) -> Tensor<T> {
    let s = map.shape();
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = (s.w as f64 - 1.0) / 2.0;
    let cy = (s.h as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    // inverse rotation of the destination coordinate
                    let sx = cos * dx + sin * dy + cx;
                    let sy = -sin * dx + cos * dy + cy;
                    let ix = (sx + 0.5).floor() as isize;
                    let iy = (sy + 0.5).floor() as isize;
                    if ix >= 0 && ix < s.w as isize && iy >= 0 && iy < s.h as isize {
                        out.set(n, c, y, x, map.at(n, c, iy as usize, ix as usize));
                    }
                }
            }
        }
    }
    out
}

fn sample_paths(root: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        root.join("hr").join(format!("{id}.ften")),
        root.join("lr").join(format!("{id}.ften")),
        root.join("parsing").join(format!("{id}.ften")),
    )
}

/// Generate `n_samples` samples at the given scale under `out_dir`.
/// Pure function of (seed, n_samples, scale): reruns are byte-identical.
/// Returns the manifest and every path written.
pub fn generate_dataset(
    seed: u64,
    n_samples: usize,
    scale: usize,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    if !matches!(scale, 4 | 8 | 16) {
        return Err(Error::config(format!("scale must be 4, 8 or 16, got {scale}")));
    }
    if n_samples == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    let mut written = Vec::new();
    for sub in ["hr", "lr", "parsing"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut seeds = SplitMix64::new(seed);
    let sample_seeds: Vec<u64> = (0..n_samples).map(|_| seeds.next_u64()).collect();
    let mut ids = Vec::with_capacity(n_samples);
    for (i, &sample_seed) in sample_seeds.iter().enumerate() {
        let id = format!("sample_{i:04}");
        let (hr, hr_mask) = synth_face(sample_seed, HR_SIZE)?;
        let lr = bicubic_resize(&hr, HR_SIZE / scale, HR_SIZE / scale).clamp01();
        let parsing = parsing_downsample(&hr_mask, scale)?;
        let (hp, lp, pp) = sample_paths(out_dir, &id);
        fio::write_tensor(&hp, &hr)?;
        fio::write_tensor(&lp, &lr)?;
        fio::write_tensor(&pp, &parsing)?;
        let hr_ppm = out_dir.join("hr").join(format!("{id}.ppm"));
        let lr_ppm = out_dir.join("lr").join(format!("{id}.ppm"));
        fio::write_ppm(&hr_ppm, &hr)?;
        fio::write_ppm(&lr_ppm, &lr)?;
        written.extend([hp, lp, pp, hr_ppm, lr_ppm]);
        ids.push(id);
    }
    let manifest_path = out_dir.join("manifest.txt");
    let mut text = format!("scale={scale}\n");
    for id in &ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    written.push(manifest_path);
    Ok((
        DatasetManifest { root: out_dir.to_path_buf(), scale, ids, split: "train".to_string() },
        written,
    ))
}

/// Read a manifest written by [`generate_dataset`].
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(&path, "empty manifest"))?;
    let scale = header
        .strip_prefix("scale=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| Error::format(&path, format!("bad header line {header:?}")))?;
    let ids: Vec<String> = lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
    if ids.is_empty() {
        return Err(Error::format(&path, "manifest lists no samples"));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), scale, ids, split: "train".to_string() })
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<Sample> {
    let (hp, lp, pp) = sample_paths(&manifest.root, id);
    Ok(Sample {
        id: id.to_string(),
        hr: fio::read_tensor::<f32>(&hp)?,
        lr: fio::read_tensor::<f32>(&lp)?,
        parsing_gt: fio::read_tensor::<f32>(&pp)?,
    })
}

pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    manifest.ids.iter().map(|id| load_sample(manifest, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_binary() {
        let (img_a, mask_a) = synth_face(42, 64).unwrap();
        let (img_b, mask_b) = synth_face(42, 64).unwrap();
        assert!(img_a.bits_eq(&img_b));
        assert!(mask_a.bits_eq(&mask_b));
        assert!(mask_a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(img_a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (img_c, _) = synth_face(43, 64).unwrap();
        assert!(!img_a.bits_eq(&img_c));
    }

    #[test]
    fn synth_rejects_odd_sizes() {
        assert!(synth_face(1, 48).is_err());
    }

    #[test]
    fn mask_area_fraction_stays_in_band() {
        // generator contract: skin-minus-components covers 15..60% of the
        // frame for any seed
        for seed in 0..1000 {
            let (_, mask) = synth_face(seed, 64).unwrap();
            let area: f32 = mask.data().iter().sum();
            let frac = area as f64 / (64.0 * 64.0);
            assert!(
                (0.15..=0.6).contains(&frac),
                "seed {seed}: mask fraction {frac} out of band"
            );
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let img = Tensor::<f64>::filled(Shape::new(1, 2, 8, 8), 0.37);
        let up = bicubic_resize(&img, 19, 13);
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_same_size_is_identity() {
        let mut rng = SplitMix64::new(3);
        let img = Tensor::<f64>::uniform(Shape::new(1, 1, 9, 7), 0.0, 1.0, &mut rng);
        let same = bicubic_resize(&img, 9, 7);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bicubic_downsample_keeps_interior_ramps_linear() {
        // a horizontal ramp stays linear wherever the 4-tap window is
        // fully interior; edge-clamped border pixels deviate by design
        let w = 32;
        let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 4, w));
        for y in 0..4 {
            for x in 0..w {
                img.set(0, 0, y, x, x as f64);
            }
        }
        let down = bicubic_resize(&img, 4, w / 2);
        for x in 1..(w / 2 - 1) {
            let expect = (x as f64 + 0.5) * 2.0 - 0.5;
            let got = down.at(0, 0, 1, x);
            assert!((got - expect).abs() < 1e-5, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn bicubic_round_trip_of_smooth_image_is_close() {
        let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let v = 0.5
                    + 0.4
                        * ((x as f64 / 16.0 * std::f64::consts::TAU).sin()
                            * (y as f64 / 16.0 * std::f64::consts::TAU).cos());
                img.set(0, 0, y, x, v);
            }
        }
        let up = bicubic_resize(&img, 32, 32);
        let back = bicubic_resize(&up, 16, 16);
        let mean_abs: f64 =
            img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 256.0;
        assert!(mean_abs < 1e-2, "round trip drift {mean_abs}");
    }

    #[test]
    fn parsing_downsample_reference_cases() {
        let ones = Tensor::<f32>::filled(Shape::new(1, 1, 8, 8), 1.0);
        for scale in [2, 4, 8] {
            let down = parsing_downsample(&ones, scale).unwrap();
            assert!(down.data().iter().all(|&v| v == 1.0));
        }

        // checkerboard averages to exactly 0.5 per 2x2 cell; ties go to 1
        let mut board = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                if (x + y) % 2 == 0 {
                    board.set(0, 0, y, x, 1.0);
                }
            }
        }
        let down = parsing_downsample(&board, 2).unwrap();
        assert!(down.data().iter().all(|&v| v == 1.0));

        assert!(parsing_downsample(&ones, 3).is_err());
        let zeros = Tensor::<f32>::zeros(Shape::new(1, 1, 8, 8));
        assert!(parsing_downsample(&zeros, 4).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parsing_downsample_matches_counting_oracle() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..10 {
            let mask = Tensor::<f32>::from_vec(
                Shape::new(1, 1, 12, 12),
                (0..144).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap();
            let down = parsing_downsample(&mask, 3).unwrap();
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut count = 0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            if mask.at(0, 0, oy * 3 + ky, ox * 3 + kx) == 1.0 {
                                count += 1;
                            }
                        }
                    }
                    let expect = if count as f64 / 9.0 >= 0.5 { 1.0 } else { 0.0 };
                    assert_eq!(down.at(0, 0, oy, ox), expect);
                }
            }
            assert!(down.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn generate_then_load_round_trips() {
        let dir = std::env::temp_dir().join("fishsr-data-roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let (manifest, written) = generate_dataset(11, 2, 8, &dir).unwrap();
        assert_eq!(manifest.ids.len(), 2);
        assert_eq!(written.len(), 2 * 5 + 1);

        let loaded = load_manifest(&dir).unwrap();
        assert_eq!(loaded.scale, 8);
        assert_eq!(loaded.ids, manifest.ids);

        let sample = load_sample(&loaded, &loaded.ids[0]).unwrap();
        assert_eq!(sample.hr.shape(), Shape::new(1, 3, 128, 128));
        assert_eq!(sample.lr.shape(), Shape::new(1, 3, 16, 16));
        assert_eq!(sample.parsing_gt.shape(), Shape::new(1, 1, 16, 16));
        assert!(sample.parsing_gt.data().iter().all(|&v| v == 0.0 || v == 1.0));

        // loading returns exactly the bytes generation produced
        let (hr, hr_mask) = synth_face(SplitMix64::new(11).next_u64(), HR_SIZE).unwrap();
        assert!(sample.hr.bits_eq(&hr));
        let lr = bicubic_resize(&hr, 16, 16).clamp01();
        assert!(sample.lr.bits_eq(&lr));
        assert!(sample.parsing_gt.bits_eq(&parsing_downsample(&hr_mask, 8).unwrap()));
    }

    #[test]
    fn missing_sample_file_is_a_described_io_error() {
        let dir = std::env::temp_dir().join("fishsr-data-missing");
        let _ = std::fs::remove_dir_all(&dir);
        let (manifest, _) = generate_dataset(3, 1, 4, &dir).unwrap();
        std::fs::remove_file(dir.join("lr/sample_0000.ften")).unwrap();
        let err = load_sample(&manifest, "sample_0000").unwrap_err();
        assert!(err.to_string().contains("sample_0000"), "{err}");
    }

    #[test]
    fn rotation_zero_is_identity_and_rotation_moves_mass() {
        let (_, mask) = synth_face(5, 64).unwrap();
        let small = parsing_downsample(&mask, 4).unwrap();
        let same = rotate_map(&small, 0.0);
        assert!(same.bits_eq(&small));
        let turned = rotate_map(&small, 45.0);
        assert!(!turned.bits_eq(&small));
        assert!(turned.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
