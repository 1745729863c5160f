use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{evaluate, EvalConfig, EvalFrame, Metrics};
use super::noise::{inject_noise, NoiseSpec, DEFAULT_SIGMA};
use crate::detection::Box3D;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synth::{Frame, Image};

/// Anything that turns a frame (with a possibly corrupted image) into boxes.
pub trait Detector: Sync {
    fn detect(&self, frame: &Frame, image: &Image) -> Result<Vec<Box3D>>;
}

impl<F> Detector for F
where
    F: Fn(&Frame, &Image) -> Result<Vec<Box3D>> + Sync,
{
    fn detect(&self, frame: &Frame, image: &Image) -> Result<Vec<Box3D>> {
        self(frame, image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub rhos: Vec<f64>,
    pub runs: usize,
    pub sigma: f64,
    pub base_seed: u64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self { rhos: vec![0.0, 0.5, 0.7, 0.9], runs: 10, sigma: DEFAULT_SIGMA, base_seed: 0 }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("failure test needs at least one run"));
        }
        if self.rhos.is_empty() {
            return Err(Error::config("failure test needs at least one noise level"));
        }
        for &rho in &self.rhos {
            NoiseSpec::new(rho, self.sigma, 0)?;
        }
        Ok(())
    }

    /// Noise seed for frame `frame` in run `run` at noise level index `rho_index`.
    pub fn noise_seed(&self, rho_index: usize, run: usize, frame: usize) -> u64 {
        derive_seed(derive_seed(self.base_seed, &[rho_index as u64, run as u64]), &[frame as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtRow {
    pub rho: f64,
    pub map_3d_mean: f64,
    pub map_3d_std: f64,
    pub map_bev_mean: f64,
    pub map_bev_std: f64,
    /// Per-class 3D AP averaged over runs; `None` for classes without GT.
    pub ap_3d_mean: Vec<Option<f64>>,
    pub run_map_3d: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtReport {
    pub class_names: Vec<String>,
    pub sigma: f64,
    pub runs: usize,
    pub base_seed: u64,
    pub rows: Vec<FtRow>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Detections paired with ground truth, one entry per frame. Frames run in
/// parallel; the output order follows `frames`.
pub fn detect_frames(detector: &dyn Detector, frames: &[Frame], images: &[Image]) -> Result<Vec<EvalFrame>> {
    if frames.len() != images.len() {
        return Err(Error::InvalidInput(format!("{} frames but {} images", frames.len(), images.len())));
    }
    let dets: Vec<Vec<Box3D>> = frames.par_iter().zip(images).map(|(f, im)| detector.detect(f, im)).collect::<Result<_>>()?;
    Ok(frames.iter().zip(dets).map(|(f, d)| EvalFrame { dets: d, gts: f.gt.clone(), camera: f.camera.clone() }).collect())
}

/// Run the detector on every frame with the given images and evaluate.
pub fn evaluate_with_images(detector: &dyn Detector, frames: &[Frame], images: &[Image], class_names: &[String], cfg: &EvalConfig) -> Result<Metrics> {
    evaluate(&detect_frames(detector, frames, images)?, class_names, cfg)
}

/// Plain evaluation on clean images.
pub fn evaluate_detector(detector: &dyn Detector, frames: &[Frame], class_names: &[String], cfg: &EvalConfig) -> Result<Metrics> {
    let images: Vec<Image> = frames.iter().map(|f| f.image.clone()).collect();
    evaluate_with_images(detector, frames, &images, class_names, cfg)
}

fn defined(map: Option<f64>) -> Result<f64> {
    map.ok_or_else(|| Error::InvalidInput("evaluation frames contain no ground truth".into()))
}

/// Corrupt camera images at each noise level and average metrics over seeded
/// runs. Radar input is left untouched.
pub fn failure_test(detector: &dyn Detector, frames: &[Frame], class_names: &[String], eval: &EvalConfig, ft: &FtConfig) -> Result<FtReport> {
    ft.validate()?;
    let mut rows = Vec::with_capacity(ft.rhos.len());
    for (ri, &rho) in ft.rhos.iter().enumerate() {
        let mut metrics: Vec<Metrics> = Vec::with_capacity(ft.runs);
        for run in 0..ft.runs {
            // Without noise every run sees the same input.
            if rho == 0.0 && run > 0 {
                metrics.push(metrics[0].clone());
                continue;
            }
            let images: Vec<Image> = frames
                .par_iter()
                .enumerate()
                .map(|(fi, f)| inject_noise(&f.image, &NoiseSpec { rho, sigma: ft.sigma, seed: ft.noise_seed(ri, run, fi) }))
                .collect::<Result<_>>()?;
            metrics.push(evaluate_with_images(detector, frames, &images, class_names, eval)?);
        }
        let m3: Vec<f64> = metrics.iter().map(|m| defined(m.map_3d)).collect::<Result<_>>()?;
        let mb: Vec<f64> = metrics.iter().map(|m| defined(m.map_bev)).collect::<Result<_>>()?;
        let (map_3d_mean, map_3d_std) = mean_std(&m3);
        let (map_bev_mean, map_bev_std) = mean_std(&mb);
        let ap_3d_mean = (0..class_names.len())
            .map(|c| {
                let v: Vec<f64> = metrics.iter().filter_map(|m| m.ap_3d[c]).collect();
                (!v.is_empty()).then(|| mean_std(&v).0)
            })
            .collect();
        rows.push(FtRow { rho, map_3d_mean, map_3d_std, map_bev_mean, map_bev_std, ap_3d_mean, run_map_3d: m3 });
    }
    Ok(FtReport { class_names: class_names.to_vec(), sigma: ft.sigma, runs: ft.runs, base_seed: ft.base_seed, rows })
}

/// One row per noise level: `rho, runs, sigma, map_3d_mean, map_3d_std,
/// map_bev_mean, map_bev_std`, then `ap_3d_<class>` means (empty when undefined).
pub fn ft_csv(report: &FtReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head: Vec<String> = ["rho", "runs", "sigma", "map_3d_mean", "map_3d_std", "map_bev_mean", "map_bev_std"].iter().map(|s| s.to_string()).collect();
    head.extend(report.class_names.iter().map(|c| format!("ap_3d_{c}")));
    w.write_record(&head).map_err(csv_err)?;
    for r in &report.rows {
        let mut rec = vec![
            r.rho.to_string(),
            report.runs.to_string(),
            report.sigma.to_string(),
            format!("{:.6}", r.map_3d_mean),
            format!("{:.6}", r.map_3d_std),
            format!("{:.6}", r.map_bev_mean),
            format!("{:.6}", r.map_bev_std),
        ];
        rec.extend(r.ap_3d_mean.iter().map(|a| a.map(|v| format!("{v:.6}")).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish_csv(w)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::RadarSchema;
    use crate::synth::{generate_frames, SceneConfig};

    fn names() -> Vec<String> {
        ["car", "pedestrian", "cyclist"].iter().map(|s| s.to_string()).collect()
    }

    /// Reports every GT box, losing boxes as the image mean drifts from the clean one.
    fn oracle_detector(f: &Frame, im: &Image) -> Result<Vec<Box3D>> {
        let drift: f64 = im.data.iter().zip(&f.image.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / im.data.len() as f64;
        let keep = ((1.0 - 10.0 * drift).max(0.0) * f.gt.len() as f64).round() as usize;
        Ok(f.gt.iter().take(keep).map(|b| b.with_score(0.9)).collect())
    }

    fn frames() -> Vec<Frame> {
        let mut cfg = SceneConfig::toy(RadarSchema::vod());
        cfg.camera = cfg.camera.scaled(0.25, (32, 48));
        generate_frames(&cfg, 6).unwrap()
    }

    #[test]
    fn rho_zero_single_run_equals_plain_evaluation() {
        let fs = frames();
        let cfg = EvalConfig::uniform(3, 0.5);
        let plain = evaluate_detector(&oracle_detector, &fs, &names(), &cfg).unwrap();
        let ft = FtConfig { rhos: vec![0.0], runs: 1, ..FtConfig::default() };
        let rep = failure_test(&oracle_detector, &fs, &names(), &cfg, &ft).unwrap();
        assert_eq!(rep.rows[0].map_3d_mean, plain.map_3d.unwrap());
        assert_eq!(rep.rows[0].map_3d_std, 0.0);
    }

    #[test]
    fn degradation_is_reported_per_level() {
        let fs = frames();
        let cfg = EvalConfig::uniform(3, 0.5);
        let ft = FtConfig { rhos: vec![0.0, 0.5, 0.9], runs: 3, sigma: 0.1, base_seed: 4 };
        let rep = failure_test(&oracle_detector, &fs, &names(), &cfg, &ft).unwrap();
        assert_eq!(rep.rows.len(), 3);
        let m: Vec<f64> = rep.rows.iter().map(|r| r.map_3d_mean).collect();
        assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
        assert!(rep.rows.iter().all(|r| r.map_3d_std >= 0.0 && r.run_map_3d.len() == 3));
        // Same config, same report.
        assert_eq!(rep, failure_test(&oracle_detector, &fs, &names(), &cfg, &ft).unwrap());
        let csv = ft_csv(&rep).unwrap();
        assert!(csv.starts_with("rho,runs,sigma,map_3d_mean,map_3d_std,map_bev_mean,map_bev_std,ap_3d_car"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn noise_seeds_differ_across_runs_levels_and_frames() {
        let ft = FtConfig::default();
        let mut seen = std::collections::HashSet::new();
        for r in 0..4 {
            for run in 0..10 {
                for f in 0..5 {
                    assert!(seen.insert(ft.noise_seed(r, run, f)));
                }
            }
        }
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }
}
