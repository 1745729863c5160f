use serde::{Deserialize, Serialize};

use super::ap::Metrics;
use super::ft::{csv_err, finish_csv};
use crate::error::{Error, Result};

/// Image scales compared in the resolution study.
pub const DEFAULT_SCALES: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub image_size: (usize, usize),
    pub rdl: bool,
    pub map_3d: f64,
    pub delta_3d_pct: f64,
    pub map_bev: f64,
    pub delta_bev_pct: f64,
}

/// Relative change of `value` over `baseline` in percent. Zero over zero is
/// no change; anything over a zero baseline is infinite.
pub fn delta_pct(value: f64, baseline: f64) -> f64 {
    if value == baseline {
        0.0
    } else if baseline == 0.0 {
        f64::INFINITY.copysign(value)
    } else {
        100.0 * (value - baseline) / baseline
    }
}

/// `base` scaled and rounded to the nearest positive multiple of `multiple`.
pub fn scaled_size(base: (usize, usize), scale: f64, multiple: usize) -> Result<(usize, usize)> {
    if !(scale > 0.0 && scale.is_finite()) || multiple == 0 {
        return Err(Error::config(format!("invalid scale {scale} or multiple {multiple}")));
    }
    let f = |v: usize| ((v as f64 * scale / multiple as f64).round() as usize).max(1) * multiple;
    Ok((f(base.0), f(base.1)))
}

/// For every scale, train/evaluate the RDL-ablated model and then the full
/// one. `run(scale, rdl)` returns the image size it used and its metrics.
/// Deltas compare each row with the ablated row of its scale.
pub fn sweep_resolution<F>(scales: &[f64], mut run: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64, bool) -> Result<((usize, usize), Metrics)>,
{
    let mut rows = Vec::with_capacity(2 * scales.len());
    for &scale in scales {
        let mut base: Option<(f64, f64)> = None;
        for rdl in [false, true] {
            let (image_size, m) = run(scale, rdl)?;
            let (m3, mb) = (m.map_3d.unwrap_or(0.0), m.map_bev.unwrap_or(0.0));
            let (b3, bb) = *base.get_or_insert((m3, mb));
            rows.push(SweepRow { scale, image_size, rdl, map_3d: m3, delta_3d_pct: delta_pct(m3, b3), map_bev: mb, delta_bev_pct: delta_pct(mb, bb) });
        }
    }
    Ok(rows)
}

/// Columns: `scale, image_size, rdl, map_3d, delta_3d_pct, map_bev, delta_bev_pct`.
/// Image sizes are written `HxW`; percentages carry six decimals.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scale", "image_size", "rdl", "map_3d", "delta_3d_pct", "map_bev", "delta_bev_pct"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            format!("{:.2}", r.scale),
            format!("{}x{}", r.image_size.0, r.image_size.1),
            if r.rdl { "on" } else { "off" }.to_string(),
            format!("{:.6}", r.map_3d),
            format!("{:.6}", r.delta_3d_pct),
            format!("{:.6}", r.map_bev),
            format!("{:.6}", r.delta_bev_pct),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(m3: f64, mb: f64) -> Metrics {
        Metrics { class_names: vec!["car".into()], num_gt: vec![1], ap_3d: vec![Some(m3)], ap_bev: vec![Some(mb)], map_3d: Some(m3), map_bev: Some(mb) }
    }

    #[test]
    fn sizes_follow_the_full_resolution() {
        let full = (960, 1280);
        let sizes: Vec<_> = DEFAULT_SCALES.iter().map(|&s| scaled_size(full, s, 8).unwrap()).collect();
        assert_eq!(sizes, vec![(960, 1280), (720, 960), (480, 640), (240, 320)]);
        assert_eq!(scaled_size((128, 192), 0.3, 8).unwrap(), (40, 56));
        assert!(scaled_size(full, 0.0, 8).is_err());
    }

    #[test]
    fn deltas_match_recomputation() {
        // Off/on pairs per scale.
        let table = [(1.0, 12.02, 13.19), (0.75, 14.81, 16.91), (0.5, 13.66, 14.46), (0.25, 7.54, 6.44)];
        let rows = sweep_resolution(&DEFAULT_SCALES, |s, rdl| {
            let (_, off, on) = table.iter().find(|t| t.0 == s).copied().unwrap();
            let v = if rdl { on } else { off };
            Ok((scaled_size((960, 1280), s, 8)?, metrics(v, v / 2.0)))
        })
        .unwrap();
        assert_eq!(rows.len(), 8);
        for pair in rows.chunks(2) {
            let (off, on) = (&pair[0], &pair[1]);
            assert!(!off.rdl && on.rdl);
            assert_eq!(off.delta_3d_pct, 0.0);
            assert_eq!(off.delta_bev_pct, 0.0);
            assert_eq!(on.delta_3d_pct, 100.0 * (on.map_3d - off.map_3d) / off.map_3d);
        }
        let on = |s: f64| rows.iter().find(|r| r.scale == s && r.rdl).unwrap().delta_3d_pct;
        assert!((on(0.75) - 14.18).abs() < 0.01);
        assert!((on(0.5) - 5.86).abs() < 0.01);
        assert!((on(0.25) + 14.59).abs() < 0.01);

        let csv = sweep_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("scale,image_size,rdl,map_3d,delta_3d_pct,map_bev,delta_bev_pct"));
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f[2] == "off" {
                assert_eq!(f[4].parse::<f64>().unwrap(), 0.0);
                assert_eq!(f[6].parse::<f64>().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn zero_baselines() {
        assert_eq!(delta_pct(0.0, 0.0), 0.0);
        assert_eq!(delta_pct(0.2, 0.0), f64::INFINITY);
        assert!((delta_pct(0.5, 0.4) - 25.0).abs() < 1e-12);
    }
}
