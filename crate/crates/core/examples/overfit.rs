//! Overfit the toy model on synthetic frames, report mAP as it trains and
//! finish with a short failure test.
//!
//! `cargo run --release -p unibev-core --example overfit -- [frames] [steps]`

use unibev_core::eval::{evaluate_detector, failure_test, EvalConfig, FtConfig};
use unibev_core::model::{ModelConfig, UniBevFusion};
use unibev_core::radar::RadarSchema;
use unibev_core::synth::{generate_frames, SceneConfig};
use unibev_core::train::{TrainConfig, Trainer};

fn main() -> unibev_core::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("integer argument"));
    let n = args.next().unwrap_or(50) as usize;
    let steps = args.next().unwrap_or(2000);
    let scene = SceneConfig { seed: 7, ..SceneConfig::toy(RadarSchema::vod()) };
    let frames = generate_frames(&scene, n)?;
    let model = UniBevFusion::new(ModelConfig::toy("vod"))?;
    let names = model.class_names();
    let eval = EvalConfig::uniform(names.len(), 0.25);
    let mut t = Trainer::new(model, TrainConfig { steps, ..TrainConfig::default() })?;
    let start = std::time::Instant::now();
    let mut acc = 0.0;
    while t.step() < steps {
        acc += t.train_step(&frames)?.total;
        if t.step() % 250 == 0 {
            let m = evaluate_detector(&t.model, &frames, &names, &eval)?;
            println!(
                "step {:5}  loss {:.4}  mAP3d {:.3}  mAPbev {:.3}  ap {:?}  {:.0}s",
                t.step(),
                acc / 250.0,
                m.map_3d.unwrap_or(0.0),
                m.map_bev.unwrap_or(0.0),
                m.ap_3d.iter().map(|a| a.map(|v| (v * 100.0).round() / 100.0)).collect::<Vec<_>>(),
                start.elapsed().as_secs_f64()
            );
            acc = 0.0;
        }
    }
    let ft = FtConfig { rhos: vec![0.0, 0.5, 0.7, 0.9], runs: 3, ..FtConfig::default() };
    for row in failure_test(&t.model, &frames, &names, &eval, &ft)?.rows {
        println!("rho {:.1}  mAP3d {:.3} +- {:.3}", row.rho, row.map_3d_mean, row.map_3d_std);
    }
    Ok(())
}
