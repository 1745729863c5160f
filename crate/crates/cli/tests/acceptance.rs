//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release -p unibev-cli --test acceptance -- 1 5 6`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unibev_core::detection::{assign_targets, bev_iou, compute_losses, iou_3d, rotated_nms, AnchorSpec, Box3D, HeadOutput, LossConfig};
use unibev_core::eval::{
    average_precision, evaluate, evaluate_detector, failure_test, inject_noise, noise_field, scaled_size, sweep_csv, sweep_resolution, ApMode, EvalConfig, EvalFrame, FtConfig,
    FtReport, IouKind, NoiseSpec, DEFAULT_SIGMA,
};
use unibev_core::geometry::{build_frustum, BevGridSpec, CameraModel};
use unibev_core::model::{ModelConfig, UniBevFusion};
use unibev_core::nn::gradcheck::{check, sample_coords, GradCheckReport, DEFAULT_EPS};
use unibev_core::nn::{random_tensor, Graph, ParamStore, Tensor, Var};
use unibev_core::radar::{RadarPointCloud, RadarSchema};
use unibev_core::rdl::{build_radar_depth_map, DepthContextHead, RadarDepthMap, RadarDepthTransform, RdlConfig, RdlStream};
use unibev_core::synth::{generate_frames, read_dataset, write_dataset, Dataset, Frame, Image, SceneConfig};
use unibev_core::train::{TrainConfig, Trainer};
use unibev_core::uff::{UffConfig, UnifiedFeatureFusion};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn core<T>(r: unibev_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, schema: RadarSchema) -> RadarPointCloud {
    let xyz = (0..n).map(|_| [rng.random_range(1.0..28.0), rng.random_range(-14.0..14.0), rng.random_range(-1.5..3.0)]).collect();
    let extras = (0..n * schema.num_extras()).map(|_| rng.random_range(-20.0..20.0)).collect();
    RadarPointCloud::new(xyz, extras, schema).expect("valid cloud")
}

// ---------------------------------------------------------------- 1 and 2

fn toy_stream(seed: u64) -> (ParamStore, RdlStream) {
    let mut store = ParamStore::new(seed);
    let grid = BevGridSpec::toy().coarsened(2).expect("toy grid halves");
    let stream = RdlStream::new(&mut store, "cam", RdlConfig::toy(), &RadarSchema::vod(), grid).expect("toy stream");
    (store, stream)
}

fn inside(grid: &BevGridSpec, p: [f64; 3]) -> bool {
    let r = |v: f64, (lo, hi): (f64, f64)| v >= lo && v < hi;
    r(p[0], grid.x_range) && r(p[1], grid.y_range) && r(p[2], grid.z_range)
}

/// BEV channel sums after lift-splat against `sum_pixels context * in-grid depth mass`,
/// with the mass taken from an explicit walk over the frustum.
fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (store, stream) = toy_stream(case);
        let cam = core(CameraModel::forward_looking(rng.random_range(48.0..128.0), (64, 96), rng.random_range(0.8..2.2)))?;
        let image = random_tensor(&[3, 64, 96], 0.0, 1.0, 1000 + case);
        let n = rng.random_range(0..60);
        let cloud = random_cloud(&mut rng, n, RadarSchema::vod());
        let mut g = Graph::new(&store).without_grad();
        let iv = g.input(image);
        let out = core(stream.forward(&mut g, iv, &cloud, &cam))?;
        let probs = g.value(out.depth.probs);
        let ctx = g.value(out.depth.context);
        let (d, h, w) = probs.dims3();
        let frustum = core(build_frustum((h, w), &stream.config.bins, &cam, stream.stride()))?;
        let mut mass = vec![0.0; h * w];
        for b in 0..d {
            for r in 0..h {
                for c in 0..w {
                    if inside(&stream.grid, frustum.point(b, r, c)) {
                        mass[r * w + c] += probs.data()[(b * h + r) * w + c];
                    }
                }
            }
        }
        let got = g.value(out.bev).channel_sums();
        for (ch, s) in got.iter().enumerate() {
            let terms = ctx.data()[ch * h * w..(ch + 1) * h * w].iter().zip(&mass).map(|(a, m)| a * m);
            let (want, scale) = terms.fold((0.0, 0.0), |(s, a), t: f64| (s + t, a + t.abs()));
            if scale == 0.0 {
                ensure(*s == 0.0, format!("case {case} channel {ch}: {s} from an empty frustum"))?;
                continue;
            }
            worst = worst.max((s - want).abs() / want.abs().max(1e-12));
        }
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:.3e} > 1e-4"))?;
    Ok(format!("100 fuzz inputs, max relative error {worst:.2e} <= 1e-4"))
}

/// Randomize every non-normalization parameter so gates and logits are far from uniform.
fn scramble(store: &mut ParamStore, seed: u64, bound: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| !store.name(id).contains("norm")).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random_tensor(&shape, -bound, bound, seed * 1000 + k as u64);
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_depth = 0.0f64;
    for case in 0..100 {
        let mut store = ParamStore::new(case);
        let head = DepthContextHead::new(&mut store, "h", 32, 32, 24, 16);
        scramble(&mut store, case, 1.0);
        let mut g = Graph::new(&store).without_grad();
        let img = g.input(random_tensor(&[32, 8, 12], -4.0, 4.0, 10 + case));
        let rad = g.input(random_tensor(&[64, 8, 12], 0.0, rng.random_range(0.1..6.0), 20 + case));
        let out = core(head.forward(&mut g, img, rad))?;
        let p = g.value(out.probs);
        let (d, h, w) = p.dims3();
        for pix in 0..h * w {
            let s: f64 = (0..d).map(|b| p.data()[b * h * w + pix]).sum();
            worst_depth = worst_depth.max((s - 1.0).abs());
        }
    }
    let mut worst_uff = 0.0f64;
    for case in 0..100 {
        let mut store = ParamStore::new(case);
        let uff = core(UnifiedFeatureFusion::new(&mut store, "uff", &[32, 32], UffConfig::toy()))?;
        scramble(&mut store, case + 500, 0.5);
        let mut g = Graph::new(&store).without_grad();
        let a = g.input(random_tensor(&[32, 16, 16], -3.0, 3.0, 30 + case));
        let b = g.input(random_tensor(&[32, 16, 16], -3.0, 3.0, 40 + case));
        let out = core(uff.forward(&mut g, &[a, b]))?;
        let wts = g.value(out.weights);
        let (m, h, w) = wts.dims3();
        for pix in 0..h * w {
            let s: f64 = (0..m).map(|k| wts.data()[k * h * w + pix]).sum();
            worst_uff = worst_uff.max((s - 1.0).abs());
        }
    }
    ensure(worst_depth <= 1e-6 && worst_uff <= 1e-6, format!("max |sum - 1|: depth {worst_depth:.2e}, fusion {worst_uff:.2e}"))?;
    Ok(format!("100 + 100 inputs, max |sum - 1| depth {worst_depth:.1e}, fusion weights {worst_uff:.1e}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    for schema in [RadarSchema::vod(), RadarSchema::tj4d()] {
        let n = schema.num_extras();
        ensure(n == 4, format!("{} has {n} extra channels", schema.name))?;
        let mut store = ParamStore::new(3);
        let t = core(RadarDepthTransform::new(&mut store, "t", &schema, &[0, 1, 2, 3], 25.0, false))?;
        ensure((t.in_channels(), t.out_channels()) == (n + 1, 64), format!("{}: {} -> {}", schema.name, t.in_channels(), t.out_channels()))?;

        let cam = core(CameraModel::forward_looking(96.0, (128, 192), 1.5))?;
        let cloud = random_cloud(&mut ChaCha8Rng::seed_from_u64(3), 80, schema.clone());
        let map = core(build_radar_depth_map(&cloud, &cam, (16, 24), 8, &[0, 1, 2, 3]))?;
        ensure(map.channels.shape() == [n + 1, 16, 24], format!("radar map shape {:?}", map.channels.shape()))?;
        let mut g = Graph::new(&store);
        let y = core(t.forward(&mut g, &map))?;
        ensure(g.shape(y) == [64, 16, 24], format!("{}: forward shape {:?}", schema.name, g.shape(y)))?;
        let short = RadarDepthMap { channels: Tensor::zeros(&[n, 16, 24]), mask: vec![false; 16 * 24] };
        ensure(t.forward(&mut g, &short).is_err(), "an N-channel map was accepted")?;

        let model = core(UniBevFusion::new(ModelConfig::toy(&schema.name)))?;
        let mt = &model.camera.transform;
        ensure((mt.in_channels(), mt.out_channels()) == (n + 1, 64), format!("{} model transform {} -> {}", schema.name, mt.in_channels(), mt.out_channels()))?;
        notes.push(format!("{} {} -> 64", schema.name, n + 1));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 4

/// Gradient of `probe . op(x)` with respect to `x` against central differences.
fn input_check(store: &ParamStore, x: &Tensor, coords: usize, op: impl Fn(&mut Graph, Var) -> Var) -> GradCheckReport {
    let mut g = Graph::new(store);
    let xv = g.leaf(x.clone());
    let y = op(&mut g, xv);
    let probe = random_tensor(g.shape(y), -1.0, 1.0, 77);
    let l = g.dot_const(y, &probe);
    let analytic = g.backward(l).wrt(xv).expect("input reaches the output").clone();
    let f = |t: &Tensor| {
        let mut g = Graph::new(store);
        let xv = g.input(t.clone());
        let y = op(&mut g, xv);
        g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    check(f, x, &analytic, &sample_coords(x.len(), coords, 0), DEFAULT_EPS)
}

/// Gradients of a scalar loss with respect to every parameter named `prefix*`.
fn param_check(store: &ParamStore, prefix: &str, loss: impl Fn(&mut Graph) -> Var) -> GradCheckReport {
    let mut g = Graph::new(store);
    let l = loss(&mut g);
    let grads = g.backward(l);
    let mut report = GradCheckReport::default();
    for (id, analytic) in grads.params() {
        if !store.name(id).starts_with(prefix) {
            continue;
        }
        let x = store.get(id).clone();
        let f = |t: &Tensor| {
            let mut s = store.clone();
            *s.get_mut(id) = t.clone();
            let mut g = Graph::new(&s);
            let l = loss(&mut g);
            g.value(l).data()[0]
        };
        report.merge(&check(f, &x, analytic, &sample_coords(x.len(), 16, 1), DEFAULT_EPS));
    }
    report
}

fn criterion_4() -> Outcome {
    let tol = 1e-4;
    let mut rows: Vec<(&str, GradCheckReport)> = Vec::new();

    // Radar depth transform, wrt its input map and its weights.
    let mut store = ParamStore::new(41);
    let t = core(RadarDepthTransform::new(&mut store, "t", &RadarSchema::tj4d(), &[0, 1, 2, 3], 25.0, false))?;
    let x = random_tensor(&[5, 6, 8], -6.0, 12.0, 1);
    let mask: Vec<bool> = (0..48).map(|i| i % 5 != 0).collect();
    let mut r = input_check(&store, &x, 120, |g, v| t.forward_var(g, v, &mask).expect("transform"));
    let probe = random_tensor(&[64, 6, 8], -1.0, 1.0, 2);
    r.merge(&param_check(&store, "t.", |g| {
        let v = g.input(x.clone());
        let y = t.forward_var(g, v, &mask).expect("transform");
        g.dot_const(y, &probe)
    }));
    rows.push(("radar depth transform", r));

    // Depth and context prediction, wrt image features, radar features and weights.
    let mut store = ParamStore::new(42);
    let head = DepthContextHead::new(&mut store, "h", 8, 10, 12, 6);
    let img = random_tensor(&[8, 4, 6], -1.0, 1.0, 3);
    let rad = random_tensor(&[64, 4, 6], 0.0, 1.0, 4);
    let (pp, pc) = (random_tensor(&[12, 4, 6], -1.0, 1.0, 5), random_tensor(&[6, 4, 6], -1.0, 1.0, 6));
    let both = |g: &mut Graph, a: Var, b: Var| {
        let o = head.forward(g, a, b).expect("depth head");
        let l1 = g.dot_const(o.probs, &pp);
        let l2 = g.dot_const(o.context, &pc);
        g.linear_comb(&[(l1, 1.0), (l2, 1.0)])
    };
    let mut r = input_check(&store, &img, 96, |g, a| {
        let b = g.input(rad.clone());
        both(g, a, b)
    });
    r.merge(&input_check(&store, &rad, 96, |g, b| {
        let a = g.input(img.clone());
        both(g, a, b)
    }));
    r.merge(&param_check(&store, "h.", |g| {
        let (a, b) = (g.input(img.clone()), g.input(rad.clone()));
        both(g, a, b)
    }));
    rows.push(("depth and context prediction", r));

    // The four fusion operations on an 8 x 8 BEV.
    let mut store = ParamStore::new(43);
    let uff = core(UnifiedFeatureFusion::new(&mut store, "uff", &[6, 5], UffConfig { unified_channels: 8, fused_channels: 6, ..UffConfig::toy() }))?;
    scramble(&mut store, 43, 0.5);
    rows.push(("channel unifier", input_check(&store, &random_tensor(&[6, 8, 8], -1.0, 1.0, 7), 96, |g, v| uff.channel_unify(g, v, 0).expect("unify"))));
    rows.push(("shared encoder", input_check(&store, &random_tensor(&[8, 8, 8], -1.0, 1.0, 8), 96, |g, v| uff.shared_encode(g, v).expect("shared"))));
    rows.push((
        "softmax-weighted concat",
        input_check(&store, &random_tensor(&[16, 8, 8], -1.0, 1.0, 9), 128, |g, v| {
            let a = g.slice0(v, 0, 8);
            let b = g.slice0(v, 8, 8);
            uff.softmax_concat_fuse(g, &[a, b]).expect("fuse").fused
        }),
    ));
    rows.push(("fused encoder", input_check(&store, &random_tensor(&[16, 8, 8], -1.0, 1.0, 10), 96, |g, v| uff.fused_encode(g, v).expect("fused"))));

    // Detection losses on a 16 x 16 BEV.
    let spec = AnchorSpec::vod();
    let grid = core(BevGridSpec::new((0.0, 12.8), (-6.4, 6.4), (-1.0, 4.0), (0.8, 0.8)))?;
    let anchors = spec.generate(&grid);
    let gts = [
        Box3D::new([5.1, 1.3, 0.8], [4.0, 1.7, 1.5], 2.9, 0),
        Box3D::new([9.0, -3.0, 0.9], [0.7, 0.6, 1.7], -0.4, 1),
        Box3D::new([3.3, -4.1, 0.9], [1.8, 0.6, 1.7], 1.2, 2),
    ];
    let targets = assign_targets(&anchors, &gts, &spec);
    let a = spec.per_cell();
    let vals = [random_tensor(&[a, 16, 16], -3.0, 1.0, 11), random_tensor(&[7 * a, 16, 16], -1.0, 1.0, 12), random_tensor(&[2 * a, 16, 16], -1.0, 1.0, 13)];
    let cfg = LossConfig::default();
    let mut r = GradCheckReport::default();
    for slot in 0..3 {
        let run = |g: &mut Graph, v: Var| {
            let mut leaves = [0, 1, 2].map(|k| if k == slot { None } else { Some(g.input(vals[k].clone())) });
            leaves[slot] = Some(v);
            let [cls, boxes, dir] = leaves.map(|l| l.expect("set"));
            let l = compute_losses(g, &HeadOutput { cls, boxes, dir }, &targets, &cfg);
            l.total(g, &cfg, None)
        };
        let mut g = Graph::standalone();
        let v = g.leaf(vals[slot].clone());
        let l = run(&mut g, v);
        let analytic = g.backward(l).wrt(v).expect("loss reaches head").clone();
        let coords: Vec<usize> = (0..analytic.len()).filter(|&i| analytic.data()[i] != 0.0).take(300).collect();
        let f = |t: &Tensor| {
            let mut g = Graph::standalone();
            let v = g.input(t.clone());
            let l = run(&mut g, v);
            g.value(l).data()[0]
        };
        r.merge(&check(f, &vals[slot], &analytic, &coords, DEFAULT_EPS));
    }
    rows.push(("detection losses", r));

    let failed: Vec<String> = rows.iter().filter(|(_, r)| !r.passes(tol)).map(|(n, r)| format!("{n}: {r:?}")).collect();
    ensure(failed.is_empty(), failed.join("; "))?;
    let worst = rows.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let checked: usize = rows.iter().map(|(_, r)| r.checked).sum();
    Ok(format!("{} operations, {checked} coordinates, max relative error {worst:.2e} <= {tol:e}", rows.len()))
}

// ---------------------------------------------------------------- 5

/// Average precision from the full precision/recall curve: re-match every
/// frame from scratch at each score cut-off. Overlaps come from the library
/// IoU, which is checked against rasterization separately.
fn exhaustive_ap(frames: &[EvalFrame], thr: f64, class_id: usize, kind: IouKind, mode: ApMode) -> Option<f64> {
    let num_gt: usize = frames.iter().map(|f| f.gts.iter().filter(|g| g.class_id == class_id).count()).sum();
    if num_gt == 0 {
        return None;
    }
    let mut cuts: Vec<f64> = frames.iter().flat_map(|f| &f.dets).filter(|d| d.class_id == class_id).map(|d| d.score).collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    let mut curve = Vec::new();
    for &cut in &cuts {
        let (mut tp, mut total) = (0usize, 0usize);
        for f in frames {
            let mut dets: Vec<&Box3D> = f.dets.iter().filter(|d| d.class_id == class_id && d.score >= cut).collect();
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut taken = vec![false; f.gts.len()];
            for d in dets {
                total += 1;
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in f.gts.iter().enumerate() {
                    if g.class_id != class_id || taken[gi] {
                        continue;
                    }
                    let iou = kind.iou(d, g);
                    if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, _)) = best {
                    taken[gi] = true;
                    tp += 1;
                }
            }
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / total as f64));
    }
    let pts: Vec<f64> = match mode {
        ApMode::R40 => (1..=40).map(|k| k as f64 / 40.0).collect(),
        ApMode::R11 => (0..=10).map(|k| k as f64 / 10.0).collect(),
    };
    let s: f64 = pts.iter().map(|&r| curve.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max)).sum();
    Some(s / pts.len() as f64)
}

/// Scan-line rasterized BEV overlap: `cols` vertical strips, each intersected
/// exactly with both rectangles.
fn raster_bev_inter(a: &Box3D, b: &Box3D, cols: usize) -> f64 {
    let (pa, pb) = (a.bev_corners(), b.bev_corners());
    let xs = pa.iter().chain(&pb).map(|c| c[0]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let dx = (x1 - x0) / cols as f64;
    let span = |p: &[[f64; 2]; 4], x: f64| -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..4 {
            let (u, v) = (p[i], p[(i + 1) % 4]);
            if (u[0] - x) * (v[0] - x) <= 0.0 && u[0] != v[0] {
                let y = u[1] + (x - u[0]) / (v[0] - u[0]) * (v[1] - u[1]);
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        (hi >= lo).then_some((lo, hi))
    };
    (0..cols)
        .filter_map(|k| {
            let x = x0 + (k as f64 + 0.5) * dx;
            let (sa, sb) = (span(&pa, x)?, span(&pb, x)?);
            Some((sa.1.min(sb.1) - sa.0.max(sb.0)).max(0.0) * dx)
        })
        .sum()
}

const RASTER_COLS: usize = 4000;

fn raster_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let i = raster_bev_inter(a, b, RASTER_COLS);
    let area = |x: &Box3D| x.dims[0] * x.dims[1];
    let u = area(a) + area(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

fn raster_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let z = |x: &Box3D| (x.center[2] - x.dims[2] / 2.0, x.center[2] + x.dims[2] / 2.0);
    let ((a0, a1), (b0, b1)) = (z(a), z(b));
    let h = (a1.min(b1) - a0.max(b0)).max(0.0);
    let i = raster_bev_inter(a, b, RASTER_COLS) * h;
    let vol = |x: &Box3D| x.dims[0] * x.dims[1] * x.dims[2];
    let u = vol(a) + vol(b) - i;
    if u <= 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Textbook greedy NMS: take the best remaining box, drop all it overlaps, repeat.
fn brute_nms(boxes: &[Box3D], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for j in 1..alive.len() {
            if boxes[alive[j]].score > boxes[alive[best]].score {
                best = j;
            }
        }
        let top = alive.remove(best);
        out.push(top);
        alive.retain(|&j| raster_bev_iou(&boxes[top], &boxes[j]) < thr);
    }
    out
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    Box3D::new(
        [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-0.5..0.5)],
        [rng.random_range(0.3..4.5), rng.random_range(0.3..2.5), rng.random_range(0.5..2.0)],
        rng.random_range(-3.2..3.2),
        rng.random_range(0..3),
    )
}

fn eval_frames(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<EvalFrame>, String> {
    let camera = core(CameraModel::forward_looking(96.0, (128, 192), 1.5))?;
    Ok((0..n)
        .map(|_| {
            let gts: Vec<Box3D> = (0..rng.random_range(0..8))
                .map(|_| {
                    let mut b = random_box(rng, 1.0);
                    b.center = [rng.random_range(5.0..25.0), rng.random_range(-8.0..8.0), 0.8];
                    b
                })
                .collect();
            let dets = (0..rng.random_range(0..12))
                .map(|_| {
                    let b = if !gts.is_empty() && rng.random_bool(0.7) {
                        let mut c = gts[rng.random_range(0..gts.len())];
                        c.center[0] += rng.random_range(-0.6..0.6);
                        c.center[1] += rng.random_range(-0.6..0.6);
                        c.center[2] += rng.random_range(-0.3..0.3);
                        c.yaw += rng.random_range(-0.3..0.3);
                        c
                    } else {
                        let mut b = random_box(rng, 1.0);
                        b.center = [rng.random_range(5.0..25.0), rng.random_range(-8.0..8.0), 0.8];
                        b
                    };
                    b.with_score(rng.random_range(0.0..1.0))
                })
                .collect();
            EvalFrame { dets, gts, camera: camera.clone() }
        })
        .collect())
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = eval_frames(&mut rng, 200)?;
    let mut ap_err = 0.0f64;
    for kind in [IouKind::ThreeD, IouKind::Bev] {
        for mode in [ApMode::R40, ApMode::R11] {
            for (c, thr) in [(0, 0.5), (1, 0.25), (2, 0.25), (0, 0.25)] {
                let a = average_precision(&frames, thr, c, kind, mode).ok_or("class without ground truth")?;
                let b = exhaustive_ap(&frames, thr, c, kind, mode).ok_or("class without ground truth")?;
                ap_err = ap_err.max((a - b).abs());
            }
        }
    }
    ensure(ap_err <= 1e-9, format!("AP differs from the exhaustive oracle by {ap_err:.3e}"))?;

    let mut iou_err = 0.0f64;
    for _ in 0..500 {
        let (a, b) = (random_box(&mut rng, 2.0), random_box(&mut rng, 2.0));
        iou_err = iou_err.max((bev_iou(&a, &b) - raster_bev_iou(&a, &b)).abs());
        iou_err = iou_err.max((iou_3d(&a, &b) - raster_iou_3d(&a, &b)).abs());
    }
    ensure(iou_err <= 1e-3, format!("rotated IoU differs from rasterization by {iou_err:.3e}"))?;

    for inst in 0..100u64 {
        let n = rng.random_range(5..120);
        let boxes: Vec<Box3D> = (0..n)
            .map(|_| {
                let mut b = random_box(&mut rng, 6.0);
                b.center[2] = 0.8;
                b.with_score(rng.random_range(0.0..1.0))
            })
            .collect();
        let thr = [0.1, 0.2, 0.35, 0.5][inst as usize % 4];
        ensure(rotated_nms(&boxes, thr, true) == brute_nms(&boxes, thr), format!("NMS instance {inst} ({n} boxes, threshold {thr}) differs"))?;
    }
    Ok(format!("AP max diff {ap_err:.1e} on 200 frames; IoU max diff {iou_err:.1e} on 500 pairs; NMS equal on 100 instances"))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();
    for rho in [0.5, 0.7, 0.9] {
        let f = core(noise_field(1_000_000, &core(NoiseSpec::new(rho, DEFAULT_SIGMA, 6))?))?;
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let rel = std / (rho * DEFAULT_SIGMA) - 1.0;
        ensure(mean.abs() < 1e-3 && rel.abs() < 0.01, format!("rho {rho}: mean {mean:.2e}, std {std:.5} ({:+.2}%)", 100.0 * rel))?;
        notes.push(format!("rho {rho}: mean {mean:+.1e}, std {:+.2}%", 100.0 * rel));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = core(Image::new(64, 96, (0..3 * 64 * 96).map(|_| rng.random_range(0.0f32..=1.0)).collect()))?;
    let out = core(inject_noise(&img, &core(NoiseSpec::new(0.0, DEFAULT_SIGMA, 6))?))?;
    let same = out.size() == img.size() && out.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, "rho 0 changed the image")?;
    notes.push("rho 0 bit-identical".into());
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 7 and 8

const OVERFIT_FRAMES: usize = 50;
const OVERFIT_STEPS: u64 = 2000;

fn scene(seed: u64) -> SceneConfig {
    SceneConfig { seed, ..SceneConfig::toy(RadarSchema::vod()) }
}

fn train_toy(frames: &[Frame], steps: u64, seed: u64, rdl: bool) -> Result<UniBevFusion, String> {
    let mut cfg = ModelConfig::toy("vod");
    cfg.init_seed = seed;
    cfg.rdl.ablate_extras = !rdl;
    let mut t = core(Trainer::new(core(UniBevFusion::new(cfg))?, TrainConfig { steps, seed, ..TrainConfig::default() }))?;
    core(t.train(frames, |_| {}))?;
    Ok(t.model)
}

struct Overfit {
    frames: Vec<Frame>,
    model: UniBevFusion,
}

fn overfit() -> Result<Overfit, String> {
    let frames = core(generate_frames(&scene(7), OVERFIT_FRAMES))?;
    let model = train_toy(&frames, OVERFIT_STEPS, 0, true)?;
    Ok(Overfit { frames, model })
}

fn uniform_eval(model: &UniBevFusion) -> EvalConfig {
    EvalConfig::uniform(model.class_names().len(), 0.25)
}

fn criterion_7(o: &Overfit) -> Outcome {
    let names = o.model.class_names();
    let m = core(evaluate_detector(&o.model, &o.frames, &names, &uniform_eval(&o.model)))?;
    let map = m.map_3d.unwrap_or(0.0);
    let detail = format!("mAP3D {map:.4} (BEV {:.4}) on {OVERFIT_FRAMES} frames after {OVERFIT_STEPS} steps, need >= 0.60", m.map_bev.unwrap_or(0.0));
    ensure(map >= 0.60, detail.clone())?;
    Ok(detail)
}

fn ft_means(r: &FtReport) -> String {
    r.rows.iter().map(|row| format!("rho {}: {:.4} ± {:.4}", row.rho, row.map_3d_mean, row.map_3d_std)).collect::<Vec<_>>().join(", ")
}

fn criterion_8(o: &Overfit) -> Outcome {
    let names = o.model.class_names();
    let ft = FtConfig { rhos: vec![0.0, 0.5, 0.9], runs: 10, sigma: DEFAULT_SIGMA, base_seed: 8 };
    let r = core(failure_test(&o.model, &o.frames, &names, &uniform_eval(&o.model), &ft))?;
    let m: Vec<f64> = r.rows.iter().map(|row| row.map_3d_mean).collect();
    let detail = ft_means(&r);
    ensure(m[0] > m[1] && m[1] > m[2], format!("not strictly decreasing: {detail}"))?;
    ensure(m[2] <= 0.6 * m[0], format!("mAP(0.9) = {:.4} > 0.6 x mAP(0) = {:.4}: {detail}", m[2], 0.6 * m[0]))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

const ABLATION_STEPS: u64 = 1000;
const ABLATION_HELD_OUT: usize = 25;

fn criterion_9() -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in [11u64, 12, 13] {
        let train = core(generate_frames(&scene(seed), OVERFIT_FRAMES))?;
        let held_out = core(generate_frames(&scene(seed + 1000), ABLATION_HELD_OUT))?;
        let mut maps = [0.0; 2];
        for (k, rdl) in [true, false].into_iter().enumerate() {
            let model = train_toy(&train, ABLATION_STEPS, seed, rdl)?;
            let names = model.class_names();
            maps[k] = core(evaluate_detector(&model, &held_out, &names, &uniform_eval(&model)))?.map_3d.unwrap_or(0.0);
        }
        let ok = maps[0] >= maps[1] - 0.01;
        wins += usize::from(ok);
        notes.push(format!("seed {seed}: on {:.4} / off {:.4}{}", maps[0], maps[1], if ok { "" } else { " (miss)" }));
    }
    let detail = format!("{wins}/3 seeds ({})", notes.join(", "));
    ensure(wins >= 2, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn unibev(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_unibev")).args(args).env_remove("UNIBEV_OUTPUT_ROOT").env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), format!("unibev {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    unibev(&["synth", "--frames", "8", "--seed", "10", "--out", path(&data)])?;
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        unibev(&["train", "--data", path(&data), "--steps", "60", "--seed", "10", "--out", path(&out)])?;
        unibev(&["eval", "--data", path(&data), "--checkpoint", path(&out.join("checkpoint.ubck")), "--roi", "vod-corridor", "--out", path(&out.join("eval"))])?;
        metrics.push(std::fs::read(out.join("eval/metrics.json")).map_err(|e| e.to_string())?);
    }
    ensure(metrics[0] == metrics[1], "metrics.json differs between the two runs")?;
    Ok(format!("train (60 steps) + eval twice: metrics.json identical ({} bytes)", metrics[0].len()))
}

// ---------------------------------------------------------------- 11

const SWEEP_STEPS: u64 = 40;

fn criterion_11() -> Outcome {
    let ds = core(Dataset::generate(&scene(11), 100))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    core(write_dataset(&ds, dir.path()))?;
    let back = core(read_dataset(dir.path()))?;
    ensure(back == ds, "dataset changed across write and read")?;
    let bits = |f: &Frame| f.image.data.iter().map(|v| v.to_bits()).chain(f.radar.xyz.iter().flatten().chain(&f.radar.extras).map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure(back.frames.iter().zip(&ds.frames).all(|(a, b)| bits(a) == bits(b)), "image or radar bits changed")?;

    let train = &ds.frames[..10];
    let held_out = &ds.frames[90..];
    let base = ModelConfig::toy("vod");
    let rows = core(sweep_resolution(&[1.0, 0.75, 0.5, 0.25], |scale, rdl| {
        let mut cfg = base.clone();
        cfg.image_size = scaled_size(base.image_size, scale, base.image_multiple())?;
        cfg.rdl.ablate_extras = !rdl;
        let mut t = Trainer::new(UniBevFusion::new(cfg.clone())?, TrainConfig { steps: SWEEP_STEPS, ..TrainConfig::default() })?;
        t.train(train, |_| {})?;
        let names = t.model.class_names();
        let ev = unibev_core::eval::detect_frames(&t.model, held_out, &held_out.iter().map(|f| f.image.clone()).collect::<Vec<_>>())?;
        Ok((cfg.image_size, evaluate(&ev, &names, &EvalConfig::uniform(names.len(), 0.25))?))
    }))?;
    let csv = core(sweep_csv(&rows))?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty sweep CSV")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no `{name}` column"));
    let (rdl, d3, db) = (col("rdl")?, col("delta_3d_pct")?, col("delta_bev_pct")?);
    let mut off_rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[rdl] == "off" {
            off_rows += 1;
            for c in [d3, db] {
                let v: f64 = f[c].parse().map_err(|_| format!("bad delta `{}`", f[c]))?;
                ensure(v == 0.0 && !f[c].starts_with('-'), format!("RDL-off row has delta {}", f[c]))?;
            }
        }
    }
    ensure(off_rows == 4, format!("{off_rows} RDL-off rows, expected 4"))?;
    Ok(format!("100 frames round-trip bit-exact; sweep CSV {} rows, all 4 RDL-off deltas 0.000000", rows.len()))
}

// ---------------------------------------------------------------- driver

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &r {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2}: {tag}  {detail}  [{secs:.1} s]");
    r.is_ok()
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| args.is_empty() || args.contains(&n);
    let mut ok = true;
    let simple: [(usize, fn() -> Outcome); 6] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6)];
    for (n, f) in simple {
        if want(n) {
            ok &= run(n, f);
        }
    }
    if want(7) || want(8) {
        let start = Instant::now();
        match overfit() {
            Ok(o) => {
                println!("(trained the overfit model in {:.1} s)", start.elapsed().as_secs_f64());
                if want(7) {
                    ok &= run(7, || criterion_7(&o));
                }
                if want(8) {
                    ok &= run(8, || criterion_8(&o));
                }
            }
            Err(e) => {
                for n in [7, 8].into_iter().filter(|&n| want(n)) {
                    ok &= run(n, || Err(format!("training failed: {e}")));
                }
            }
        }
    }
    let rest: [(usize, fn() -> Outcome); 3] = [(9, criterion_9), (10, criterion_10), (11, criterion_11)];
    for (n, f) in rest {
        if want(n) {
            ok &= run(n, f);
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
