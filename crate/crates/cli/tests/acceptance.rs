//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4, 5 and 10 train the default encoder on 2,000 synthetic maps
//! (three full trainings in total), so this target takes close to an hour on
//! a single core.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vecprior::autodiff::{Graph, ParamStore};
use vecprior::eval::{chamfer_distance, evaluate_ap, iou, rasterize, DEFAULT_RESOLUTION};
use vecprior::fusion::{
    merge_add, merge_concat, merge_replace, retrieve_priors, FusionConfig, FusionParams, MergeMode,
    PriorStore, QueryGrid,
};
use vecprior::map_io::{clip_to_window, world_to_ego};
use vecprior::pipeline::PIPELINE_OUTPUTS;
use vecprior::pretrain::{
    corrupt_with, map_coordinates, reconstruction_loss_graph, synth_corpus, CorruptionConfig,
};
use vecprior::uve::{PriorFeatureBundle, UveConfig, UveModel};
use vecprior::vector::{
    compute_directions, ElementType, Frame, PerceptionWindow, Pose, SourceTag, VectorInstance,
    VectorMap,
};

const TAUS: [f64; 3] = [0.5, 1.0, 1.5];
const SEED: &str = "0";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn line(xy: &[(f64, f64)], t: ElementType, conf: f64) -> VectorInstance {
    compute_directions(&VectorInstance::from_xy(xy, t, conf).unwrap())
}

fn ego(instances: Vec<VectorInstance>) -> VectorMap {
    VectorMap::new(instances, Frame::Ego, SourceTag::GroundTruth)
}

fn random_polyline<R: Rng>(rng: &mut R, n: usize, x: (f64, f64), y: (f64, f64)) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)))
        .collect()
}

// 1 ------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = UveConfig {
        m_intra: 1,
        n_inter: 1,
        dim: 16,
        heads: 2,
        ffn_dim: 32,
        max_instances: 2,
        max_points: 5,
        ..UveConfig::default()
    };
    let model = UveModel::new(cfg).unwrap();
    let mut params = model.init_params(11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clean = ego(vec![
        line(&random_polyline(&mut rng, 5, (-12.0, 12.0), (-25.0, 25.0)), ElementType::LaneDivider, 1.0),
        line(&random_polyline(&mut rng, 5, (-12.0, 12.0), (-25.0, 25.0)), ElementType::RoadBoundary, 1.0),
    ]);
    let noisy_cfg = CorruptionConfig { seg_fraction: 0.5, pt_fraction: 0.3, ..CorruptionConfig::default() };
    let (input, _) = corrupt_with(&clean, &noisy_cfg, &mut rng).unwrap();
    let target = map_coordinates(&clean);

    let build = |params: &ParamStore| {
        let mut g = Graph::new();
        let (tokens, states) = model.forward(&mut g, &input, params).unwrap();
        let pred = model.decode_coordinates(&mut g, states, &tokens, params).unwrap();
        let loss = reconstruction_loss_graph(&mut g, pred, &target).unwrap();
        (g, loss)
    };

    let (mut g, loss) = build(&params);
    g.backward(loss).unwrap();
    params.zero_grads();
    params.accumulate_grads(&g);

    let h = 1e-5;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for name in &names {
        let analytic = params.grad(name).unwrap().clone();
        for k in 0..analytic.len() {
            let orig = params.value(name).unwrap().data()[k];
            params.value_mut(name).unwrap().data_mut()[k] = orig + h;
            let (g1, l1) = build(&params);
            params.value_mut(name).unwrap().data_mut()[k] = orig - h;
            let (g2, l2) = build(&params);
            params.value_mut(name).unwrap().data_mut()[k] = orig;
            let fd = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{k}]");
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!(
            "{checked} parameters in {} tensors, max relative error {worst:.2e} at {worst_at} (< 1e-4), {secs:.1}s (< 60s)",
            names.len()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn token_states(model: &UveModel, params: &ParamStore, map: &VectorMap, rows: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let (_, states) = model.forward(&mut g, map, params).unwrap();
    g.value(states).data()[..rows * model.config.dim].to_vec()
}

fn mask_isolation() -> Outcome {
    let closed = UveModel::new(UveConfig { n_inter: 0, ..UveConfig::default() }).unwrap();
    let open = UveModel::new(UveConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut isolated, mut opened) = (0, 0);
    let trials = 100;
    for trial in 0..trials {
        let na = rng.random_range(2..=20);
        let nb = rng.random_range(2..=20);
        let a = random_polyline(&mut rng, na, (-15.0, 15.0), (-30.0, 30.0));
        let b = random_polyline(&mut rng, nb, (-15.0, 15.0), (-30.0, 30.0));
        let b2: Vec<_> = b
            .iter()
            .map(|&(x, y)| (x + rng.random_range(-3.0..3.0), y + rng.random_range(-3.0..3.0)))
            .collect();
        let ta = ElementType::ALL[rng.random_range(0..4)];
        let tb = ElementType::ALL[rng.random_range(0..4)];
        let m1 = ego(vec![line(&a, ta, 1.0), line(&b, tb, 1.0)]);
        let m2 = ego(vec![line(&a, ta, 1.0), line(&b2, tb, 1.0)]);
        // instance A: its [VEC] token and na point tokens
        let rows = na + 1;
        let p = closed.init_params(trial).unwrap();
        if token_states(&closed, &p, &m1, rows) == token_states(&closed, &p, &m2, rows) {
            isolated += 1;
        }
        let p = open.init_params(trial).unwrap();
        if token_states(&open, &p, &m1, rows) != token_states(&open, &p, &m2, rows) {
            opened += 1;
        }
    }
    outcome(
        isolated == trials && opened == trials,
        format!("n_inter=0: A bitwise unchanged in {isolated}/{trials} trials; n_inter=2: A changed in {opened}/{trials}"),
    )
}

// 3 ------------------------------------------------------------------------

fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    // two-sided 99% normal approximation
    let half = 2.5758 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

fn generator_statistics() -> Outcome {
    let cfg = CorruptionConfig::default();
    let maps = synth_corpus(1000, 3, &PerceptionWindow::default(), 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut points, mut candidates, mut point_level, mut instances, mut segments) = (0, 0, 0, 0, 0);
    let mut deltas = Vec::new();
    for m in &maps {
        let (_, plan) = corrupt_with(m, &cfg, &mut rng).unwrap();
        points += m.num_points();
        candidates += plan.candidate_points;
        point_level += plan.point_level();
        instances += m.instances.len();
        segments += plan.segment_instances.len();
        for p in &plan.points {
            let (dx, dy) = p.delta.expect("noise mode records offsets");
            deltas.push(dx);
            deltas.push(dy);
        }
    }
    let pt_rate = point_level as f64 / candidates as f64;
    let pt_ci = binomial_interval(cfg.pt_fraction, candidates);
    let seg_rate = segments as f64 / instances as f64;
    let seg_ci = binomial_interval(cfg.seg_fraction, instances);
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let std = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (deltas.len() - 1) as f64).sqrt();
    let pass = points >= 100_000
        && (pt_ci.0..=pt_ci.1).contains(&pt_rate)
        && (seg_ci.0..=seg_ci.1).contains(&seg_rate)
        && (std - cfg.noise_std).abs() <= 0.05 * cfg.noise_std;
    outcome(
        pass,
        format!(
            "{points} points; point rate {pt_rate:.4} in [{:.4}, {:.4}]; segment rate {seg_rate:.4} in [{:.4}, {:.4}] over {instances} instances; noise std {std:.4} (1.0 ± 5%)",
            pt_ci.0, pt_ci.1, seg_ci.0, seg_ci.1
        ),
    )
}

// 4, 5, 10 -----------------------------------------------------------------

fn vecprior(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vecprior"))
        .current_dir(cwd)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`vecprior {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).expect("report exists")).expect("valid json")
}

fn pipeline_args() -> Vec<&'static str> {
    vec!["pipeline", "--out-dir", "run", "--seed", SEED]
}

fn denoising(first_run: &Path) -> Outcome {
    if let Err(e) = vecprior(first_run, &pipeline_args()) {
        return outcome(false, e);
    }
    let report = read_json(&first_run.join("run/train_report.json"));
    let timing = read_json(&first_run.join("run/timing.json"));
    let err = report["final"]["mean_error_corrupted"].as_f64().unwrap_or(f64::INFINITY);
    let base = report["final"]["identity_error_corrupted"].as_f64().unwrap_or(f64::NAN);
    let init = report["initial"]["mean_error_corrupted"].as_f64().unwrap_or(f64::NAN);
    let minutes = timing["wall_clock_s"].as_f64().unwrap_or(f64::INFINITY) / 60.0;
    let epochs = report["train"]["epochs"].as_u64().unwrap_or(0);
    let maps = report["train_maps"].as_u64().unwrap_or(0) + report["heldout_maps"].as_u64().unwrap_or(0);
    outcome(
        err < 0.5 && minutes < 30.0 && epochs == 24 && maps == 2000,
        format!(
            "noise(1m, 10%, 5%), {epochs} epochs, {maps} maps: held-out corrupted-point error {err:.3} m (< 0.5); \
             corrupted input {base:.3} m, untrained model {init:.3} m; full pipeline {minutes:.1} min (< 30)"
        ),
    )
}

fn mask_regime(dir: &Path, noise_run: &Path) -> Outcome {
    let args = ["pretrain", "--synth", "2000", "--mode", "mask", "--seed", SEED, "--out", "mask.ckpt"];
    let start = Instant::now();
    if let Err(e) = vecprior(dir, &args) {
        return outcome(false, e);
    }
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let mask = read_json(&dir.join("mask.ckpt.report.json"));
    let noise = read_json(&noise_run.join("run/train_report.json"));
    let matched = mask["uve"] == noise["uve"]
        && mask["train"] == noise["train"]
        && mask["corruption"]["seg_fraction"] == noise["corruption"]["seg_fraction"]
        && mask["corruption"]["pt_fraction"] == noise["corruption"]["pt_fraction"];
    let m = mask["final"]["mean_error_corrupted"].as_f64().unwrap_or(f64::INFINITY);
    let n = noise["final"]["mean_error_corrupted"].as_f64().unwrap_or(f64::INFINITY);
    outcome(
        matched && m < 1.0 && m >= n,
        format!(
            "mask(10%, 5%) held-out masked-point error {m:.3} m (< 1.0), noise run {n:.3} m (mask >= noise), \
             matched config {matched}, {minutes:.1} min"
        ),
    )
}

fn reproducibility(first_run: &Path, second_run: &Path) -> Outcome {
    if !first_run.join("run/manifest.json").exists() {
        return outcome(false, "first pipeline run did not complete");
    }
    if let Err(e) = vecprior(second_run, &pipeline_args()) {
        return outcome(false, e);
    }
    let mut files: Vec<&str> = PIPELINE_OUTPUTS.to_vec();
    files.push("manifest.json");
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(first_run.join("run").join(f)).ok() != fs::read(second_run.join("run").join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("two runs with seed {SEED}: {} artifacts byte-identical ({})", files.len(), files.join(", "))
        } else {
            format!("artifacts differ: {}", differing.join(", "))
        },
    )
}

// 6 ------------------------------------------------------------------------

mod oracle {
    //! Straightforward re-derivations used only to cross-check the metrics.

    pub fn resample(xy: &[(f64, f64)], n: usize) -> Vec<(f64, f64)> {
        let mut cum = vec![0.0];
        for w in xy.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
        }
        let total = *cum.last().unwrap();
        (0..n)
            .map(|k| {
                if k == n - 1 {
                    return *xy.last().unwrap();
                }
                let s = total * k as f64 / (n - 1) as f64;
                let i = (0..xy.len() - 1).find(|&i| cum[i + 1] >= s).unwrap_or(xy.len() - 2);
                let len = cum[i + 1] - cum[i];
                let t = if len > 0.0 { ((s - cum[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
                (xy[i].0 + t * (xy[i + 1].0 - xy[i].0), xy[i].1 + t * (xy[i + 1].1 - xy[i].1))
            })
            .collect()
    }

    pub fn chamfer(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        let one_way = |p: &[(f64, f64)], q: &[(f64, f64)]| {
            p.iter()
                .map(|u| q.iter().map(|v| (u.0 - v.0).hypot(u.1 - v.1)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / p.len() as f64
        };
        0.5 * (one_way(a, b) + one_way(b, a))
    }

    /// Greedy matching then precision/recall at every confidence cut-off,
    /// 101-point interpolation.
    pub fn ap(preds: &[(Vec<(f64, f64)>, f64)], gts: &[Vec<(f64, f64)>], tau: f64) -> Option<f64> {
        if gts.is_empty() {
            return None;
        }
        let rp: Vec<_> = preds.iter().map(|(xy, _)| resample(xy, 100)).collect();
        let rg: Vec<_> = gts.iter().map(|xy| resample(xy, 100)).collect();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].1.partial_cmp(&preds[a].1).unwrap());
        let mut used = vec![false; gts.len()];
        let mut is_tp = vec![false; preds.len()];
        for &p in &order {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..gts.len() {
                if used[g] {
                    continue;
                }
                let d = chamfer(&rp[p], &rg[g]);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((g, d));
                }
            }
            if let Some((g, d)) = best {
                if d < tau {
                    used[g] = true;
                    is_tp[p] = true;
                }
            }
        }
        // every cut-off: keep predictions with confidence >= c
        let curve: Vec<(usize, usize)> = preds
            .iter()
            .map(|&(_, c)| {
                let kept: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].1 >= c).collect();
                (kept.iter().filter(|&&i| is_tp[i]).count(), kept.len())
            })
            .collect();
        let mut sum = 0.0;
        for r in 0..=100usize {
            let mut best = 0.0f64;
            for &(tp, n) in &curve {
                if tp * 100 >= r * gts.len() {
                    best = best.max(tp as f64 / n as f64);
                }
            }
            sum += best;
        }
        Some(sum / 101.0)
    }
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut compared, mut mismatches, mut map_checks) = (0usize, Vec::new(), 0usize);
    for case in 0..1000 {
        let n_gt = rng.random_range(0..=4);
        let n_pred = rng.random_range(0..=4);
        let mut gts = Vec::new();
        for _ in 0..n_gt {
            let n = rng.random_range(2..=6);
            let t = ElementType::EVALUATED[rng.random_range(0..3)];
            gts.push((random_polyline(&mut rng, n, (-3.0, 3.0), (-3.0, 3.0)), t));
        }
        let mut preds = Vec::new();
        let mut confs: Vec<f64> = Vec::new();
        while confs.len() < n_pred {
            let c: f64 = rng.random_range(0.01..1.0);
            if !confs.contains(&c) {
                confs.push(c);
            }
        }
        for &c in &confs {
            let n = rng.random_range(2..=6);
            // half the predictions are jittered copies of a GT
            let (xy, t) = if !gts.is_empty() && rng.random_bool(0.5) {
                let (src, t) = &gts[rng.random_range(0..gts.len())];
                let s = rng.random_range(0.0..1.5);
                let xy: Vec<_> = src
                    .iter()
                    .map(|&(x, y)| (x + rng.random_range(-s..=s), y + rng.random_range(-s..=s)))
                    .collect();
                (xy, *t)
            } else {
                (random_polyline(&mut rng, n, (-3.0, 3.0), (-3.0, 3.0)), ElementType::EVALUATED[rng.random_range(0..3)])
            };
            preds.push((xy, t, c));
        }
        let pred_map = ego(preds.iter().map(|(xy, t, c)| line(xy, *t, *c)).collect());
        let gt_map = ego(gts.iter().map(|(xy, t)| line(xy, *t, 1.0)).collect());
        let report = evaluate_ap(&[(pred_map, gt_map)], &TAUS).unwrap();
        let mut class_aps = Vec::new();
        for class in ElementType::EVALUATED {
            let p: Vec<_> = preds.iter().filter(|x| x.1 == class).map(|(xy, _, c)| (xy.clone(), *c)).collect();
            let g: Vec<_> = gts.iter().filter(|x| x.1 == class).map(|(xy, _)| xy.clone()).collect();
            let expected: Vec<Option<f64>> = TAUS.iter().map(|&tau| oracle::ap(&p, &g, tau)).collect();
            match report.class(class) {
                Some(c) => {
                    for (k, e) in expected.iter().enumerate() {
                        compared += 1;
                        if Some(c.ap_per_tau[k]) != *e {
                            mismatches.push(format!("case {case} {class} tau {}: {} vs {e:?}", TAUS[k], c.ap_per_tau[k]));
                        }
                    }
                    let mean = (c.ap_per_tau[0] + c.ap_per_tau[1] + c.ap_per_tau[2]) / 3.0;
                    if c.ap != mean {
                        mismatches.push(format!("case {case} {class}: class AP {} is not the mean {mean}", c.ap));
                    }
                    class_aps.push(c.ap);
                }
                None => {
                    compared += 1;
                    if expected.iter().any(Option::is_some) || !report.excluded.contains(&class) {
                        mismatches.push(format!("case {case} {class}: excluded but oracle has GT"));
                    }
                }
            }
        }
        let expected_map = (!class_aps.is_empty()).then(|| class_aps.iter().sum::<f64>() / class_aps.len() as f64);
        map_checks += 1;
        if report.map != expected_map {
            mismatches.push(format!("case {case}: mAP {:?} vs {expected_map:?}", report.map));
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("1000 cases: {compared} (class, tau) APs equal the oracle exactly; {map_checks} mAP values equal the mean over thresholds")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

// 7 ------------------------------------------------------------------------

fn metric_identities() -> Outcome {
    let window = PerceptionWindow::default();
    let maps = synth_corpus(5, 7, &window, 20).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    // synthetic scenes always carry dividers and boundaries; add a crossing
    let crossing = line(&[(-5.0, 2.0), (5.0, 2.0), (5.0, 6.0), (-5.0, 6.0), (-5.0, 2.0)], ElementType::PedestrianCrossing, 1.0);
    let frames: Vec<(VectorMap, VectorMap)> = maps
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.instances.push(crossing.clone());
            (m.clone(), m)
        })
        .collect();
    let report = evaluate_ap(&frames, &TAUS).unwrap();
    let perfect_ap = report.classes.len() == 3 && report.classes.iter().all(|c| c.ap_per_tau.iter().all(|&a| a == 1.0));
    pass &= perfect_ap;
    notes.push(format!("pred == GT: AP 1.0 at every tau for {} classes {perfect_ap}", report.classes.len()));

    let mut iou_ok = true;
    for (p, g) in &frames {
        let gp = rasterize(p, &window, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION).unwrap();
        let gg = rasterize(g, &window, DEFAULT_RESOLUTION, DEFAULT_RESOLUTION).unwrap();
        let r = iou(&gp, &gg).unwrap();
        for class in ElementType::EVALUATED {
            let c = r.classes.iter().find(|c| c.class == class).unwrap();
            iou_ok &= c.iou == 1.0 && c.union > 0;
        }
    }
    pass &= iou_ok;
    notes.push(format!("IoU 1.0 per class {iou_ok}"));

    let empty: Vec<(VectorMap, VectorMap)> = frames
        .iter()
        .map(|(_, g)| (VectorMap::empty_ego(SourceTag::Prediction), g.clone()))
        .collect();
    let report = evaluate_ap(&empty, &TAUS).unwrap();
    let zero = report.classes.len() == 3 && report.map == Some(0.0);
    pass &= zero;
    notes.push(format!("empty preds: AP 0 {zero}"));

    let a = line(&[(0.0, -10.0), (0.0, 10.0)], ElementType::LaneDivider, 1.0);
    let b = line(&[(1.0, -10.0), (1.0, 10.0)], ElementType::LaneDivider, 1.0);
    let d = chamfer_distance(&a, &b).unwrap();
    pass &= d == 1.0;
    notes.push(format!("1 m parallel offset: Chamfer {d}"));
    outcome(pass, notes.join("; "))
}

// 8 ------------------------------------------------------------------------

fn fusion_identities() -> Outcome {
    let grid = QueryGrid::random(50, 20, 64, 8);
    let original = grid.compose();
    let params = FusionParams::random(64, 64, 9);
    let empty = PriorFeatureBundle::empty(64);
    let add = merge_add(&grid, &empty, &params).unwrap();
    let replace = merge_replace(&grid, &empty, &params).unwrap();
    let add_ok = add.features == original && add.backed_count() == 0;
    let replace_ok = replace.features == original && replace.backed_count() == 0;

    let identity = FusionParams::identity(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut full = PriorFeatureBundle::empty(64);
    full.f_ins = vecprior::autodiff::Array::from_vec(&[50, 64], (0..50 * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    full.f_pt = vecprior::autodiff::Array::from_vec(&[50, 20, 64], (0..50 * 20 * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let concat_empty = merge_concat(&grid, &empty, &identity).unwrap();
    let concat_full = merge_concat(&grid, &full, &identity).unwrap();
    let concat_ok = concat_empty.features == original
        && concat_full.features == original
        && concat_full.backed_count() == 50 * 20;

    let d = FusionConfig::default();
    let defaults_ok = d.search_range == 5.0 && d.prior_num == 2 && d.mode == MergeMode::Concat;
    outcome(
        add_ok && replace_ok && concat_ok && defaults_ok,
        format!(
            "empty bundle: add {add_ok}, replace {replace_ok}; concat with [I|0] and zero null prior {concat_ok}; \
             defaults range {} m, prior_num {}, mode {:?}",
            d.search_range, d.prior_num, d.mode
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn marker_map(x: f64, y: f64, id: usize) -> VectorMap {
    // the instance encodes its entry id so results can be told apart
    let inst = line(&[(x, y), (x + 1.0, y + id as f64 * 1e-3 + 0.5)], ElementType::RoadBoundary, 1.0);
    VectorMap::new(vec![inst], Frame::global(), SourceTag::OnlineLocal)
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let mut poses: Vec<Pose> = Vec::with_capacity(n);
    for k in 0..n {
        // every tenth entry reuses an earlier position to exercise the tie rule
        let pose = if k > 0 && k % 10 == 0 {
            let p = poses[rng.random_range(0..k)];
            Pose::new(p.x, p.y, rng.random_range(-3.0..3.0))
        } else {
            Pose::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(-3.0..3.0))
        };
        poses.push(pose);
    }
    let mut stamps: Vec<u64> = (0..n as u64).collect();
    for i in (1..n).rev() {
        stamps.swap(i, rng.random_range(0..=i));
    }
    let mut store = PriorStore::default();
    for k in 0..n {
        store.insert(poses[k], marker_map(poses[k].x, poses[k].y, k), stamps[k]).unwrap();
    }
    let window = PerceptionWindow::default();
    let (mut agree, mut nonempty, mut ties) = (0, 0, 0);
    let queries = 100;
    for q in 0..queries {
        // half the queries sit on a stored position so results are never sparse
        let pose = if q % 2 == 0 {
            let p = poses[rng.random_range(0..n)];
            Pose::new(p.x + rng.random_range(-2.0..2.0), p.y + rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0))
        } else {
            Pose::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0), rng.random_range(-3.0..3.0))
        };
        let (range, num) = if q % 3 == 0 { (15.0, 5) } else { (5.0, 2) };
        let mut scan: Vec<(f64, u64, usize)> = (0..n)
            .map(|k| ((poses[k].x - pose.x).hypot(poses[k].y - pose.y), stamps[k], k))
            .filter(|&(d, _, _)| d <= range)
            .collect();
        scan.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
        ties += scan.windows(2).filter(|w| w[0].0 == w[1].0).count();
        scan.truncate(num);
        let expected: Vec<VectorMap> = scan
            .iter()
            .map(|&(_, _, k)| clip_to_window(&world_to_ego(&marker_map(poses[k].x, poses[k].y, k), pose).unwrap(), &window).unwrap())
            .collect();
        let got = retrieve_priors(&store, pose, range, num, &window).unwrap();
        nonempty += usize::from(!got.is_empty());
        if got == expected {
            agree += 1;
        }
    }
    outcome(
        agree == queries,
        format!("{n} entries, {queries} queries: {agree} match the linear scan ({nonempty} non-empty, {ties} equal-distance pairs in range)"),
    )
}

fn main() {
    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    let mask = tempfile::tempdir().expect("temp dir");

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("mask isolation", Box::new(mask_isolation)),
        ("generator statistics", Box::new(generator_statistics)),
        ("denoising (noise regime)", Box::new(|| denoising(first.path()))),
        ("mask regime", Box::new(|| mask_regime(mask.path(), first.path()))),
        ("AP oracle equivalence", Box::new(ap_oracle)),
        ("metric identities", Box::new(metric_identities)),
        ("fusion identities", Box::new(fusion_identities)),
        ("retrieval correctness", Box::new(retrieval)),
        ("reproducibility", Box::new(|| reproducibility(first.path(), second.path()))),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|k| k.trim().parse().ok()).collect());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("criterion {id:>2} SKIP  {name}");
            continue;
        }
        let start = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "criterion {id:>2} {}  {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
