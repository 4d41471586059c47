//! Scratch calibration driver for picking training budgets. Not part of the
//! shipped interface; run phases with e.g.
//! `cargo run -p meanflow-core --example calibrate -- time`.

use std::time::Instant;

use meanflow_core::eval::{mmd2, variant_objective};
use meanflow_core::network::{Activation, Architecture, VelocityNet};
use meanflow_core::objective::{total_loss, DerivativeMode, FlowBatch, ObjectiveConfig};
use meanflow_core::rng::{StreamRng, STREAM_NOISE, STREAM_TIMES};
use meanflow_core::tasks::{default_dock, default_gmm, default_mixed, default_reach, generate, TaskSpec};
use meanflow_core::trainer::{train, TrainConfig};
use meanflow_core::Tape;

fn lean_arch(cond_dim: usize) -> Architecture {
    Architecture {
        action_dim: 2,
        cond_dim,
        hidden_dims: vec![64, 64, 64],
        time_embed_dim: 16,
        activation: Activation::Gelu,
        feature_layer: 1,
    }
}

fn time_phase() {
    for (name, arch) in [
        ("lean", lean_arch(0)),
        ("default", Architecture::default()),
    ] {
        for mode in [DerivativeMode::Jvp, DerivativeMode::DdeFull] {
            let net = VelocityNet::init(arch.clone(), 0).unwrap();
            let mut noise = StreamRng::new(0, STREAM_NOISE);
            let mut times = StreamRng::new(0, STREAM_TIMES);
            let mut data = StreamRng::new(0, 0);
            let actions =
                meanflow_core::Tensor::new(vec![128, 2], data.normal_vec(256)).unwrap();
            let cfg = ObjectiveConfig {
                derivative_mode: mode,
                ..ObjectiveConfig::default()
            };
            // Warm up, then time.
            for _ in 0..2 {
                let fb = FlowBatch::make(&actions, None, cfg.p_equal, &mut noise, &mut times)
                    .unwrap();
                let tape = Tape::new();
                let _ = total_loss(&net, &fb, &cfg, &tape).unwrap();
            }
            let t0 = Instant::now();
            let reps = 10;
            let mut nodes = 0;
            for _ in 0..reps {
                let fb = FlowBatch::make(&actions, None, cfg.p_equal, &mut noise, &mut times)
                    .unwrap();
                let tape = Tape::new();
                let sr = total_loss(&net, &fb, &cfg, &tape).unwrap();
                nodes = sr.diagnostics.tape_nodes;
            }
            let per = t0.elapsed().as_secs_f64() / reps as f64;
            println!("{name:8} {mode:?}: {:.1} ms/step, {} tape nodes", per * 1e3, nodes);
        }
    }
}

fn run_variants(
    task_name: &str,
    spec: &TaskSpec,
    arch: Architecture,
    cfg: TrainConfig,
    base_obj: &ObjectiveConfig,
    variants: &[&str],
) {
    let train_ds = generate(spec, 512, 1000).unwrap();
    let eval_ds = generate(spec, 512, 1001).unwrap();
    let scale = cfg.action_scale;
    let seeds = cfg.seeds.clone();
    println!(
        "== {task_name}: epochs {} scale {} wd {:.0e} p_eq {} seeds {:?} ==",
        cfg.epochs, scale, cfg.weight_decay, base_obj.p_equal, seeds
    );
    let ne = eval_ds.len();
    let rows: Vec<usize> = (0..ne).collect();
    let (acts, conds) = eval_ds.gather(&rows);
    let cond_t = conds.expect("conditioned task");
    const NFES: [usize; 4] = [1, 2, 5, 10];
    for v in variants {
        let obj = variant_objective(base_obj, v).unwrap();
        let mut overall: Vec<Vec<f64>> = vec![Vec::new(); NFES.len()];
        let mut small: Vec<Vec<f64>> = vec![Vec::new(); NFES.len()];
        for &seed in &seeds {
            let t0 = Instant::now();
            let run = train(&arch, &obj, &cfg, &train_ds, &eval_ds, seed).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            let last = run.metrics.last().unwrap();
            // One-step norm/angle medians vs the expert rows (raw units).
            let pred = meanflow_core::sampler::sample_one_step(
                run.trainer.net(),
                Some(&cond_t),
                ne,
                777,
            )
            .unwrap()
            .scale(scale);
            let mut norms: Vec<f64> = Vec::new();
            let mut angerr: Vec<f64> = Vec::new();
            for i in 0..ne {
                let p = pred.row(i);
                let a = acts.row(i);
                let np = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                norms.push(np);
                if np > 1e-12 && na > 1e-12 {
                    let cosd = ((p[0] * a[0] + p[1] * a[1]) / (np * na)).clamp(-1.0, 1.0);
                    angerr.push(cosd.acos().to_degrees());
                }
            }
            norms.sort_by(|a, b| a.total_cmp(b));
            angerr.sort_by(|a, b| a.total_cmp(b));
            let q = |v: &[f64], f: f64| v[((v.len() - 1) as f64 * f) as usize];
            print!(
                "  {v} seed{seed} ({secs:.0}s): mse {:.3} disp {:+.2} cos {:.3} | 1-step |a| {:.4} ang {:.0}deg |",
                last.mse, last.dispersive, last.cosine, q(&norms, 0.5), q(&angerr, 0.5)
            );
            for (i, &nfe) in NFES.iter().enumerate() {
                let mut acc = 0.0;
                let mut acc_small = 0.0;
                let mut has_small = false;
                const NOISE_SEEDS: [u64; 3] = [777, 778, 779];
                for &ns in &NOISE_SEEDS {
                    let s = meanflow_core::sampler::sample_multi_step(
                        run.trainer.net(),
                        Some(&cond_t),
                        ne,
                        nfe,
                        ns,
                    )
                    .unwrap()
                    .scale(scale);
                    let rep = meanflow_core::tasks::eval_success(
                        spec,
                        &cond_t,
                        &s,
                        &eval_ds.tags[..ne],
                    )
                    .unwrap();
                    acc += rep.overall.success_rate * 100.0;
                    if let Some(st) = rep.by_stratum.get("small") {
                        has_small = true;
                        acc_small += st.success_rate * 100.0;
                    }
                }
                let k = NOISE_SEEDS.len() as f64;
                overall[i].push(acc / k);
                print!(" n{nfe}={:.1}", acc / k);
                if has_small {
                    small[i].push(acc_small / k);
                    print!("(s{:.1})", acc_small / k);
                }
            }
            if let Some(a) = &run.aborted {
                print!(" ABORTED: {a}");
            }
            println!();
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        print!("  {v} MEAN:");
        for (i, &nfe) in NFES.iter().enumerate() {
            print!(" n{nfe}={:.1}", mean(&overall[i]));
            if !small[i].is_empty() {
                print!("(s{:.1})", mean(&small[i]));
            }
        }
        println!();
    }
}

fn gmm_phase(steps: usize, n: usize, p_equal_pct: i64, seed: u64, variant: &str) {
    let spec = default_gmm();
    let train_ds = generate(&spec, n, 1000).unwrap();
    let eval_ds = generate(&spec, 1024, 1001).unwrap();
    let steps_per_epoch = (n / 128).max(1);
    let epochs = (steps / steps_per_epoch).max(1);
    let mut obj = variant_objective(&ObjectiveConfig::default(), variant).unwrap();
    if p_equal_pct >= 0 {
        obj.p_equal = p_equal_pct as f64 / 100.0;
    }
    let cfg = TrainConfig {
        epochs,
        eval_every: (epochs / 10).max(1),
        eval_samples: 512,
        seeds: vec![seed],
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = train(
        &Architecture::default(),
        &obj,
        &cfg,
        &train_ds,
        &eval_ds,
        seed,
    )
    .unwrap();
    println!(
        "gmm steps={steps} n={n} p_eq={:.2} seed={seed} variant={variant} ({:.0}s):",
        obj.p_equal,
        t0.elapsed().as_secs_f64()
    );
    for m in &run.metrics {
        println!(
            "  step {:5}  mmd2 {:+.4}  total {:.3} = mse {:.3} + d {:.3} + c {:.3} (cos_a {:.2}, |u| {:.2}, |tgt| {:.2})",
            m.step,
            m.mmd2.unwrap(),
            m.total,
            m.mse,
            m.dispersive,
            m.cosine,
            m.mean_cos_alpha,
            m.mean_pred_norm,
            m.mean_target_norm,
        );
    }
    // Sanity: what does raw noise score?
    let noise = meanflow_core::sampler::initial_noise(512, 2, 7);
    println!("  raw-noise mmd2: {:+.4}", mmd2(&noise, &eval_ds.actions).unwrap());

    // Final-model eval-noise spread: same model, several noise seeds.
    let net = run.trainer.net();
    let spread: Vec<f64> = (0..5)
        .map(|k| {
            let s = meanflow_core::sampler::sample_one_step(net, None, 512, 90_000 + k).unwrap();
            mmd2(&s, &eval_ds.actions).unwrap()
        })
        .collect();
    println!(
        "  one-step mmd2 over 5 noise seeds: {:?}",
        spread.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );

    // Sample diagnostics: where does the one-step map actually put mass?
    for nfe in [1usize, 5] {
        let s = meanflow_core::sampler::sample_multi_step(net, None, 512, nfe, 12345).unwrap();
        let modes = match &spec {
            TaskSpec::Gmm2d(g) => g.means.clone(),
            _ => unreachable!(),
        };
        let mut near_mode = 0;
        let mut near_origin = 0;
        let mut occup = [0usize; 4];
        for i in 0..512 {
            let p = s.row(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if r < 0.5 {
                near_origin += 1;
            }
            let (k, dist) = modes
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    (k, ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            if dist < 0.45 {
                near_mode += 1;
                occup[k] += 1;
            }
        }
        println!(
            "  nfe={nfe}: mmd2 {:+.4}, near-mode {:.0}%, occupancy {:?}, origin-collapse {:.0}%",
            mmd2(&s, &eval_ds.actions).unwrap(),
            near_mode as f64 / 5.12,
            occup,
            near_origin as f64 / 5.12
        );
    }
}

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "time".into());
    let arg = |k: usize, dft: i64| -> i64 {
        std::env::args()
            .nth(k)
            .and_then(|s| s.parse().ok())
            .unwrap_or(dft)
    };
    let epochs = arg(2, 0) as usize;
    match phase.as_str() {
        "time" => time_phase(),
        "gmm" => gmm_phase(
            if epochs > 0 { epochs } else { 2000 },
            arg(3, 512) as usize,
            arg(4, -1),
            arg(5, 0) as u64,
            &std::env::args().nth(6).unwrap_or_else(|| "full".into()),
        ),
        // dock [epochs] [scale_x1000] [offset_deg] [p_equal_pct] [n_seeds] [wd_x10] [lam_cos_x100]
        "dock" => {
            let e = if epochs > 0 { epochs } else { 1250 };
            let scale = arg(3, 100) as f64 / 1000.0;
            let offset = arg(4, 45) as f64;
            let p_eq = arg(5, 75) as f64 / 100.0;
            let n_seeds = arg(6, 2) as u64;
            let wd = arg(7, 0) as f64 / 10.0;
            let lam_cos = arg(8, 50) as f64 / 100.0;
            let mut spec = match default_dock(0.02) {
                TaskSpec::PrecisionDock(d) => d,
                _ => unreachable!(),
            };
            spec.mode_offset_deg = offset;
            run_variants(
                "dock",
                &TaskSpec::PrecisionDock(spec),
                lean_arch(2),
                TrainConfig {
                    epochs: e,
                    eval_every: e,
                    eval_samples: 256,
                    action_scale: scale,
                    weight_decay: wd,
                    seeds: (0..n_seeds).collect(),
                    ..TrainConfig::default()
                },
                &ObjectiveConfig {
                    p_equal: p_eq,
                    lambda_cos: lam_cos,
                    ..ObjectiveConfig::default()
                },
                &["full", "no_disp", "no_disp_no_cos", "dde"],
            )
        }
        // mixed [epochs] [scale_x1000] [p_equal_pct] [n_seeds]
        "mixed" => {
            let e = if epochs > 0 { epochs } else { 750 };
            run_variants(
                "mixed",
                &default_mixed(),
                lean_arch(3),
                TrainConfig {
                    epochs: e,
                    eval_every: e,
                    eval_samples: 256,
                    action_scale: arg(3, 1000) as f64 / 1000.0,
                    seeds: (0..arg(5, 2) as u64).collect(),
                    ..TrainConfig::default()
                },
                &ObjectiveConfig {
                    p_equal: arg(4, 75) as f64 / 100.0,
                    ..ObjectiveConfig::default()
                },
                &["full", "no_disp", "no_disp_no_cos", "dde"],
            )
        }
        "reach" => {
            let e = if epochs > 0 { epochs } else { 250 };
            run_variants(
                "reach",
                &default_reach(),
                lean_arch(2),
                TrainConfig {
                    epochs: e,
                    eval_every: e,
                    eval_samples: 256,
                    seeds: vec![0],
                    ..TrainConfig::default()
                },
                &ObjectiveConfig::default(),
                &["full", "no_disp_no_cos", "dde"],
            )
        }
        other => eprintln!("unknown phase {other}"),
    }
}
