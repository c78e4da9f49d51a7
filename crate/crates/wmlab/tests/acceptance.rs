//! Acceptance gate for the lab: ten criteria spanning the closed-form decode
//! theory, the diffusion machinery, the regeneration sweep, and the harness
//! contracts. Each criterion prints one `ACCEPTANCE <n> <name>: PASS|FAIL`
//! line (visible with `-- --nocapture`) and fails its test on FAIL.

use std::sync::OnceLock;
use std::time::Instant;

use wmlab::attacks::{apply_attack, AttackConfig, AttackDeps};
use wmlab::config::{
    DatasetConfig, DiffusionConfig, ExperimentConfig, MetricsFlags, SweepConfig, WatermarkConfig,
};
use wmlab::experiment::{
    report_to_csv, run_experiment, run_sweep, sweep_to_csv, trials_to_csv, SweepRow,
};
use wmlab::message::Message;
use wmlab::parallel::run_indexed;
use wmlab::prior::MixturePrior;
use wmlab::sampler::{ddpm_step, regenerate, Sampler};
use wmlab::schedule::{NoiseSchedule, ScheduleKind};
use wmlab::theory::{mc_decode_rate, phi, predict, spearman};
use wmlab::watermark::{embed, keygen, EmbedMode};
use wmlab::{Image, RngStream};

const PHI_1: f64 = 0.8413447460685429;

fn gate(n: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} {name}: {verdict} ({detail})");
    assert!(pass, "ACCEPTANCE {n} {name}: FAIL ({detail})");
}

fn synthetic(count: usize) -> DatasetConfig {
    DatasetConfig::Synthetic {
        count,
        width: 32,
        height: 32,
        channels: 1,
        levels: vec![0.5],
        variance: 0.01,
        export: false,
    }
}

#[test]
fn c01_point_law_at_unit_snr() {
    let start = Instant::now();
    let mc = mc_decode_rate(1.0, 1.0, 1, 200_000, 101).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = (mc.per_bit_acc - PHI_1).abs() <= 0.005 && secs < 10.0;
    gate(
        1,
        "decode rate at beta = sigma",
        pass,
        format!("acc {:.5} vs Phi(1) {:.5}, {:.2} s", mc.per_bit_acc, PHI_1, secs),
    );
}

#[test]
fn c02_accuracy_curve_matches_phi() {
    let mut worst = 0.0f64;
    for &ratio in &[0.25, 0.5, 1.0, 2.0, 4.0] {
        let mc = mc_decode_rate(1.0, ratio, 1, 100_000, 202).unwrap();
        worst = worst.max((mc.per_bit_acc - phi(1.0 / ratio)).abs());
    }
    gate(
        2,
        "per-bit accuracy tracks Phi(beta/sigma)",
        worst <= 0.01,
        format!("max abs deviation {worst:.5}"),
    );
}

#[test]
fn c03_message_rate_matches_power_bound() {
    let trials = 50_000u64;
    let pred = predict(1.0, 1.0, 8).unwrap();
    let mc = mc_decode_rate(1.0, 1.0, 8, trials, 303).unwrap();
    let stderr = (pred.p_msg_bound * (1.0 - pred.p_msg_bound) / trials as f64).sqrt();
    let pass = (mc.msg_rate - pred.p_msg_bound).abs() <= 3.0 * stderr
        && mc.msg_rate <= pred.p_msg_bound + 3.0 * stderr;
    gate(
        3,
        "exact-message rate at k = 8",
        pass,
        format!(
            "rate {:.5} vs Phi(1)^8 {:.5}, 3 stderr {:.5}",
            mc.msg_rate, pred.p_msg_bound, 3.0 * stderr
        ),
    );
}

#[test]
fn c04_score_matches_finite_differences() {
    let dim = 6;
    let mut rng = RngStream::new(404, "accept/score");
    let mut weights: Vec<f64> = (0..5).map(|_| 0.1 + rng.next_f64()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let means: Vec<Vec<f64>> =
        (0..5).map(|_| (0..dim).map(|_| 2.0 * rng.next_f64() - 1.0).collect()).collect();
    let vars: Vec<Vec<f64>> =
        (0..5).map(|_| (0..dim).map(|_| 0.05 + 0.25 * rng.next_f64()).collect()).collect();
    let prior = MixturePrior::new(weights, means, vars).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();

    let mut worst = 0.0f64;
    for &t in &[1usize, 250, 500, 750, 1000] {
        for _ in 0..100 {
            let x: Vec<f64> = (0..dim).map(|_| 1.5 * rng.next_standard_normal()).collect();
            let analytic = prior.score(&x, t, &sched).unwrap();
            let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-12);
            for d in 0..dim {
                let h = 1e-5 * (1.0 + x[d].abs());
                let mut hi = x.clone();
                hi[d] += h;
                let mut lo = x.clone();
                lo[d] -= h;
                let fd = (prior.log_density(&hi, t, &sched).unwrap()
                    - prior.log_density(&lo, t, &sched).unwrap())
                    / (2.0 * h);
                worst = worst.max((analytic[d] - fd).abs() / scale);
            }
        }
    }
    gate(4, "mixture score vs central differences", worst <= 1e-5, format!("max rel err {worst:.2e}"));
}

#[test]
fn c05_ddpm_moments_and_ddim_identity() {
    let dim = 8;
    let mean: Vec<f64> = (0..dim).map(|d| 0.2 + 0.1 * d as f64).collect();
    let var: Vec<f64> = (0..dim).map(|d| 0.01 * (1.0 + 0.25 * d as f64)).collect();
    let prior = MixturePrior::single(mean.clone(), var.clone()).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();

    let n = 20_000usize;
    let chains = run_indexed(n, |i| {
        let mut rng = RngStream::new(505, &format!("accept/chain/{i}"));
        let data: Vec<f64> = (0..dim).map(|_| rng.next_standard_normal()).collect();
        let mut x = Image::from_vec(dim, 1, 1, data).unwrap();
        for t in (1..=sched.t_max()).rev() {
            x = ddpm_step(&x, t, &prior, &sched, &mut rng).unwrap();
        }
        x.into_data()
    });

    let mut pass = true;
    let mut notes = Vec::new();
    for d in 0..dim {
        let m = chains.iter().map(|c| c[d]).sum::<f64>() / n as f64;
        let v = chains.iter().map(|c| (c[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let stderr = (v / n as f64).sqrt();
        if (m - mean[d]).abs() > 3.0 * stderr {
            pass = false;
            notes.push(format!("dim {d} mean {m:.4} vs {:.4} (3 stderr {:.4})", mean[d], 3.0 * stderr));
        }
        if (v / var[d] - 1.0).abs() > 0.05 {
            pass = false;
            notes.push(format!("dim {d} var {v:.5} vs {:.5}", var[d]));
        }
    }

    let mut rng = RngStream::new(505, "accept/ddim0");
    let x0 = Image::from_vec(dim, 1, 1, prior.sample(&mut rng)).unwrap();
    let y = regenerate(&x0, 0.0, Sampler::Ddim, 25, &prior, &sched, None, &mut rng).unwrap();
    if !y.data().iter().zip(x0.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
        pass = false;
        notes.push("ddim strength 0 is not a bit-exact identity".into());
    }

    let detail =
        if notes.is_empty() { format!("{n} chains, all moments in tolerance") } else { notes.join("; ") };
    gate(5, "ddpm chain moments and ddim identity", pass, detail);
}

#[test]
fn c06_full_regeneration_erases_the_message() {
    let cfg = ExperimentConfig {
        seed: 606,
        output: std::env::temp_dir(),
        threads: None,
        calibrate_noise_sigma: false,
        dataset: synthetic(500),
        watermark: WatermarkConfig { k: 32, beta: 1.0, mode: EmbedMode::Informed, seed: None },
        diffusion: DiffusionConfig::default(),
        attacks: vec![AttackConfig::Regen {
            strength: 1.0,
            sampler: Sampler::Ddim,
            substeps: 25,
            seed: None,
        }],
        metrics: MetricsFlags::default(),
        sweep: None,
    };
    let result = run_experiment(&cfg).unwrap();
    let row = result.report.iter().find(|r| r.attack_id == "regen").unwrap();
    let pass = row.detection_rate == 0.0
        && (row.mean_bit_accuracy - 0.5).abs() <= 0.02
        && row.mi_proxy <= 0.02;
    gate(
        6,
        "full-strength regen reaches the erasure limit",
        pass,
        format!(
            "detection {:.4}, per-bit {:.4}, mi {:.4} over {} images",
            row.detection_rate, row.mean_bit_accuracy, row.mi_proxy, row.n
        ),
    );
}

/// Shared 300-image guided sweep: strengths 0..1, DDIM, eta tuned to 0.05,
/// last-window fraction 0.2. Criteria 7 through 9 all read from it.
fn sweep_fixture() -> &'static [SweepRow] {
    static ROWS: OnceLock<Vec<SweepRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let cfg = ExperimentConfig {
            seed: 707,
            output: std::env::temp_dir(),
            threads: None,
            calibrate_noise_sigma: false,
            dataset: synthetic(300),
            watermark: WatermarkConfig { k: 32, beta: 1.0, mode: EmbedMode::Informed, seed: None },
            diffusion: DiffusionConfig::default(),
            attacks: vec![],
            metrics: MetricsFlags::default(),
            sweep: Some(SweepConfig {
                strengths: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0],
                sampler: Sampler::Ddim,
                substeps: 25,
                guided: true,
                eta: Some(0.05),
                last_fraction: 0.2,
            }),
        };
        run_sweep(&cfg).unwrap()
    })
}

fn fixture_row(variant: &str, strength: f64) -> &'static SweepRow {
    sweep_fixture()
        .iter()
        .find(|r| r.variant == variant && r.strength == strength)
        .expect("sweep fixture covers every (variant, strength) cell")
}

const SWEEP_STRENGTHS: [f64; 7] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];

/// The strength criterion 8 operates at: unguided decoding still works there
/// (per-bit around 0.78) while tuned guidance pushes it under 0.55.
const GUIDED_OP_STRENGTH: f64 = 0.3;

#[test]
fn c07_detection_falls_steeply_with_strength() {
    let dets: Vec<f64> =
        SWEEP_STRENGTHS.iter().map(|&s| fixture_row("unguided", s).detection_rate).collect();
    let rho = spearman(&SWEEP_STRENGTHS, &dets).unwrap();
    let mut pass = dets[0] == 1.0 && rho <= -0.9;
    for (&s, &d) in SWEEP_STRENGTHS.iter().zip(&dets) {
        if s >= 0.5 && d > 0.01 {
            pass = false;
        }
    }
    gate(
        7,
        "unguided sweep monotonicity",
        pass,
        format!("detections {dets:?}, spearman {rho:.3}"),
    );
}

#[test]
fn c08_guidance_beats_unguided_regeneration() {
    let u = fixture_row("unguided", GUIDED_OP_STRENGTH);
    let g = fixture_row("guided_full", GUIDED_OP_STRENGTH);
    let penalty = u.mean_psnr_db.unwrap() - g.mean_psnr_db.unwrap();
    let mut pass = u.mean_bit_accuracy >= 0.7
        && g.mean_bit_accuracy <= 0.55
        && penalty <= 3.0;
    let mut ordered = true;
    for &s in &SWEEP_STRENGTHS {
        let base = fixture_row("unguided", s).detection_rate;
        ordered &= fixture_row("guided_full", s).detection_rate <= base + 1e-12;
        ordered &= fixture_row("guided_last20", s).detection_rate <= base + 1e-12;
    }
    pass &= ordered;
    gate(
        8,
        "tuned guidance strictly strengthens the attack",
        pass,
        format!(
            "unguided acc {:.4}, guided acc {:.4}, psnr penalty {:.2} dB, ordered {}",
            u.mean_bit_accuracy, g.mean_bit_accuracy, penalty, ordered
        ),
    );
}

#[test]
fn c09_last_window_guidance_matches_full_window() {
    let mut pass = true;
    let mut details = Vec::new();
    for &s in SWEEP_STRENGTHS.iter().filter(|&&s| s >= GUIDED_OP_STRENGTH) {
        let full = fixture_row("guided_full", s).detection_rate;
        let last = fixture_row("guided_last20", s).detection_rate;
        if (full - last).abs() > 0.05 {
            pass = false;
        }
        details.push(format!("s {s}: full {full:.4} last {last:.4}"));
    }
    gate(9, "last-20% window matches full window", pass, details.join(", "));
}

#[test]
fn c10_attack_contracts_and_thread_invariance() {
    let mut pass = true;
    let mut notes = Vec::new();

    let key = keygen(8, 256, 0.4, 1010, EmbedMode::Informed).unwrap();
    let msg = Message::random(8, &mut RngStream::new(1010, "accept/c10/msg")).unwrap();
    let mut img_rng = RngStream::new(1010, "accept/c10/img");
    let data: Vec<f64> = (0..256).map(|_| 0.5 + 0.1 * img_rng.next_standard_normal()).collect();
    let x = embed(&Image::from_vec(16, 16, 1, data).unwrap(), &key, &msg).unwrap();
    let prior = MixturePrior::isotropic(256, &[0.5], 0.01).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 200).unwrap();
    let deps = AttackDeps {
        prior: Some(&prior),
        sched: Some(&sched),
        key: Some(&key),
        message: Some(&msg),
    };

    let eps = 4.0 / 255.0;
    let adv = apply_attack(
        &x,
        &AttackConfig::Fgsm { epsilon: eps },
        &deps,
        &mut RngStream::new(1, "accept/c10/fgsm"),
    )
    .unwrap();
    let max_dev =
        adv.data().iter().zip(x.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if !(max_dev <= eps && max_dev > eps - 1e-12) {
        pass = false;
        notes.push(format!("fgsm budget off: max dev {max_dev} vs {eps}"));
    }

    let j1 = apply_attack(
        &x,
        &AttackConfig::JpegSim { quality: 60 },
        &deps,
        &mut RngStream::new(2, "accept/c10/jpeg"),
    )
    .unwrap();
    let j2 = apply_attack(
        &j1,
        &AttackConfig::JpegSim { quality: 60 },
        &deps,
        &mut RngStream::new(2, "accept/c10/jpeg"),
    )
    .unwrap();
    let jdev = j2.data().iter().zip(j1.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if jdev > 1e-9 {
        pass = false;
        notes.push(format!("jpeg_sim not idempotent: {jdev:.2e}"));
    }

    let flat = Image::constant(17, 9, 3, 0.37).unwrap();
    let blurred = apply_attack(
        &flat,
        &AttackConfig::Blur { sigma: 1.3, kernel: None },
        &deps,
        &mut RngStream::new(3, "accept/c10/blur"),
    )
    .unwrap();
    if !blurred.data().iter().all(|v| v.to_bits() == 0.37f64.to_bits()) {
        pass = false;
        notes.push("blur moved a constant image".into());
    }

    let all_attacks = [
        AttackConfig::GaussianNoise { sigma: 0.05, seed: None },
        AttackConfig::Blur { sigma: 1.0, kernel: None },
        AttackConfig::JpegSim { quality: 80 },
        AttackConfig::Fgsm { epsilon: eps },
        AttackConfig::Regen { strength: 0.3, sampler: Sampler::Ddim, substeps: 10, seed: None },
        AttackConfig::RegenGuided {
            strength: 0.3,
            eta: 0.1,
            sampler: Sampler::Ddim,
            substeps: 10,
            last_fraction: Some(0.5),
            seed: None,
        },
    ];
    for cfg in &all_attacks {
        let out = apply_attack(&x, cfg, &deps, &mut RngStream::new(4, "accept/c10/dims")).unwrap();
        if out.width() != x.width() || out.height() != x.height() || out.channels() != x.channels()
        {
            pass = false;
            notes.push(format!("{} changed image dimensions", cfg.kind()));
        }
    }

    let base = ExperimentConfig {
        seed: 1011,
        output: std::env::temp_dir(),
        threads: None,
        calibrate_noise_sigma: false,
        dataset: DatasetConfig::Synthetic {
            count: 12,
            width: 16,
            height: 16,
            channels: 1,
            levels: vec![0.4, 0.6],
            variance: 0.01,
            export: false,
        },
        watermark: WatermarkConfig { k: 8, beta: 0.5, mode: EmbedMode::Informed, seed: None },
        diffusion: DiffusionConfig { schedule: ScheduleKind::Linear, t_max: 200, prior: None },
        attacks: all_attacks.to_vec(),
        metrics: MetricsFlags::default(),
        sweep: Some(SweepConfig {
            strengths: vec![0.0, 0.25],
            sampler: Sampler::Ddim,
            substeps: 8,
            guided: true,
            eta: None,
            last_fraction: 0.2,
        }),
    };
    let mut outputs = Vec::new();
    for threads in [1usize, 4, 8] {
        let mut cfg = base.clone();
        cfg.threads = Some(threads);
        let res = run_experiment(&cfg).unwrap();
        let sweep = run_sweep(&cfg).unwrap();
        outputs.push((trials_to_csv(&res.trials), report_to_csv(&res.report), sweep_to_csv(&sweep)));
    }
    if outputs[0] != outputs[1] || outputs[0] != outputs[2] {
        pass = false;
        notes.push("csv outputs differ across thread counts".into());
    }

    let detail = if notes.is_empty() {
        format!("fgsm max dev {max_dev:.8}, jpeg drift {jdev:.1e}, csvs identical at 1/4/8 threads")
    } else {
        notes.join("; ")
    };
    gate(10, "attack contracts and thread invariance", pass, detail);
}
