//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Criteria 4–6 share one seeded end-to-end experiment whose configuration
//! lives in `tests/data/acceptance.json`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use adhoc_fusion::attention::{global_fusion, inter_channel_layer, AttentionState};
use adhoc_fusion::cli::{run_experiment, ExperimentConfig, ExperimentReport};
use adhoc_fusion::eval::compute_eer;
use adhoc_fusion::model::{decode_checkpoint, encode_checkpoint, CheckpointMeta, FusionModel, ModelConfig};
use adhoc_fusion::normalize::sparsemax;
use adhoc_fusion::simulator::{encode_dataset, generate, ChannelCount, SimConfig};
use adhoc_fusion::training::{angular_prototypical_loss, loss_and_grads, sample_epoch, train, TrainConfig};
use adhoc_fusion::{Matrix, Normalizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. Sparsemax against an active-set brute force

/// Tries every support set; the projection is the unique feasible one.
fn brute_force_projection(z: &[f64]) -> Vec<f64> {
    let k = z.len();
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let inside = support.iter().all(|&i| z[i] - tau > 0.0);
        let outside = (0..k).filter(|i| mask & (1 << i) == 0).all(|i| z[i] <= tau);
        if inside && outside {
            return (0..k)
                .map(|i| if mask & (1 << i) != 0 { z[i] - tau } else { 0.0 })
                .collect();
        }
    }
    panic!("no feasible support for {z:?}");
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut with_zeros = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let scale = [0.1, 1.0, 5.0][rng.random_range(0..3)];
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let p = sparsemax(&z);
        let q = brute_force_projection(&z);
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|&v| v == 0.0) {
            with_zeros += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && worst_sum < 1e-9 && with_zeros > 0 && secs < 10.0,
        format!(
            "max |closed form - brute force| {worst:.1e}, max |sum - 1| {worst_sum:.1e}, \
             {with_zeros}/1000 vectors with exact zeros, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Full-loss gradients against central differences

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let data = generate(&SimConfig {
        d_in: 8,
        speakers: 2,
        utterances_per_speaker: 2,
        channels: ChannelCount::Fixed(3),
        crops: 1,
        seed: 21,
        ..SimConfig::default()
    })
    .expect("toy data");
    let batch = sample_epoch(&data, &TrainConfig::default(), 0).expect("batch").batches[0].clone();
    let h = 1e-5;
    let floor = 1e-6;
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [Normalizer::Softmax, Normalizer::Sparsemax] {
        let config = ModelConfig {
            d_in: 8,
            width: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 16,
            mode,
            ..ModelConfig::default()
        };
        let model = FusionModel::init(config, 5).expect("model");
        let (_, grads) = loss_and_grads(&model, &data, &batch).expect("gradients");
        let mut worst = 0.0f64;
        let mut count = 0;
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[p].as_mut_slice()[k] += delta;
                    angular_prototypical_loss(&m, &data, &batch).expect("loss")
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice()[k];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(floor));
                count += 1;
            }
        }
        pass &= worst < 1e-4;
        parts.push(format!("{mode}: {count} entries, worst rel. error {worst:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(pass && secs < 60.0, format!("{}; {secs:.1}s", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 3. Permutation equivariance / invariance

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut layer_err, mut fusion_err, mut forward_err) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..100 {
        let mode = if trial % 2 == 0 { Normalizer::Sparsemax } else { Normalizer::Softmax };
        let model = FusionModel::init(
            ModelConfig {
                d_in: 12,
                width: 8,
                heads: 2,
                layers: 2,
                ffn_hidden: 16,
                mode,
                ..ModelConfig::default()
            },
            trial,
        )
        .unwrap();
        let opts = model.config.attention_opts();
        let c = rng.random_range(2..9);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);

        let x = random_matrix(&mut rng, c, 8);
        let state = AttentionState {
            scores: (0..2).map(|_| random_matrix(&mut rng, c, c)).collect(),
        };
        let (y, att) = inter_channel_layer(&x, &state, &model.layers[0], opts).unwrap();
        let (yp, attp) = inter_channel_layer(
            &x.permute_rows(&perm).unwrap(),
            &state.conjugate(&perm).unwrap(),
            &model.layers[0],
            opts,
        )
        .unwrap();
        layer_err = layer_err.max(yp.max_abs_diff(&y.permute_rows(&perm).unwrap()));
        for (s, sp) in att.state.scores.iter().zip(&attp.state.scores) {
            layer_err = layer_err.max(sp.max_abs_diff(&s.conjugate(&perm).unwrap()));
        }

        let (f, _) = global_fusion(&x, &state, &model.fusion, opts).unwrap();
        let (fp, _) = global_fusion(
            &x.permute_rows(&perm).unwrap(),
            &state.conjugate(&perm).unwrap(),
            &model.fusion,
            opts,
        )
        .unwrap();
        fusion_err = fusion_err.max(fp.max_abs_diff(&f));

        let u = random_matrix(&mut rng, c, 12);
        let e = model.forward(&u).unwrap();
        let ep = model.forward(&u.permute_rows(&perm).unwrap()).unwrap();
        forward_err = forward_err.max(ep.max_abs_diff(&e));
    }
    outcome(
        layer_err < 1e-9 && fusion_err < 1e-9 && forward_err < 1e-9,
        format!(
            "100 permutations: layer equivariance {layer_err:.1e}, fusion invariance \
             {fusion_err:.1e}, forward invariance {forward_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4–6. End-to-end experiment

fn run_acceptance_experiment() -> Result<(ExperimentReport, f64), String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/acceptance.json");
    let cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let report = run_experiment(&cfg, None).map_err(|e| e.to_string())?;
    Ok((report, started.elapsed().as_secs_f64()))
}

fn criterion_4(exp: &Result<(ExperimentReport, f64), String>) -> Outcome {
    match exp {
        Err(e) => outcome(false, format!("experiment failed: {e}")),
        Ok((report, secs)) => {
            let trained = match report.config.simulation.channels {
                ChannelCount::Fixed(c) => c.to_string(),
                ChannelCount::Range([lo, hi]) => format!("{lo}-{hi}"),
            };
            let mut missing = Vec::new();
            let mut cells = Vec::new();
            for m in &report.config.modes {
                for &c in &report.config.test.channels {
                    match report.eer(&format!("fusion-{m}"), c) {
                        Some(e) if e.is_finite() => cells.push(format!("{m}@{c}ch {:.2}%", 100.0 * e)),
                        _ => missing.push(format!("{m}@{c}ch")),
                    }
                }
            }
            let expected = [20u16, 30, 40];
            let covers = expected.iter().all(|c| report.config.test.channels.contains(c));
            outcome(
                missing.is_empty() && covers,
                format!(
                    "trained on {trained} channels, evaluated {} ({secs:.0}s experiment){}",
                    cells.join(", "),
                    if missing.is_empty() { String::new() } else { format!("; missing {missing:?}") }
                ),
            )
        }
    }
}

fn criterion_5(exp: &Result<(ExperimentReport, f64), String>) -> Outcome {
    let Ok((report, secs)) = exp else {
        return outcome(false, "experiment failed".into());
    };
    let c = 20;
    let (Some(sparse), Some(soft), Some(oracle)) = (
        report.eer("fusion-sparsemax", c),
        report.eer("fusion-softmax", c),
        report.eer("oracle-one-best", c),
    ) else {
        return outcome(false, "missing 20-channel results".into());
    };
    // Ties within half an EER point count as sparsemax keeping up.
    let ordering = sparse <= soft + 0.005;
    let margin = sparse <= 0.9 * oracle && soft <= 0.9 * oracle;
    outcome(
        ordering && margin && *secs <= 1800.0,
        format!(
            "20-ch EER: sparsemax {:.2}%, softmax {:.2}%, oracle one-best {:.2}% \
             (fusion/oracle {:.2} and {:.2}, need <= 0.90)",
            100.0 * sparse,
            100.0 * soft,
            100.0 * oracle,
            sparse / oracle,
            soft / oracle
        ),
    )
}

fn criterion_6(exp: &Result<(ExperimentReport, f64), String>) -> Outcome {
    let Ok((report, _)) = exp else {
        return outcome(false, "experiment failed".into());
    };
    let (Some(sparse), Some(soft)) = (
        report.mode(Normalizer::Sparsemax),
        report.mode(Normalizer::Softmax),
    ) else {
        return outcome(false, "both modes must be trained".into());
    };
    let s = &sparse.selection;
    let f = &soft.selection;
    outcome(
        s.fraction >= 0.5 && f.zero_noise_weights == 0 && f.selected == 0,
        format!(
            "sparsemax shuts out every noise channel in {}/{} held-out utterances ({:.1}%), \
             {:.1}% of its noise-channel weights are exactly zero; softmax: {} zero weights",
            s.selected,
            s.utterances,
            100.0 * s.fraction,
            100.0 * s.zero_noise_weights as f64 / s.noise_weights.max(1) as f64,
            f.zero_noise_weights
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. EER against an exhaustive sweep

fn sweep_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let rates = |t: f64| {
        let mut fa = 0.0;
        let mut fr = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            if l && s < t {
                fr += 1.0;
            }
            if !l && s >= t {
                fa += 1.0;
            }
        }
        (fa / n_neg, fr / n_pos)
    };
    let mut curve: Vec<(f64, f64)> = thresholds.iter().map(|&t| rates(t)).collect();
    curve.push(rates(f64::INFINITY));
    for w in curve.windows(2) {
        let (far0, frr0) = w[0];
        let (far1, frr1) = w[1];
        if far0 >= frr0 && far1 <= frr1 {
            if far0 == frr0 {
                return far0;
            }
            // Intersection of the two straight segments.
            let s = (far0 - frr0) / ((far0 - frr0) - (far1 - frr1));
            return far0 + s * (far1 - far0);
        }
    }
    unreachable!("FAR - FRR runs from +1 to -1")
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = rng.random_range(2..200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s = rng.random_range(-1.0..1.0) + if l { 0.5 } else { 0.0 };
                // every other set on a coarse grid, to exercise ties
                if i % 2 == 0 { (s * 10.0f64).round() / 10.0 } else { s }
            })
            .collect();
        let got = compute_eer(&scores, &labels).unwrap().eer;
        worst = worst.max((got - sweep_eer(&scores, &labels)).abs());
    }
    let example = |pos: &[f64], neg: &[f64]| {
        let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
        let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        compute_eer(&scores, &labels).unwrap().eer
    };
    let e0 = example(&[0.9, 0.8], &[0.1, 0.2]);
    let e1 = example(&[0.9, 0.8, 0.7, 0.3], &[0.6, 0.2, 0.1, 0.05]);
    let e2 = example(&[0.1], &[0.9]);
    let examples_ok = e0.abs() < 1e-12 && (e1 - 0.25).abs() < 1e-12 && (e2 - 1.0).abs() < 1e-12;
    outcome(
        worst < 1e-9 && examples_ok,
        format!("100 random sets, max deviation {worst:.1e}; worked examples {e0}, {e1}, {e2}"),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism and serialization

fn criterion_8() -> Outcome {
    let sim = SimConfig {
        d_in: 16,
        speakers: 6,
        utterances_per_speaker: 6,
        channels: ChannelCount::Range([4, 9]),
        crops: 2,
        noise_channel_fraction: 0.25,
        seed: 8,
        ..SimConfig::default()
    };
    let a = encode_dataset(&generate(&sim).unwrap()).unwrap();
    let b = encode_dataset(&generate(&sim).unwrap()).unwrap();
    let data_ok = a == b;

    let data = generate(&sim).unwrap();
    let model_cfg = ModelConfig {
        d_in: 16,
        width: 8,
        heads: 2,
        layers: 2,
        ffn_hidden: 16,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        batch_speakers: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = || {
        train(FusionModel::init(model_cfg.clone(), 8).unwrap(), &data, &tc, 0, |_, _| Ok(())).unwrap()
    };
    let (r1, r2) = (run(), run());
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let history_ok = bits(r1.losses()) == bits(r2.losses());

    let meta = CheckpointMeta { epoch: 3 };
    let bytes = encode_checkpoint(&r1.model, meta).unwrap();
    let (back, back_meta) = decode_checkpoint(&bytes).unwrap();
    let params_ok = r1
        .model
        .params()
        .iter()
        .zip(back.params())
        .all(|(p, q)| bits(p.as_slice().to_vec()) == bits(q.as_slice().to_vec()));
    let ckpt_ok = params_ok
        && back_meta == meta
        && back.config == r1.model.config
        && encode_checkpoint(&back, meta).unwrap() == bytes;
    outcome(
        data_ok && history_ok && ckpt_ok,
        format!(
            "dataset bytes identical: {data_ok} ({} bytes); loss histories identical: \
             {history_ok}; checkpoint round trip bitwise: {ckpt_ok}",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {n} ({name}): {}", o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    report(1, "sparsemax oracle", criterion_1());
    report(2, "gradient suite", criterion_2());
    report(3, "permutation properties", criterion_3());
    let exp = run_acceptance_experiment();
    if let Ok((r, _)) = &exp {
        print!("{}", r.table());
    }
    report(4, "channel-count generalization", criterion_4(&exp));
    report(5, "ordering reproduction", criterion_5(&exp));
    report(6, "channel selection", criterion_6(&exp));
    report(7, "EER oracle", criterion_7());
    report(8, "determinism & serialization", criterion_8());
    if failures == 0 {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
