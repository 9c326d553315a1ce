//! Trial scoring and EER: an untrained fusion head against the oracle
//! one-best channel, plus the EER worked examples.

use adhoc_fusion::eval::{build_trials, compute_eer, evaluate, Baseline};
use adhoc_fusion::model::{FusionModel, ModelConfig};
use adhoc_fusion::simulator::{generate, ChannelCount, SimConfig};

fn main() -> adhoc_fusion::Result<()> {
    let pos = [0.9, 0.8, 0.7, 0.3];
    let neg = [0.6, 0.2, 0.1, 0.05];
    let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let labels: Vec<bool> = (0..8).map(|i| i < 4).collect();
    let eer = compute_eer(&scores, &labels)?;
    println!("worked example: EER {:.2} at threshold {:.3}", eer.eer, eer.threshold);

    let data = generate(&SimConfig {
        d_in: 32,
        speakers: 10,
        utterances_per_speaker: 6,
        channels: ChannelCount::Fixed(20),
        noise_channel_fraction: 0.25,
        seed: 9,
        ..SimConfig::default()
    })?;
    let trials = build_trials(&data);
    println!("{} utterances -> {} trials", data.utterances.len(), trials.len());

    let oracle = evaluate(&data, Baseline::OracleOneBest, None)?;
    let model = FusionModel::init(
        ModelConfig {
            d_in: 32,
            width: 16,
            heads: 2,
            layers: 1,
            ffn_hidden: 16,
            ..ModelConfig::default()
        },
        3,
    )?;
    let fusion = evaluate(&data, Baseline::Fusion, Some(&model))?;
    for r in [&oracle, &fusion] {
        println!(
            "{:<18} EER {:6.2}%  ({} positive / {} negative trials)",
            r.system,
            100.0 * r.eer,
            r.counts.positive,
            r.counts.negative
        );
    }
    Ok(())
}
