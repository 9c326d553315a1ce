//! Trains softmax and sparsemax fusion heads briefly and prints the final
//! attention of one utterance, marking noise-dominated channels.
//!
//! Sparsemax can assign those channels exactly zero weight; softmax only
//! ever makes them small.

use adhoc_fusion::eval::channel_selection;
use adhoc_fusion::model::{FusionModel, ModelConfig};
use adhoc_fusion::simulator::{generate, ChannelCount, SimConfig};
use adhoc_fusion::training::{train, TrainConfig};
use adhoc_fusion::Normalizer;

fn main() -> adhoc_fusion::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(15);
    let sim = SimConfig {
        d_in: 32,
        speakers: 24,
        utterances_per_speaker: 10,
        channels: ChannelCount::Fixed(8),
        crops: 2,
        noise_channel_fraction: 0.25,
        ..SimConfig::default()
    };
    let data = generate(&sim)?;
    let held_out = generate(&SimConfig { speakers: 6, seed: 77, ..sim })?;

    for mode in [Normalizer::Softmax, Normalizer::Sparsemax] {
        let model = FusionModel::init(
            ModelConfig {
                d_in: 32,
                width: 16,
                heads: 4,
                layers: 2,
                ffn_hidden: 32,
                mode,
                ..ModelConfig::default()
            },
            1,
        )?;
        let cfg = TrainConfig {
            epochs,
            batch_speakers: 12,
            learning_rate: 0.002,
            ..TrainConfig::default()
        };
        let model = train(model, &data, &cfg, 0, |_, _| Ok(()))?.model;

        let utt = &held_out.utterances[0];
        let trace = model.trace(&utt.crop_matrix(0))?;
        println!("{mode}: fusion attention, head 0 (* = noise-dominated channel)");
        let w = &trace.fusion_weights[0];
        let header: Vec<String> = (0..utt.channels())
            .map(|c| format!("{:>6}", format!("{c}{}", if utt.noise_mask[c] { "*" } else { "" })))
            .collect();
        println!("      {}", header.join(""));
        for r in 0..w.rows() {
            let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:6.3}")).collect();
            println!("  {r:>2}: {}", row.join(""));
        }
        let stats = channel_selection(&model, &held_out)?;
        println!(
            "  {}/{} noise-channel weights exactly zero; {}/{} utterances shut out all noise channels\n",
            stats.zero_noise_weights, stats.noise_weights, stats.selected, stats.utterances
        );
    }
    Ok(())
}
