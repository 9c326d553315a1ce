//! Trains a small fusion head and saves a checkpoint.
//!
//! Pass an epoch count as the first argument (default 10). Set
//! `ADHOC_FUSION_LOG=info` to see per-epoch progress.

use adhoc_fusion::model::{FusionModel, ModelConfig};
use adhoc_fusion::simulator::{generate, ChannelCount, SimConfig};
use adhoc_fusion::training::{train, TrainConfig};

fn main() -> adhoc_fusion::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADHOC_FUSION_LOG", "warn")).init();
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);

    let data = generate(&SimConfig {
        d_in: 32,
        speakers: 16,
        utterances_per_speaker: 10,
        channels: ChannelCount::Fixed(12),
        crops: 2,
        noise_channel_fraction: 0.25,
        ..SimConfig::default()
    })?;
    let model = FusionModel::init(
        ModelConfig {
            d_in: 32,
            width: 16,
            heads: 4,
            layers: 2,
            ffn_hidden: 32,
            ..ModelConfig::default()
        },
        0,
    )?;
    let cfg = TrainConfig {
        epochs,
        batch_speakers: 8,
        learning_rate: 0.002,
        ..TrainConfig::default()
    };
    let outcome = train(model, &data, &cfg, 0, |r, _| {
        println!("{}", serde_json::to_string(r)?);
        Ok(())
    })?;
    let path = std::env::temp_dir().join("adhoc-fusion-example.afck");
    outcome.model.save(&path)?;
    let reloaded = FusionModel::load(&path)?;
    assert_eq!(reloaded, outcome.model);
    println!(
        "loss {:.4} -> {:.4}; w = {:.3}, b = {:.3}; saved to {}",
        outcome.history.first().map_or(f64::NAN, |r| r.mean_loss),
        outcome.history.last().map_or(f64::NAN, |r| r.mean_loss),
        outcome.model.scale(),
        outcome.model.bias(),
        path.display()
    );
    std::fs::remove_file(&path)?;
    Ok(())
}
