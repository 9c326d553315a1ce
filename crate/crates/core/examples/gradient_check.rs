//! Compares the analytic gradient of the training loss with central finite
//! differences, for every parameter of a small model in both modes.

use adhoc_fusion::model::{FusionModel, ModelConfig};
use adhoc_fusion::simulator::{generate, ChannelCount, SimConfig};
use adhoc_fusion::training::{angular_prototypical_loss, loss_and_grads, sample_epoch, TrainConfig};
use adhoc_fusion::Normalizer;

fn main() -> adhoc_fusion::Result<()> {
    let data = generate(&SimConfig {
        d_in: 8,
        speakers: 3,
        utterances_per_speaker: 2,
        channels: ChannelCount::Fixed(3),
        crops: 1,
        ..SimConfig::default()
    })?;
    let plan = sample_epoch(&data, &TrainConfig::default(), 0)?;
    let batch = &plan.batches[0];

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
        let model = FusionModel::init(config, 11)?;
        let (loss, grads) = loss_and_grads(&model, &data, batch)?;
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (p, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[p].as_mut_slice()[k] += delta;
                    angular_prototypical_loss(&m, &data, batch)
                };
                let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
                let an = g.as_slice()[k];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                checked += 1;
            }
        }
        println!("{mode}: loss {loss:.6}, {checked} gradient entries, worst relative error {worst:.2e}");
    }
    Ok(())
}
