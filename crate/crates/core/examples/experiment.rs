//! The full pipeline at toy scale: simulate, train both normalizers, and
//! compare them with the oracle one-best channel on 20/30/40-channel sets.
//!
//! The built-in config only shows the plumbing; five epochs are far too few
//! for fusion to beat the oracle. Pass `tests/data/acceptance.json` for the
//! calibrated run (about a quarter of an hour on one core). Artifacts go to
//! a temporary directory.

use adhoc_fusion::cli::{run_experiment, ExperimentConfig};
use adhoc_fusion::simulator::ChannelCount;

fn main() -> adhoc_fusion::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.simulation.d_in = 32;
            cfg.simulation.speakers = 16;
            cfg.simulation.utterances_per_speaker = 8;
            cfg.simulation.channels = ChannelCount::Fixed(20);
            cfg.simulation.crops = 2;
            cfg.simulation.noise_channel_fraction = 0.25;
            cfg.test.speakers = 8;
            cfg.test.utterances_per_speaker = 4;
            cfg.model.d_in = 32;
            cfg.model.width = 16;
            cfg.model.layers = 2;
            cfg.model.ffn_hidden = 32;
            cfg.training.epochs = 5;
            cfg.training.batch_speakers = 8;
            cfg
        }
    };
    let dir = std::env::temp_dir().join("adhoc-fusion-experiment");
    let report = run_experiment(&cfg, Some(&dir))?;
    print!("{}", report.table());
    for m in &report.modes {
        println!(
            "{}: final loss {:.4}, noise channels shut out in {}/{} utterances",
            m.mode, m.final_loss, m.selection.selected, m.selection.utterances
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
