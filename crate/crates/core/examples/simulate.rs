//! Generates a small ad-hoc-array dataset, writes it to disk, reads it back
//! and summarizes the per-channel geometry.

use adhoc_fusion::eval::oracle_channel;
use adhoc_fusion::simulator::{generate, read_dataset, write_dataset, ChannelCount, SimConfig};

fn main() -> adhoc_fusion::Result<()> {
    let config = SimConfig {
        d_in: 64,
        speakers: 8,
        utterances_per_speaker: 4,
        channels: ChannelCount::Range([10, 20]),
        noise_channel_fraction: 0.25,
        seed: 5,
        ..SimConfig::default()
    };
    let ds = generate(&config)?;
    let dir = std::env::temp_dir();
    let path = dir.join("adhoc-fusion-example.afds");
    let bytes = write_dataset(&ds, &path)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, ds);
    let (lo, hi) = ds.channel_bounds();
    println!(
        "{} utterances from {} speakers, {lo}-{hi} channels, {bytes} bytes at {}",
        ds.utterances.len(),
        ds.num_speakers(),
        path.display()
    );

    for u in ds.utterances.iter().take(4) {
        let best = oracle_channel(u)?;
        let noisy = u.noise_mask.iter().filter(|&&m| m).count();
        println!(
            "utterance {:>2} (speaker {}): {} channels, {noisy} noise-dominated, \
             closest mic {:.2} m at {:+.1} dB",
            u.id,
            u.speaker,
            u.channels(),
            u.distances[best],
            u.snr_db[best]
        );
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
