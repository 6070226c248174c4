//! Render a planted-confound scenario and write it as an image folder.
//!
//! cargo run --release -p neurodebug --example planted_dataset -- /tmp/planted

use neurodebug::scenarios::{synth_planted_dataset, write_image_folder, SampleCounts, ScenarioSpec};

fn main() -> neurodebug::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "planted-dataset".into());
    let spec = ScenarioSpec {
        sample_counts: SampleCounts { train: 20, val: 10, test: 10 },
        ..ScenarioSpec::five_class(7)
    };
    let data = synth_planted_dataset(&spec)?;
    let meta = write_image_folder(out.as_ref(), &data)?;
    for (split, records) in &meta.splits {
        let flagged = records.iter().filter(|r| r.confound == Some(true)).count();
        println!("{split}: {} images, {flagged} carry the patch", records.len());
    }
    println!("written to {out}");
    Ok(())
}
