//! Class-conditional visualisations of one neuron for its top classes, next
//! to a plain activation-maximisation image, written as PNGs.
//!
//! cargo run --release -p neurodebug --example visualize_neuron -- /tmp/gallery

use neurodebug::model::{split_classifier, ModelDescriptor};
use neurodebug::visualizer::{generate_fv, generate_gallery, save_gallery, FvSpec, IllusionSpec};

fn main() -> neurodebug::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "gallery".into());
    let handle = split_classifier(&ModelDescriptor::Registry {
        name: "toy-cnn".into(),
        num_classes: 4,
        seed: 0,
        input_size: None,
        class_names: Some(["cat", "dog", "bear", "bird"].map(String::from).to_vec()),
    })?
    .handle;
    let neuron = 3;
    let fv = generate_fv(&handle, &FvSpec { steps: 200, ..FvSpec::new(neuron) })?;
    println!("fv: activation {:.3}", fv.activation);
    let gallery = generate_gallery(&handle, &IllusionSpec { steps: 200, ..IllusionSpec::new(neuron, None) }, 3)?;
    for r in &gallery {
        println!(
            "class {}: activation {:.3}, class logit {:.3}, alignment {:.3}",
            r.class_id.unwrap_or_default(),
            r.activation,
            r.class_logit.unwrap_or_default(),
            r.clip_alignment.unwrap_or_default()
        );
    }
    let mut all = gallery;
    all.push(fv);
    for p in save_gallery(out.as_ref(), &all)? {
        println!("{}", p.display());
    }
    Ok(())
}
