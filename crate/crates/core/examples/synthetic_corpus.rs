//! Generates the procedural corpus and writes it as PNGs with a manifest
//! and attribute table.
//!
//!     cargo run --release --example synthetic_corpus -- /tmp/corpus

use asl::dataset::{generate_synthetic, write_corpus, SyntheticConfig};

fn main() -> asl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_corpus".into());
    let cfg = SyntheticConfig::default();
    let corpus = generate_synthetic(&cfg)?;
    println!(
        "{} classes, {} images of {:?}, {} attributes",
        corpus.num_classes(),
        corpus.samples.len(),
        corpus.image_shape,
        corpus.num_attributes
    );
    for s in corpus.samples.iter().step_by(cfg.samples_per_class).take(4) {
        let bits: String = s.attributes.values().iter().map(|&v| if v > 0.5 { '1' } else { '0' }).collect();
        println!("  {:>9}  {bits}", corpus.class_names[s.label]);
    }
    write_corpus(&corpus, out.as_ref())?;
    println!("wrote {out}/manifest.csv, {out}/attributes.txt and {out}/images/");
    Ok(())
}
