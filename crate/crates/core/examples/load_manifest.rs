//! Loads a corpus from `manifest.csv` and `attributes.txt`. Without an
//! argument a small corpus is written to a temporary directory first.
//!
//!     cargo run --example load_manifest -- path/to/corpus

use std::path::PathBuf;

use asl::dataset::{generate_synthetic, load_manifest, write_corpus, SyntheticConfig};

fn main() -> asl::Result<()> {
    let dir = match std::env::args().nth(1) {
        Some(d) => PathBuf::from(d),
        None => {
            let dir = std::env::temp_dir().join("asl_manifest_example");
            let corpus = generate_synthetic(&SyntheticConfig {
                samples_per_class: 4,
                ..SyntheticConfig::default()
            })?;
            write_corpus(&corpus, &dir)?;
            dir
        }
    };
    let corpus = load_manifest(&dir.join("manifest.csv"), &dir.join("attributes.txt"))?;
    println!("{} images of {:?} from {}", corpus.samples.len(), corpus.image_shape, dir.display());
    for (c, ids) in corpus.index_by_class().iter().enumerate() {
        let attrs = corpus.samples[ids[0]].attributes.values();
        let shown: Vec<String> = attrs.iter().take(6).map(|v| format!("{v:.2}")).collect();
        println!("  {:>9}: {:3} images, attributes {} ...", corpus.class_names[c], ids.len(), shown.join(" "));
    }
    Ok(())
}
