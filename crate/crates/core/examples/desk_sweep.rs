//! Generates the synthetic two-site corpus and runs both cross-dataset
//! directions, printing the accuracy tables.
//!
//! cargo run --release -p retina-bow --example desk_sweep -- [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use retina_bow::eval::{sweep, ExperimentConfig, ExtractionConfig};
use retina_bow::synth::{generate_corpus, SynthConfig};

fn main() -> retina_bow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("retina-bow-desk"));
    let t = Instant::now();
    let manifest = generate_corpus(&out.join("images"), &SynthConfig::default())?;
    eprintln!("generated {} images in {:.1}s", manifest.records.len(), t.elapsed().as_secs_f64());
    let cfg = ExperimentConfig {
        k_grid: vec![10, 50],
        per_image_cap: Some(200),
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    for (report, timing) in sweep(&cfg, &manifest, &ExtractionConfig::default(), Some(&out.join("cache")))? {
        println!("train {} -> test {}\n{}", report.train_split, report.test_split, report.accuracy_csv());
        for row in &report.rows {
            println!(
                "{:>8} K={:<3} acc {:>8.4} cv {:>8.4} C {:<8} {:?}",
                row.mode.to_string(),
                row.k,
                row.accuracy,
                row.cv_accuracy,
                row.bestc,
                row.confusion.0
            );
        }
        println!("{timing:?}");
    }
    eprintln!("sweep took {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
