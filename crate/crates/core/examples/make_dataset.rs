//! Regenerates the bundled desk dataset: `cargo run --example make_dataset -- data/desk10.csv`.

use hybridfl_core::dataset::{synthesize, SyntheticSpec};

fn main() -> hybridfl_core::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/desk10.csv".into());
    let ds = synthesize(&SyntheticSpec::default());
    ds.save(&out)?;
    println!(
        "wrote {out}: {} train, {} test, dim {}",
        ds.train.len(),
        ds.test.len(),
        ds.dim()
    );
    Ok(())
}
