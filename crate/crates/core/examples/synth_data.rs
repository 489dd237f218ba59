//! Writes the synthetic data root used by `configs/tiny.toml`.
//!
//! `cargo run -p wmguard --example synth_data -- [DIR] [SEED]`

use wmguard::data::synthetic::{write_synthetic_root, SyntheticSizes};

fn main() -> wmguard::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "data-synthetic".into());
    let seed = args
        .next()
        .map_or(11, |s| s.parse().expect("SEED must be an integer"));
    write_synthetic_root(dir.as_ref(), SyntheticSizes::default(), seed)?;
    println!("wrote {dir}");
    Ok(())
}
