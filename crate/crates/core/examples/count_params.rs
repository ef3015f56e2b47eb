//! Analytic parameter counts for the four named variants.
//!
//! `cargo run --example count_params [-- XL/2R]`

use dimr::network::{build_variant, count_params, VARIANT_NAMES};

fn main() -> dimr::Result<()> {
    let wanted: Vec<String> = std::env::args().skip(1).collect();
    for name in VARIANT_NAMES.iter().filter(|n| wanted.is_empty() || wanted.iter().any(|w| w == *n)) {
        let count = count_params(&build_variant(name)?)?;
        println!("== {name}\n{count}\n");
    }
    Ok(())
}
