//! Parameter and FLOP counts of the four architecture variants.
//!
//! `cargo run --example variant_costs -- 17 128 128`

use vtok::config::RunConfig;
use vtok::net::{count_flops, count_params, Variant};

fn main() -> vtok::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let video = match args[..] {
        [f, h, w] => [f, h, w],
        _ => [17, 64, 64],
    };
    let base = RunConfig::default().tokenizer_config()?;
    println!("clip {}x{}x{}", video[0], video[1], video[2]);
    println!("{:<20} {:>12} {:>12}", "variant", "params", "GFLOPs");
    for v in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model.variant = v;
        println!(
            "{:<20} {:>12} {:>12.2}",
            v.label(),
            count_params(&cfg)?,
            count_flops(&cfg, video)? as f64 / 1e9
        );
    }
    Ok(())
}
