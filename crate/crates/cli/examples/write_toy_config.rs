//! Regenerate configs/toy.json from the built-in toy configuration.

use std::path::Path;

fn main() {
    let cfg = faceforge_core::pipeline::RunConfig::toy(Path::new("runs"));
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    let out = std::env::args().nth(1).unwrap_or_else(|| "configs/toy.json".to_string());
    std::fs::write(&out, json + "\n").expect("write config");
    println!("wrote {out}");
}
