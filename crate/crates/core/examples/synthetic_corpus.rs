//! Writes a synthetic corpus in the interchange format.
//!
//! ```text
//! cargo run --release --example synthetic_corpus -- out.json [seed] [train valid test]
//! ```

use tonicnet::synthetic::{synthetic_corpus, SyntheticConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first() else {
        eprintln!("usage: synthetic_corpus OUT.json [seed] [train valid test]");
        std::process::exit(1);
    };
    let num = |i: usize, default: u64| args.get(i).map_or(default, |s| s.parse().expect("a number"));
    let defaults = SyntheticConfig::default();
    let config = SyntheticConfig {
        seed: num(1, 0),
        train: num(2, defaults.train as u64) as usize,
        valid: num(3, defaults.valid as u64) as usize,
        test: num(4, defaults.test as u64) as usize,
        ..defaults
    };
    std::fs::write(path, synthetic_corpus(&config).to_interchange_json()).expect("write corpus");
}
