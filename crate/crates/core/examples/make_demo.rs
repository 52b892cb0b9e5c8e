//! Generates the deterministic demo corpus for trying out the CLI.
//!
//! ```sh
//! cargo run -p csca-core --example make_demo -- demo/ 64 42
//! ```

use std::path::Path;
use std::process::exit;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (dir, n, seed) = match args.as_slice() {
        [_, dir] => (dir.clone(), 64, 42),
        [_, dir, n] => (dir.clone(), n.parse().expect("n must be an integer"), 42),
        [_, dir, n, seed] => (
            dir.clone(),
            n.parse().expect("n must be an integer"),
            seed.parse().expect("seed must be an integer"),
        ),
        _ => {
            eprintln!("usage: make_demo DIR [N] [SEED]");
            exit(2);
        }
    };
    match csca_core::synthetic::generate(Path::new(&dir), n, seed) {
        Ok(ds) => {
            println!("manifest:    {}", ds.manifest.display());
            println!("annotations: {}", ds.annotations.display());
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit(1);
        }
    }
}
