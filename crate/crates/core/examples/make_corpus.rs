//! Regenerates the bundled synthetic corpus.
//!
//! ```text
//! cargo run -p distil-core --example make_corpus -- crates/core/data/synthetic.txt
//! ```

use distil_core::corpus::synthetic::{generate, BUNDLED_BYTES, BUNDLED_SEED};

fn main() -> std::io::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/data/synthetic.txt".into());
    let text = generate(BUNDLED_SEED, BUNDLED_BYTES);
    std::fs::write(&path, &text)?;
    println!("{path}: {} bytes, {} lines", text.len(), text.lines().count());
    Ok(())
}
