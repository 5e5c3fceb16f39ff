//! Prints the 3-context, 5-action environment for a generator seed.
//!
//! `cargo run -p rad-core --example generate_fixture -- 35 > crates/core/fixtures/toy_env.json`

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            eprintln!("usage: generate_fixture <seed>");
            std::process::exit(2)
        });
    let env = rad_core::ToyEnv::generate(seed, 3, 5, 16).expect("generator output is valid");
    println!("{}", env.to_json());
}
