//! Writes the reference scenario files used in the README into a directory.

use std::path::PathBuf;

use netstab::sim::generate::{chain_scenario, double_integrator, random_network, ChainSpec, RandomSpec};
use netstab::sim::Algorithm;

fn main() -> netstab::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scenarios".into()));
    std::fs::create_dir_all(&dir)?;
    let files = [
        ("chain", chain_scenario(&ChainSpec::default())),
        ("di_consist", double_integrator(Algorithm::ConsistSls, 0)),
        ("di_sysid", double_integrator(Algorithm::SysidBaseline, 0)),
        ("random8", random_network(&RandomSpec { n: 8, dbar: 2, horizon: 5, t_final: 200, ..Default::default() }, 7)),
    ];
    for (name, f) in files {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, f.to_json()?)?;
        println!("{}", path.display());
    }
    Ok(())
}
