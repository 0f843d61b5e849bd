//! Regenerates the frozen mode recipes under `recipes/`.

use std::fs;

fn main() -> stpn_rca::Result<()> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/recipes");
    let five = stpn_rca::synthgen::draw_five_node()?;
    let thirty = stpn_rca::synthgen::draw_thirty_node()?;
    for (name, recipe) in [("five_node_modes.json", five), ("thirty_node.json", thirty)] {
        let path = format!("{dir}/{name}");
        fs::write(&path, serde_json::to_string_pretty(&recipe)? + "\n").map_err(|e| stpn_rca::Error::io(&path, e))?;
        eprintln!("wrote {path}");
    }
    Ok(())
}
