//! Runs the caption/image filtering pipeline over a synthetic manifest.

use tecswin::datapipe::{synthetic_manifest, write_manifest, HashPerplexity, Pipeline, ScriptRatio};

fn main() -> tecswin::Result<()> {
    let n = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let records = synthetic_manifest(n, 42);
    let scorer = HashPerplexity::default();
    let out = Pipeline::new(&scorer, &ScriptRatio).run(records);
    println!("{}", serde_json::to_string_pretty(&out.stats)?);
    for (r, reasons) in out.rejected.iter().take(5) {
        let names: Vec<&str> = reasons.iter().map(|r| r.as_str()).collect();
        println!("rejected {:?}: {}", r.caption, names.join(","));
    }
    let mut buf = Vec::new();
    write_manifest(&mut buf, &out.kept[..out.kept.len().min(2)])?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
