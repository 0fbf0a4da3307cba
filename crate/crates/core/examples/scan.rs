//! One-dimensional grid scan, coarse then fine.

use tecswin::schedule::{parse_grid, scan_scalar};

fn main() -> tecswin::Result<()> {
    // stand-in for FID as a function of the guidance scale
    let mut fid = |s: f64| Ok(1.3 + 4.0 * (s - 1.14).powi(2));
    let (coarse, _) = scan_scalar(&mut fid, &parse_grid("1.0:7.0:0.5")?)?;
    let (fine, table) = scan_scalar(&mut fid, &parse_grid("1.10:1.26:0.02")?)?;
    for (s, v) in table {
        println!("{s:.2} {v:.4}");
    }
    println!("coarse best {coarse}, fine best {fine:.2}");
    Ok(())
}
