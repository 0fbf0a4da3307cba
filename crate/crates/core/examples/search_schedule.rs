//! Greedy per-stage substep search on a synthetic metric.
//!
//! The metric charges each stage for the squared distance between its
//! substep count and a hidden per-stage target, so the search should
//! recover the targets stage by stage.

use tecswin::schedule::{build_staged_schedule, greedy_substep_search};

fn main() -> tecswin::Result<()> {
    let base = build_staged_schedule(190, 19, &[10])?;
    let target: Vec<usize> = (0..19).map(|i| 5 + (i * 3) % 11).collect();
    let mut metric = |s: &tecswin::schedule::StageSchedule| {
        Ok(s.substeps.iter().zip(&target).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>())
    };
    let candidates: Vec<usize> = (5..=15).collect();
    let report = greedy_substep_search(&mut metric, &base, &candidates, 1)?;
    println!("initial {:.1} -> best {:.1}", report.initial_metric, report.best_metric);
    println!("substeps {:?}", report.schedule.substeps);
    println!("total steps {}", report.schedule.total_steps());
    Ok(())
}
