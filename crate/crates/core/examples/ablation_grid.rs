//! Trains every ablation row on one seed and prints which components each
//! row switches on next to its target score. Runs for a few minutes.

use cdapose::experiment::{ablation_variants, run_variant, DeskTask};

fn main() -> cdapose::Result<()> {
    let task = DeskTask { humans: 120, unlabeled: 60, eval: 60, ..DeskTask::default() };
    let seed = 2;
    let data = task.generate(seed)?;
    let rows = ablation_variants(10);

    let header: Vec<String> = rows[0].toggles(&data).into_iter().map(|(k, _)| k).collect();
    println!("{:<12} {}  PCK@0.2", "row", header.iter().map(|h| format!("{h:>4}")).collect::<String>());
    for v in &rows {
        let out = run_variant(&task, &data, v, seed)?;
        let marks: String = v.toggles(&data).into_iter().map(|(_, m)| format!("{m:>4}")).collect();
        println!("{:<12} {marks}  {:.3}", v.name, out.pck());
    }
    Ok(())
}
