//! Boosts an adapted model with confident pseudo-labels on the unlabeled
//! target, printing the threshold schedule as it relaxes.

use cdapose::eval::evaluate;
use cdapose::experiment::{desk_pplo, DeskTask, Variant};
use cdapose::pplo::{train_pplo, PploOutputs};
use cdapose::wscda::{train_wscda, Outputs};
use cdapose::Model;

fn main() -> cdapose::Result<()> {
    env_logger::init();
    let task = DeskTask { humans: 120, unlabeled: 60, eval: 60, ..DeskTask::default() };
    let data = task.generate(1)?;
    let (model_cfg, mut wscda, _) = Variant::wscda_pplo().configs(&task, 1);
    wscda.schedule.rule.max_epochs = 6;
    let adapted = train_wscda(Model::build(&model_cfg, 1)?, &data.human, &data.animal, &data.unlabeled, &wscda, &Outputs::default())?;
    let before = evaluate(&adapted.model, &data.eval, 0.2)?.pck;

    let cfg = desk_pplo(1);
    let sources = [&data.human, &data.animal, &data.unlabeled];
    let out = train_pplo(adapted.model, sources, &data.unlabeled, &wscda, &cfg, &PploOutputs::default())?;
    println!("epoch    mu  accepted  updated  source_loss  target_loss");
    for m in &out.log {
        println!(
            "{:>5} {:5.2} {:>9} {:>8} {:12.5} {:12.5}",
            m.epoch, m.mu, m.accepted_count, m.new_or_updated_count, m.source_loss, m.target_loss
        );
    }
    let after = evaluate(&out.model, &data.eval, 0.2)?.pck;
    println!("{} pseudo-labels held; target PCK@0.2 {before:.3} -> {after:.3}", out.store.len());
    Ok(())
}
