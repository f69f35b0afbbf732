//! Adversarial training on labeled humans, a few labeled animals and an
//! unlabeled target species, with per-epoch metrics and stage checkpoints.
//!
//! Writes under `$CDAPOSE_OUTPUT/examples/wscda`. Takes a few seconds in
//! release mode.

use cdapose::commands::output_root;
use cdapose::eval::evaluate;
use cdapose::experiment::{DeskTask, Variant};
use cdapose::wscda::{train_wscda, Outputs};
use cdapose::Model;

fn main() -> cdapose::Result<()> {
    env_logger::init();
    let task = DeskTask { humans: 120, unlabeled: 60, eval: 60, ..DeskTask::default() };
    let data = task.generate(0)?;
    let (model_cfg, mut cfg, _) = Variant::wscda(true).configs(&task, 0);
    cfg.schedule.rule.max_epochs = 6;

    let dir = output_root().join("examples").join("wscda");
    let outputs = Outputs { checkpoint_dir: Some(dir.clone()), metrics_path: Some(dir.join("metrics.csv")) };
    let out = train_wscda(Model::build(&model_cfg, 0)?, &data.human, &data.animal, &data.unlabeled, &cfg, &outputs)?;

    println!("epoch stage      ddl     apel     hpel  acc_y  acc_z");
    for m in &out.log {
        println!(
            "{:>5} {:>5} {:8.4} {:8.5} {:8.5} {:6.2} {:6.2}",
            m.epoch, m.stage, m.ddl, m.apel, m.hpel, m.disc_acc_y, m.disc_acc_z
        );
    }
    let r = evaluate(&out.model, &data.eval, 0.2)?;
    println!("target PCK@0.2 {:.3}, mAP {}", r.pck, r.map.map_or("n/a".into(), |m| format!("{m:.3}")));
    println!("{} checkpoints in {}", out.checkpoints.len(), dir.display());
    Ok(())
}
