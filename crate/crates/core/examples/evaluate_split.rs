//! Per-class and per-group accuracy of a fitted planted model.

use neurodebug::evaluation::evaluate;
use neurodebug::planted::PlantedRun;
use neurodebug::scenarios::ScenarioSpec;

fn main() -> neurodebug::Result<()> {
    let run = PlantedRun::prepare(&ScenarioSpec::five_class(7), 1)?;
    for split in [&run.data.val, &run.data.test] {
        let m = evaluate(&run.handle, split, None)?;
        println!("{}: accuracy {:.3}, worst class {:?}, worst group {:?}", m.split, m.avg_acc, m.worst_class, m.worst_group);
        for (class, acc) in &m.per_class_acc {
            println!("  {:<10} {acc:.3}", run.handle.class_names()[*class]);
        }
    }
    Ok(())
}
