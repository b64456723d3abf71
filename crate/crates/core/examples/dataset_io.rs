//! Generate a demonstration dataset, write it, read it back and split it.

use stableflow::dataset::TrajectoryDataset;
use stableflow::experiments::{gen_cycle_dataset, MorphingCycleSpec};

fn main() -> stableflow::Result<()> {
    let specs = [0.0, 1.0].map(|c| MorphingCycleSpec {
        context: c,
        ..Default::default()
    });
    let ds = gen_cycle_dataset(&specs, 4, 7)?;
    let dir = std::env::temp_dir().join("stableflow-dataset-io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("cycles.json");
    ds.write(&path)?;

    let back = TrajectoryDataset::read(&path)?;
    assert_eq!(back, ds);
    println!(
        "{}: {} trajectories, {} transitions, dt {:.4}, generator {:?}",
        path.display(),
        back.len(),
        back.transition_count(),
        back.dt,
        back.provenance.generator
    );
    let (train, test) = back.split(0.75, 0)?;
    println!("split: {} train, {} test", train.len(), test.len());
    Ok(())
}
