//! Drive the command-line pipeline in-process: generate data, train a small
//! model, roll it out, verify it and draw the arrow field and latent grid.

fn run(args: &[&str]) -> stableflow::Result<()> {
    let argv = std::iter::once("stableflow").chain(args.iter().copied());
    match stableflow::cli::main_with_args(argv) {
        0 => Ok(()),
        code => Err(stableflow::Error::Usage(format!("{} exited with {code}", args[0]))),
    }
}

fn main() -> stableflow::Result<()> {
    env_logger::init();
    let dir = std::env::temp_dir().join("stableflow-cli-pipeline");
    std::fs::create_dir_all(&dir)?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(
        p("train.json"),
        r#"{"epochs": 20, "flow": {"layers": 4, "hidden": [16, 16]}}"#,
    )?;

    run(&[
        "gen-data",
        "--task",
        "cycle",
        "--contexts",
        "0",
        "--n-traj",
        "3",
        "--out",
        &p("data.json"),
    ])?;
    run(&[
        "train",
        "--data",
        &p("data.json"),
        "--config",
        &p("train.json"),
        "--out",
        &p("model.json"),
    ])?;
    run(&[
        "rollout",
        "--model",
        &p("model.json"),
        "--context",
        "0",
        "--steps",
        "300",
        "--perturb",
        "150:0.5,0",
        "--out",
        &p("rollout.json"),
    ])?;
    run(&[
        "verify",
        "--model",
        &p("model.json"),
        "--context",
        "0",
        "--n-starts",
        "20",
        "--out",
        &p("verify.json"),
    ])?;
    for kind in ["field", "grid"] {
        let out = p(&format!("{kind}.svg"));
        run(&[
            "plot",
            "--kind",
            kind,
            "--model",
            &p("model.json"),
            "--data",
            &p("data.json"),
            "--rollout",
            &p("rollout.json"),
            "--out",
            &out,
        ])?;
    }
    run(&[
        "plot",
        "--kind",
        "timeseries",
        "--model",
        &p("model.json"),
        "--rollout",
        &p("rollout.json"),
        "--out",
        &p("timeseries.svg"),
    ])?;
    println!("outputs and their .summary.json files are in {}", dir.display());
    Ok(())
}
