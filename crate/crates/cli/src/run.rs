//! The `train` subcommand and the run directory it fills.
//!
//! ```text
//! <output_dir>/
//!   config.toml          resolved copy of the config, overrides applied
//!   run.json             version, config hash, seeds, per-phase epochs and pruning, outcome
//!   pde.txt, pde.json    identified equation (only on success)
//!   loss_history.csv     one row per epoch
//!   xi_history.csv       every coefficient and its active flag per epoch
//!   checkpoints/<phase>.json
//!   plot/                with --emit-plot-data
//! ```

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde_json::json;

use pdelearn_core::trainer::{self, TrainState};
use pdelearn_core::{Error, RunConfig, TrainConfig};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.into(),
        source: e,
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, text).map_err(io(path))
}

pub fn train(config: &Path, overrides: &[String], emit_plot_data: bool) -> anyhow::Result<()> {
    let run_cfg = RunConfig::load(config, overrides)?;
    let cfg = run_cfg.into_train_config()?;
    let dir = run_cfg.output_dir.clone();
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(io(&dir))?;
    write(&dir.join("config.toml"), run_cfg.to_toml_string())?;

    let started = Instant::now();
    let (state, result) = trainer::train_with_state(&cfg);
    let elapsed = started.elapsed().as_secs_f64();

    if let Some(state) = &state {
        write_artifacts(&dir, &cfg, state)?;
        if emit_plot_data {
            write_plot_data(&dir.join("plot"), &cfg, state)?;
        }
    }
    let outcome = match &result {
        Ok(_) => "identified".to_string(),
        Err(e) => e.to_string(),
    };
    let phases: Vec<_> = state
        .iter()
        .flat_map(|s| &s.phases)
        .map(|p| {
            json!({
                "phase": p.kind.name(),
                "epochs_run": p.epochs_run,
                "stop": p.stop,
                "pruned": p.pruned.iter().map(|&k| cfg.library.rhs[k].to_string()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": run_cfg.hash(),
        "seed": run_cfg.seed,
        "datasets": cfg.datasets.iter().map(|d| json!({
            "network_seed": d.network_seed,
            "collocation_seed": d.collocation_seed,
            "train_points": d.train.len(),
            "test_points": d.test.as_ref().map_or(0, |t| t.len()),
            "noise_level": d.train.noise_level,
        })).collect::<Vec<_>>(),
        "phases": phases,
        "outcome": outcome,
        "elapsed_seconds": elapsed,
    });
    write(&dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;

    let pde = result?;
    let line = pde.report();
    write(&dir.join("pde.txt"), format!("{line}\n"))?;
    pde.save(&dir.join("pde.json"))?;
    println!("{line}");
    Ok(())
}

fn write_artifacts(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<(), Error> {
    trainer::write_loss_history(
        &dir.join("loss_history.csv"),
        &state.history,
        cfg.datasets.len(),
    )?;
    trainer::write_xi_history(&dir.join("xi_history.csv"), &state.history, &cfg.library)?;
    for c in &state.checkpoints {
        let body = json!({
            "phase": c.phase.name(),
            "networks": c.networks,
            "xi": { "values": c.xi.values, "active": c.xi.active },
            "library": cfg.library.rhs.iter().map(ToString::to_string).collect::<Vec<_>>(),
        });
        let path = dir
            .join("checkpoints")
            .join(format!("{}.json", c.phase.name()));
        write(&path, serde_json::to_string(&body).expect("plain data"))?;
    }
    Ok(())
}

/// Regular grid over the dataset's box: 64 samples per axis in one space
/// dimension, 32 in two, 16 in three.
fn plot_grid(cfg: &TrainConfig, i: usize) -> Array2<f64> {
    let (lo, hi) = cfg.datasets[i].train.domain.corners();
    let d = lo.len();
    let per_axis: usize = match d {
        2 => 64,
        3 => 32,
        _ => 16,
    };
    let n = per_axis.pow(d as u32);
    Array2::from_shape_fn((n, d), |(row, col)| {
        let j = (row / per_axis.pow((d - 1 - col) as u32)) % per_axis;
        let frac = j as f64 / (per_axis - 1) as f64;
        // Time starts just after zero, inside (0, T].
        if col == 0 {
            hi[0] * (j + 1) as f64 / per_axis as f64
        } else {
            lo[col] + frac * (hi[col] - lo[col])
        }
    })
}

fn write_plot_data(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let model = trainer::build_model(state, cfg)?;
    let names = ["t", "x", "y", "z"];
    for i in 0..cfg.datasets.len() {
        let pts = plot_grid(cfg, i);
        let u = model.predict(i, &pts)?;
        let r = model.residuals(i, &pts)?;
        let mut out = names[..pts.ncols()].join(",");
        out.push_str(",u,residual\n");
        for (j, row) in pts.rows().into_iter().enumerate() {
            let coords: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&format!("{},{},{}\n", coords.join(","), u[j], r[j]));
        }
        write(&dir.join(format!("surrogate_{i}.csv")), out)?;
    }
    Ok(())
}
