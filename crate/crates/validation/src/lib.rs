//! Harness for the acceptance runs: write a dataset and a config, train
//! through the command-line entry point, and summarise the outcome.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Parser;

use pdelearn_cli::{execute, Cli};
use pdelearn_core::{IdentifiedPde, LibraryTerm, PointDataset};

/// Print one `PASS`/`FAIL` line straight to stderr, bypassing the test
/// harness's output capture, then fail the test if the criterion failed.
pub fn verdict(id: &str, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance {id} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub struct Run {
    pub status: u8,
    pub pde: Option<IdentifiedPde>,
    /// The `outcome` recorded in `run.json`, if training started.
    pub outcome: Option<String>,
    pub elapsed: Duration,
}

impl Run {
    pub fn describe(&self) -> String {
        let secs = self.elapsed.as_secs_f64();
        match (&self.pde, &self.outcome) {
            (Some(p), _) => format!("{} [{secs:.0}s]", p.report()),
            (None, Some(o)) => format!("exit {}: {o} [{secs:.0}s]", self.status),
            (None, None) => format!("exit {} [{secs:.0}s]", self.status),
        }
    }

    /// Exactly the expected terms, each coefficient within `rel` of its
    /// target, inside the time budget.
    pub fn recovered(&self, expected: &[(&str, f64)], rel: f64, budget: Duration) -> bool {
        let Some(pde) = &self.pde else { return false };
        pde.terms.len() == expected.len()
            && expected.iter().all(|(t, want)| {
                let term: LibraryTerm = t.parse().expect("valid term");
                pde.coefficient(&term)
                    .is_some_and(|c| (c - want).abs() <= rel * want.abs())
            })
            && self.elapsed <= budget
    }
}

/// Save `train`/`test` under `dir`, write a config whose body may refer to
/// the directory as `@DATA`, and run `pdelearn train` on it.
pub fn train(
    dir: &Path,
    train: &PointDataset,
    test: &PointDataset,
    library: &str,
    body: &str,
) -> Run {
    std::fs::create_dir_all(dir).unwrap();
    train.save(&dir.join("train.csv")).unwrap();
    test.save(&dir.join("test.csv")).unwrap();
    let out = dir.join("run");
    let config = format!(
        "output_dir = \"{}\"\nlibrary = \"{}\"\n{body}",
        out.display(),
        configs_dir().join("libraries").join(library).display(),
    )
    .replace("@DATA", &dir.display().to_string());
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();

    let cli = Cli::try_parse_from(["pdelearn", "-q", "train", path.to_str().unwrap()]).unwrap();
    let started = Instant::now();
    let status = execute(cli);
    let elapsed = started.elapsed();
    let outcome = std::fs::read_to_string(out.join("run.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["outcome"].as_str().map(str::to_string));
    Run {
        status,
        pde: (status == 0).then(|| IdentifiedPde::load(&out.join("pde.json")).unwrap()),
        outcome,
        elapsed,
    }
}
