//! The three commands behind the `dmp` binary, kept here so they can be
//! driven from tests without spawning a process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::checks::{self, FAULT_FIXTURE, OPS};
use crate::config::RunConfig;
use crate::error::{DmpError, Result};
use crate::gradcheck::OpCheck;
use crate::model::Model;
use crate::prune::{PruneManager, PruneReport};
use crate::train::{train, EpochMetrics};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "prune_report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug)]
pub struct TrainRun {
    pub output_dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub report: PruneReport,
}

/// Load, override and validate a config; nothing is computed on failure.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DmpError::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| DmpError::ConfigParse(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(config: &Path, seed: Option<u64>) -> Result<TrainRun> {
    let cfg = load_config(config, seed)?;
    run(&cfg)
}

/// Train from an already validated config, writing everything under
/// `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let spec = cfg.model_spec();
    spec.validate()?;
    let (train_set, test_set) = cfg.datasets()?;
    let mut model = Model::new(spec)?;

    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let mut metrics_file = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let outcome = train(&mut model, &train_set, &test_set, &cfg.train_config(), |m| {
        serde_json::to_writer(&mut metrics_file, m)?;
        metrics_file.write_all(b"\n")?;
        metrics_file.flush()?;
        Ok(())
    })?;
    drop(metrics_file);

    let mut manager = outcome.manager;
    checkpoint::save(&out.join(CHECKPOINT_DIR), &model, outcome.steps, manager.events())?;
    let report = manager.snapshot(&model.params, outcome.steps);
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(TrainRun {
        output_dir: out,
        metrics: outcome.metrics,
        report,
    })
}

/// Prune report for a saved checkpoint.
pub fn cmd_report(checkpoint_dir: &Path) -> Result<PruneReport> {
    let (model, manifest) = checkpoint::load(checkpoint_dir)?;
    let mut manager = PruneManager::register(&model)?;
    manager.restore_events(manifest.events)?;
    let masks = manager.masks(&model.params);
    Ok(manager.report_for(&masks, manifest.step))
}

#[derive(Debug)]
pub struct GradcheckRun {
    pub tolerance: f64,
    pub results: Vec<OpCheck>,
}

impl GradcheckRun {
    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|c| !c.passes(self.tolerance))
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.results {
            let verdict = if c.passes(self.tolerance) { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{:<20} max rel err {:.3e}  {verdict}\n",
                c.name, c.max_rel_err
            ));
        }
        out
    }
}

/// Run `ops` (every registered op when empty). `with_fault` appends the
/// broken-backward fixture.
pub fn cmd_gradcheck(ops: &[String], tolerance: f64, with_fault: bool) -> Result<GradcheckRun> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(DmpError::InvalidArgument(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    let mut names: Vec<&str> = if ops.is_empty() {
        OPS.to_vec()
    } else {
        ops.iter().map(String::as_str).collect()
    };
    if with_fault {
        names.push(FAULT_FIXTURE);
    }
    let results = names.into_iter().map(checks::run).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckRun { tolerance, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_an_error() {
        let err = cmd_gradcheck(&["nope".into()], 1e-4, false).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn fault_fixture_is_reported_by_name() {
        let run = cmd_gradcheck(&["relu".into()], 1e-4, true).unwrap();
        assert_eq!(run.failures(), vec![FAULT_FIXTURE]);
        assert!(run.render().contains(FAULT_FIXTURE));
    }

    #[test]
    fn nonpositive_tolerance_rejected() {
        assert!(cmd_gradcheck(&[], 0.0, false).is_err());
    }
}
