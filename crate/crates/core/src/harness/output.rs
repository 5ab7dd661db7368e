use std::fs;
use std::path::{Path, PathBuf};

use super::run::{ExperimentOutput, Summary, TrialResult};
use super::HarnessError;

pub const TRIALS_HEADER: &str =
    "estimator,sigma,trial,angle_err,trans_err,node_rmse,objective,converged,wall_s";
pub const PLOT_HEADER: &str = "sigma,node_rmse,node_rmse_lo,node_rmse_hi,trans_rmse,angle_rmse,crlb_node_rmse,crlb_translation";

/// Shortest round-trip decimal, switching to exponent form for very small or
/// large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn trials_csv(trials: &[TrialResult]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for r in trials {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.estimator,
            fmt_f64(r.sigma),
            r.trial,
            opt(r.angle_err),
            opt(r.trans_err),
            opt(r.node_rmse),
            opt(r.objective),
            r.converged,
            fmt_f64(r.wall_s)
        ));
    }
    out
}

pub fn summary_json(summary: &Summary) -> String {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serialises");
    s.push('\n');
    s
}

/// σ-versus-error series for one estimator, one row per σ level.
pub fn plotdata_csv(summary: &Summary, estimator: &str) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for c in summary.cells.iter().filter(|c| c.estimator == estimator) {
        let node = c.node_rmse.as_ref();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            fmt_f64(c.sigma),
            opt(node.map(|m| m.rmse)),
            opt(node.map(|m| m.rmse_ci[0])),
            opt(node.map(|m| m.rmse_ci[1])),
            opt(c.trans_err.as_ref().map(|m| m.rmse)),
            opt(c.angle_err.as_ref().map(|m| m.rmse)),
            opt(c.crlb.as_ref().map(|b| b.node_rmse)),
            opt(c.crlb.as_ref().map(|b| b.translation)),
        ));
    }
    out
}

/// Files written by [`emit_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub trials: PathBuf,
    pub summary: PathBuf,
    pub plotdata: Vec<PathBuf>,
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Writes `trials.csv`, `summary.json` and `plotdata/<estimator>.csv` under
/// `dir`.
///
/// Everything is first written to temporary files next to its target and only
/// then renamed into place, summary last, so an unwritable directory fails
/// before any output appears.
pub fn emit_outputs(output: &ExperimentOutput, dir: &Path) -> Result<OutputPaths, HarnessError> {
    let plot_dir = dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(|e| io_err(&plot_dir, e))?;

    let mut files: Vec<(PathBuf, String)> =
        vec![(dir.join("trials.csv"), trials_csv(&output.trials))];
    for name in &output.summary.estimators {
        if output.summary.cells.iter().any(|c| &c.estimator == name) {
            files.push((
                plot_dir.join(format!("{name}.csv")),
                plotdata_csv(&output.summary, name),
            ));
        }
    }
    files.push((dir.join("summary.json"), summary_json(&output.summary)));

    let mut staged = Vec::with_capacity(files.len());
    for (target, content) in &files {
        let name = target.file_name().expect("file target").to_string_lossy();
        let tmp = target.with_file_name(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, content) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(io_err(&tmp, e));
        }
        staged.push((tmp, target.clone()));
    }
    for (tmp, target) in &staged {
        fs::rename(tmp, target).map_err(|e| io_err(target, e))?;
    }
    let n = files.len();
    Ok(OutputPaths {
        trials: files[0].0.clone(),
        summary: files[n - 1].0.clone(),
        plotdata: files[1..n - 1].iter().map(|(p, _)| p.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run::Summary;
    use crate::measurement::Modality;

    fn empty() -> ExperimentOutput {
        ExperimentOutput {
            trials: vec![],
            summary: Summary {
                schema: 1,
                master_seed: 0,
                modality: Modality::Range,
                estimators: vec!["rbl".into()],
                sigmas: vec![0.1],
                trials_per_cell: 1,
                cells: vec![],
            },
        }
    }

    #[test]
    fn number_format() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1e-7), "1e-7");
        assert_eq!(fmt_f64(2.5e-12), "2.5e-12");
        assert_eq!(fmt_f64(-3.0), "-3");
    }

    #[test]
    fn empty_results_give_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_outputs(&empty(), dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(&paths.trials).unwrap(),
            format!("{TRIALS_HEADER}\n")
        );
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&paths.summary).unwrap()).unwrap();
        assert_eq!(v["cells"].as_array().unwrap().len(), 0);
        assert!(paths.plotdata.is_empty());
    }

    #[test]
    fn unwritable_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_outputs(&empty(), &blocker.join("out")).unwrap_err();
        assert!(matches!(err, HarnessError::Io { .. }));
        assert!(!blocker.join("out").exists());
    }
}
